"""Semantic-guided masked autoencoding for 3D scenes with 2D/text feature distillation.

Modules, bottom up:

- :mod:`scenemae.geometry`: point clouds, farthest-point sampling, k-NN patches, Chamfer distance
- :mod:`scenemae.correspondence`: pinhole projection, point-to-mask transfer, patch semantics
- :mod:`scenemae.masking`: foreground-aware masking with background dropping
- :mod:`scenemae.teacher`: teacher features and the on-disk scene container
- :mod:`scenemae.synthgen`: procedural labeled indoor scenes
- :mod:`scenemae.model`: transformer encoder/decoder and projection heads
- :mod:`scenemae.losses`: reconstruction and distillation objectives
- :mod:`scenemae.trainkit`: pre-training, linear probing, ablations
- :mod:`scenemae.cli`: the ``scenemae`` command line
"""

__version__ = "0.1.0"
