# %% [markdown]
# # From a synthetic room to a masking plan
#
# This walk-through generates one labeled indoor scene, cuts it into point
# patches, labels each patch foreground or background from the instance
# masks, and draws a masking plan that drops background and hides most of the
# foreground.

# %%
import numpy as np

from scenemae.masking import PatchState, build_masking_plan, plan_counts
from scenemae.pipeline import prepare_scene
from scenemae.synthgen import SynthConfig, generate_scene

cfg = SynthConfig()
record = generate_scene(cfg, 3)
print(record.scene_id, record.cloud.points.shape, "points,", len(record.masks.masks), "masks")

# %% [markdown]
# Each object instance fills an image mask, and the teacher gives each mask a
# visual feature plus a text feature for its label. Background surfaces
# (floor, walls) have no mask.

# %%
labels = [cfg.label_vocab[m.label_id].name for m in record.masks.masks]
print(sorted(set(labels)))

# %% [markdown]
# Patchify with the laptop profile: 64 farthest-point centers and 16 nearest
# neighbours each. A patch counts as foreground when at least half of its
# points land inside some object mask.

# %%
scene = prepare_scene(record, n_patches=64, patch_size=16)
fg = scene.semantics.is_foreground
print(f"{fg.sum()} foreground / {len(fg)} patches")

# %% [markdown]
# The staged plan drops 40% of the background, masks 80% of the foreground,
# then tops up background masking until 70% of the surviving patches are hidden.

# %%
plan = build_masking_plan(fg, r_w=0.7, r_f=0.8, r_d=0.4, rng_seed=0)
expected = plan_counts(int(fg.sum()), int((~fg).sum()), 0.7, 0.8, 0.4)
print(expected)
assert plan.realized_counts() == expected
assert not np.any(fg & (plan.state == PatchState.DROPPED))

# %% [markdown]
# A different seed picks different patches but the same counts.

# %%
other = build_masking_plan(fg, rng_seed=1)
print("same counts:", other.counts == plan.counts, "| same patches:", np.array_equal(other.state, plan.state))
