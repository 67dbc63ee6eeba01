"""Training objectives: masked reconstruction, scene-level and object-level distillation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .masking import PatchState
from .model import ContractError, apply_head


class EmptyTermWarning(UserWarning):
    """A loss term had nothing to average over and was set to zero."""


def smooth_l1(a, b, beta: float = 1.0):
    """Elementwise-mean smooth L1 (quadratic below ``beta``, linear above)."""
    if a.shape != b.shape:
        raise ContractError(f"smooth_l1 shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = (a - b).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean()


def chamfer_l2_batched(a, b):
    """Per-pair squared-L2 Chamfer for (n, Ka, 3) vs (n, Kb, 3) -> (n,)."""
    d = ((a[:, :, None, :] - b[:, None, :, :]) ** 2).sum(dim=-1)
    return d.min(dim=2).values.mean(dim=1) + d.min(dim=1).values.mean(dim=1)


def loss_mae(pred, target, warn: bool = True):
    """Mean Chamfer over the masked patches of one scene.

    ``pred`` and ``target`` are (n_masked, K, 3) center-relative patches.
    """
    if pred.shape[0] != target.shape[0]:
        raise ContractError("prediction and ground truth cover different masked patches")
    if pred.shape[0] == 0:
        if warn:
            warnings.warn("no masked patches; reconstruction loss set to 0", EmptyTermWarning, stacklevel=2)
        return pred.new_zeros(())
    return chamfer_l2_batched(pred, target).mean()


def loss_scene(scene_feat, image_target, text_target, img_head, txt_head, beta: float = 1.0):
    """Returns (l_scene, l_scene_2d, l_scene_text) for one scene feature vector (or a batch)."""
    l_img = smooth_l1(apply_head(img_head, scene_feat), image_target, beta)
    l_txt = smooth_l1(apply_head(txt_head, scene_feat), text_target, beta)
    return l_img + l_txt, l_img, l_txt


def patch_ownership(neighbor_indices, state, n_points=None) -> np.ndarray:
    """Owning patch per point: the lowest-index non-dropped patch whose neighbor set holds it (-1 if none)."""
    neighbor_indices = np.asarray(neighbor_indices)
    if n_points is None:
        n_points = int(neighbor_indices.max()) + 1 if neighbor_indices.size else 0
    owner = np.full(n_points, -1, dtype=np.int64)
    for m in range(len(neighbor_indices)):
        if state[m] == PatchState.DROPPED:
            continue
        idx = neighbor_indices[m]
        free = owner[idx] == -1
        owner[idx[free]] = m
    return owner


@dataclass
class MaskPooling:
    """Per-mask averaging weights over patches for one scene and one plan.

    ``weights[i, m]`` is the share of mask ``mask_ids[i]``'s surviving points
    owned by patch ``m``; rows sum to one. ``is_foreground[i]`` flags the masks
    that also carry text supervision.
    """

    mask_ids: np.ndarray
    weights: np.ndarray  # (n_surviving, M)
    is_foreground: np.ndarray


def mask_pooling_weights(groups, owner: np.ndarray, n_patches: int) -> MaskPooling:
    fg_pos = set(groups.foreground_subset)
    ids, rows, fg = [], [], []
    for g, (mid, pts) in enumerate(zip(groups.mask_ids, groups.point_indices)):
        pts = np.asarray(pts, dtype=np.int64)
        own = owner[pts[pts < len(owner)]]
        own = own[own >= 0]
        if own.size == 0:
            continue
        counts = np.bincount(own, minlength=n_patches).astype(np.float64)
        rows.append(counts / counts.sum())
        ids.append(mid)
        fg.append(g in fg_pos)
    weights = np.stack(rows) if rows else np.zeros((0, n_patches))
    return MaskPooling(np.asarray(ids, dtype=np.int64), weights, np.asarray(fg, dtype=bool))


def pool_student_mask_features(patch_tokens, pooling: MaskPooling, head):
    """Per-mask student features: average of ``head(token of owning patch)`` over the mask's points.

    ``patch_tokens`` is (M, D) in patch order; rows of dropped patches are
    never read because their weights are zero.
    """
    w = torch.as_tensor(pooling.weights, dtype=patch_tokens.dtype)
    used = np.flatnonzero(pooling.weights.sum(axis=0) > 0)
    if len(used) == 0:
        return patch_tokens.new_zeros((0, head.d_out))
    projected = apply_head(head, patch_tokens[used])
    return w[:, used] @ projected


def loss_object(student_img, student_txt, img_targets, txt_targets, beta: float = 1.0, warn: bool = True):
    """Mean smooth L1 over surviving masks (visual) plus over surviving foreground masks (text).

    Returns (l_object, l_object_2d, l_object_text).
    """
    if len(student_img) == 0:
        if warn:
            warnings.warn("no surviving masks; object loss set to 0", EmptyTermWarning, stacklevel=2)
        z = student_img.new_zeros(())
        return z, z, z
    # Equal-length rows, so the mean over all elements equals the mean of per-mask means.
    l_img = smooth_l1(student_img, img_targets, beta)
    if len(student_txt):
        l_txt = smooth_l1(student_txt, txt_targets, beta)
    else:
        l_txt = student_img.new_zeros(())
    return l_img + l_txt, l_img, l_txt


@dataclass
class LossReport:
    l_mae: torch.Tensor
    l_scene: torch.Tensor
    l_object: torch.Tensor
    l_total: torch.Tensor
    breakdown: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    forward: object = None  # ForwardOutput of the pass, when produced by batch_objective

    def as_floats(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in ("l_mae", "l_scene", "l_object", "l_total")}
        out.update({k: float(v) for k, v in self.breakdown.items()})
        return out


def loss_total(l_mae, l_scene, l_object, breakdown=None, flags=None) -> LossReport:
    """Unweighted sum, accumulated as (l_mae + l_scene) + l_object."""
    return LossReport(l_mae, l_scene, l_object, l_mae + l_scene + l_object, dict(breakdown or {}), list(flags or []))
