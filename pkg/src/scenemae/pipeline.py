"""Scene preparation and the batched training objective.

:func:`prepare_scene` turns a :class:`~scenemae.teacher.SceneRecord` into the
fixed per-scene inputs (patches, patch foreground flags, point-to-mask groups,
teacher targets, probe labels). :func:`batch_objective` runs one masked forward
pass over a batch and assembles the loss report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import losses as L
from .correspondence import (
    MaskGroups,
    PatchSemantics,
    build_point_mask_map,
    classify_patches,
    group_points_by_mask,
    project_points,
)
from .geometry import patchify
from .masking import MaskingPlan, PatchState, build_masking_plan


@dataclass
class PreparedScene:
    scene_id: str
    centers: np.ndarray  # (M, 3)
    local_coords: np.ndarray  # (M, K, 3)
    neighbor_indices: np.ndarray  # (M, K)
    n_points: int
    semantics: PatchSemantics
    groups: MaskGroups
    mask_label: dict  # mask_id -> label_id
    mask_visual: dict  # mask_id -> (D_img,)
    label_text: dict  # label_id -> (D_txt,)
    scene_image: np.ndarray
    scene_text: np.ndarray
    patch_label: np.ndarray  # (M,) ground-truth majority label, -1 = background
    patch_foreground: np.ndarray  # (M,) ground-truth majority foreground flag

    @property
    def n_patches(self) -> int:
        return len(self.centers)


def _majority(values: np.ndarray) -> int:
    vals, counts = np.unique(values, return_counts=True)
    return int(vals[np.argmax(counts)])


def prepare_scene(record, n_patches: int, patch_size: int, tau: float = 0.5, seed_index: int = 0) -> PreparedScene:
    cloud = record.cloud
    patches = patchify(cloud, n_patches, patch_size, seed_index)
    pmap = build_point_mask_map(project_points(cloud, record.camera), record.masks)
    semantics = classify_patches(patches, pmap, record.masks, tau)
    groups = group_points_by_mask(pmap, record.masks)

    nbr = patches.neighbor_indices
    gt_label = np.array([_majority(cloud.label_id[row]) for row in nbr], dtype=np.int64)
    gt_fg = (cloud.instance_id[nbr] >= 0).mean(axis=1) > 0.5
    t = record.teacher
    return PreparedScene(
        scene_id=record.scene_id,
        centers=patches.centers,
        local_coords=patches.local_coords,
        neighbor_indices=nbr,
        n_points=len(cloud),
        semantics=semantics,
        groups=groups,
        mask_label={m.mask_id: m.label_id for m in record.masks.masks},
        mask_visual=dict(t.per_mask_visual),
        label_text=dict(t.per_label_text),
        scene_image=np.asarray(t.scene_image_feature),
        scene_text=np.asarray(t.scene_text_feature),
        patch_label=gt_label,
        patch_foreground=gt_fg,
    )


@dataclass
class ObjectiveSettings:
    r_w: float = 0.7
    r_f: float = 0.8
    r_d: float = 0.4
    ratio_over: str = "remaining"
    semantic_masking: bool = True
    scene_distill: bool = True
    object_distill: bool = True
    beta: float = 1.0
    w_mae: float = 1.0
    w_scene: float = 1.0
    w_object: float = 1.0

    def ratios(self):
        """Effective (r_w, r_f, r_d); semantic masking off means plain uniform masking."""
        if self.semantic_masking:
            return self.r_w, self.r_f, self.r_d
        return self.r_w, self.r_w, 0.0


def plan_for(scene: PreparedScene, settings: ObjectiveSettings, seed) -> MaskingPlan:
    r_w, r_f, r_d = settings.ratios()
    return build_masking_plan(scene.semantics, r_w, r_f, r_d, seed, settings.ratio_over)


def scene_tensors(scenes, dtype=torch.float32):
    local = torch.as_tensor(np.stack([s.local_coords for s in scenes]), dtype=dtype)
    centers = torch.as_tensor(np.stack([s.centers for s in scenes]), dtype=dtype)
    return local, centers


def batch_objective(model, scenes, plans, settings: ObjectiveSettings, dtype=torch.float32) -> L.LossReport:
    """Forward one batch under fixed masking plans and return the loss report.

    Each term is averaged over the scenes where it is defined (a scene without
    masked patches has no reconstruction term, one without surviving masks no
    object term).
    """
    local, centers = scene_tensors(scenes, dtype)
    state = np.stack([p.state for p in plans])
    out = model(local, centers, state)
    flags = []

    rec = []
    for i, plan in enumerate(plans):
        if out.n_masked[i]:
            target = local[i, torch.from_numpy(plan.masked)]
            rec.append(L.loss_mae(out.pred[i], target))
    if rec:
        l_mae = torch.stack(rec).mean()
    else:
        l_mae = local.new_zeros(())
        flags.append("no_masked_patches")
    l_mae = settings.w_mae * l_mae

    breakdown = {}
    if settings.scene_distill:
        img_t = torch.as_tensor(np.stack([s.scene_image for s in scenes]), dtype=dtype)
        txt_t = torch.as_tensor(np.stack([s.scene_text for s in scenes]), dtype=dtype)
        l_scene, l_s2d, l_stxt = L.loss_scene(out.scene_feat, img_t, txt_t, model.scene_img_head,
                                              model.scene_txt_head, settings.beta)
        breakdown.update(l_scene_2d=l_s2d.detach(), l_scene_text=l_stxt.detach())
        l_scene = settings.w_scene * l_scene
    else:
        l_scene = local.new_zeros(())

    if settings.object_distill:
        terms, t2d, ttxt = [], [], []
        d = out.decoded.shape[-1]
        for i, (scene, plan) in enumerate(zip(scenes, plans)):
            owner = L.patch_ownership(scene.neighbor_indices, plan.state, scene.n_points)
            pooling = L.mask_pooling_weights(scene.groups, owner, scene.n_patches)
            if len(pooling.mask_ids) == 0:
                continue
            n_tok = out.n_visible[i] + out.n_masked[i]
            patch_tokens = out.decoded.new_zeros((scene.n_patches, d)).index_copy(
                0, out.token_patch[i, :n_tok], out.decoded[i, :n_tok])
            s_img = L.pool_student_mask_features(patch_tokens, pooling, model.obj_img_head)
            fg_pool = L.MaskPooling(pooling.mask_ids[pooling.is_foreground],
                                    pooling.weights[pooling.is_foreground],
                                    pooling.is_foreground[pooling.is_foreground])
            s_txt = L.pool_student_mask_features(patch_tokens, fg_pool, model.obj_txt_head)
            img_t = torch.as_tensor(np.stack([scene.mask_visual[m] for m in pooling.mask_ids]), dtype=dtype)
            if len(fg_pool.mask_ids):
                txt_t = torch.as_tensor(np.stack([scene.label_text[scene.mask_label[m]] for m in fg_pool.mask_ids]),
                                        dtype=dtype)
            else:
                txt_t = s_txt.detach()
            tot, a, b = L.loss_object(s_img, s_txt, img_t, txt_t, settings.beta)
            terms.append(tot)
            t2d.append(a)
            ttxt.append(b)
        if terms:
            l_object = torch.stack(terms).mean()
            breakdown.update(l_object_2d=torch.stack(t2d).mean().detach(),
                             l_object_text=torch.stack(ttxt).mean().detach())
        else:
            l_object = local.new_zeros(())
            flags.append("no_surviving_masks")
        l_object = settings.w_object * l_object
    else:
        l_object = local.new_zeros(())

    report = L.loss_total(l_mae, l_scene, l_object, breakdown, flags)
    report.forward = out
    return report


PROBE_TASKS = ("patch-label", "patch-foreground", "patch-label-all")


def probe_targets(scene: PreparedScene, task: str, n_labels: int) -> np.ndarray:
    """Per-patch class ids for a probe task.

    ``patch-label`` keeps the ``-1`` sentinel on background patches so the
    probe skips them; ``patch-label-all`` turns background into class ``n_labels``.
    """
    if task == "patch-foreground":
        return scene.patch_foreground.astype(np.int64)
    if task == "patch-label":
        return scene.patch_label.astype(np.int64)
    if task == "patch-label-all":
        lab = scene.patch_label.astype(np.int64)
        lab[lab < 0] = n_labels
        return lab
    raise ValueError(f"unknown probe task {task!r}")

