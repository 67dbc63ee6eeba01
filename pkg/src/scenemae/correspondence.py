"""Pinhole projection, point-to-mask transfer, patch foreground flags, mask groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PatchSet, PointCloud


class ConfigurationError(ValueError):
    """Inputs that were built against incompatible configurations."""


def round_half_away(x):
    """Round to nearest integer, halves away from zero (platform-independent)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class CameraModel:
    """Pinhole camera. ``rotation``/``translation`` map world points into the camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self):
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6, rtol=0):
            raise ConfigurationError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image size must be at least 1x1")

    def to_camera(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def pixel_ray_point(self, u, v, depth) -> np.ndarray:
        """World point at ``depth`` along the ray through pixel (u, v)."""
        xc = np.array([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth])
        return self.rotation.T @ (xc - self.translation)

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` looking toward ``target``; image x right, y down."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(fx, fy, width / 2.0, height / 2.0, rot, -rot @ eye, width, height)


@dataclass
class MaskInfo:
    mask_id: int
    label_id: int
    is_foreground: bool


@dataclass
class InstanceMaskSet:
    """Instance masks: metadata per mask plus an (H, W) map of mask ids (-1 unassigned)."""

    masks: list
    pixel_mask: np.ndarray

    def __post_init__(self):
        self.pixel_mask = np.asarray(self.pixel_mask)

    @property
    def height(self) -> int:
        return self.pixel_mask.shape[0]

    @property
    def width(self) -> int:
        return self.pixel_mask.shape[1]

    def by_id(self) -> dict:
        return {m.mask_id: m for m in self.masks}

    def foreground_ids(self) -> np.ndarray:
        return np.array(sorted(m.mask_id for m in self.masks if m.is_foreground), dtype=np.int64)

    def validate(self):
        ids = [m.mask_id for m in self.masks]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate mask ids")
        present = np.unique(self.pixel_mask)
        unknown = set(present.tolist()) - set(ids) - {-1}
        if unknown:
            raise ConfigurationError(f"pixel map references unknown mask ids {sorted(unknown)}")


@dataclass
class PointMaskMap:
    """Per-point correspondence: pixel (u, v), validity, and assigned mask id."""

    pixels: np.ndarray  # (N, 2) int, (u, v)
    valid: np.ndarray  # (N,) bool
    mask_id: np.ndarray  # (N,) int, -1 = none
    width: int
    height: int


def project_continuous(points, camera: CameraModel):
    """Unrounded pixel coordinates and camera-frame depth for each point."""
    xc = camera.to_camera(points)
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * xc[:, 0] / z + camera.cx
        v = camera.fy * xc[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1), z


def project_points(cloud, camera: CameraModel) -> PointMaskMap:
    """Project points to their nearest pixel; points behind the camera or off-image are invalid."""
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    uv, z = project_continuous(pts, camera)
    valid = z > 0
    pix = np.zeros((len(z), 2), dtype=np.int64)
    pix[valid] = round_half_away(uv[valid]).astype(np.int64)
    valid &= (pix[:, 0] >= 0) & (pix[:, 0] < camera.width)
    valid &= (pix[:, 1] >= 0) & (pix[:, 1] < camera.height)
    pix[~valid] = 0
    return PointMaskMap(
        pixels=pix,
        valid=valid,
        mask_id=np.full(len(z), -1, dtype=np.int64),
        width=camera.width,
        height=camera.height,
    )


def build_point_mask_map(projection: PointMaskMap, masks: InstanceMaskSet) -> PointMaskMap:
    if (projection.height, projection.width) != masks.pixel_mask.shape:
        raise ConfigurationError(
            f"projection image {projection.width}x{projection.height} does not match "
            f"mask image {masks.width}x{masks.height}"
        )
    mask_id = np.full(len(projection.valid), -1, dtype=np.int64)
    v = projection.valid
    mask_id[v] = masks.pixel_mask[projection.pixels[v, 1], projection.pixels[v, 0]]
    return PointMaskMap(projection.pixels, projection.valid, mask_id, projection.width, projection.height)


@dataclass
class PatchSemantics:
    is_foreground: np.ndarray  # (M,) bool
    dominant_mask: np.ndarray  # (M,) int, -1 = none


def classify_patches(patches: PatchSet, pmap: PointMaskMap, masks: InstanceMaskSet, tau: float = 0.5) -> PatchSemantics:
    """A patch is foreground iff strictly more than ``tau`` of its points sit on foreground masks.

    Points on unlabelled pixels count as background evidence.
    """
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    ids = pmap.mask_id[patches.neighbor_indices]  # (M, K)
    fg_ids = masks.foreground_ids()
    on_fg = np.isin(ids, fg_ids)
    k = ids.shape[1]
    is_fg = on_fg.sum(axis=1) > tau * k

    dominant = np.full(len(ids), -1, dtype=np.int64)
    for m in range(len(ids)):
        row = ids[m][on_fg[m]]
        if row.size:
            vals, counts = np.unique(row, return_counts=True)
            # np.unique sorts ascending, argmax picks the first (lowest id) on ties.
            dominant[m] = vals[np.argmax(counts)]
    return PatchSemantics(is_foreground=is_fg, dominant_mask=dominant)


@dataclass
class MaskGroups:
    """Points grouped by the mask they project into.

    ``foreground_subset`` lists positions in ``mask_ids``/``point_indices`` whose
    mask is foreground.
    """

    mask_ids: list = field(default_factory=list)
    point_indices: list = field(default_factory=list)
    foreground_subset: list = field(default_factory=list)

    def __len__(self):
        return len(self.mask_ids)


def group_points_by_mask(pmap: PointMaskMap, masks: InstanceMaskSet) -> MaskGroups:
    groups = MaskGroups()
    for info in sorted(masks.masks, key=lambda m: m.mask_id):
        idx = np.flatnonzero(pmap.valid & (pmap.mask_id == info.mask_id))
        if idx.size == 0:
            continue
        if info.is_foreground:
            groups.foreground_subset.append(len(groups.mask_ids))
        groups.mask_ids.append(info.mask_id)
        groups.point_indices.append(idx)
    return groups
