"""Point-cloud kernels: farthest-point sampling, k-NN patch grouping, Chamfer distance.

Everything here is plain numpy in float64 and deterministic. Ties are always
broken toward the lowest point index so results can be checked against
brute-force oracles exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PreconditionError(ValueError):
    """An operation was called with arguments outside its domain."""


@dataclass
class PointCloud:
    """Scene points with per-point instance and semantic labels.

    ``instance_id`` is -1 for background structure (floor, walls) and >= 0 for
    object instances. ``label_id`` indexes the label vocabulary, -1 for
    background.
    """

    points: np.ndarray
    instance_id: np.ndarray
    label_id: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points)
        n = len(self.points)
        if self.instance_id is None:
            self.instance_id = np.full(n, -1, dtype=np.int32)
        if self.label_id is None:
            self.label_id = np.full(n, -1, dtype=np.int32)
        self.instance_id = np.asarray(self.instance_id)
        self.label_id = np.asarray(self.label_id)

    def __len__(self):
        return len(self.points)

    def validate(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise PreconditionError(f"points must be (N>=1, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise PreconditionError("points contain non-finite coordinates")
        n = len(self.points)
        if self.instance_id.shape != (n,) or self.label_id.shape != (n,):
            raise PreconditionError("instance_id / label_id must have one entry per point")
        if np.any((self.instance_id >= 0) & (self.label_id < 0)):
            raise PreconditionError("object points (instance_id >= 0) need a label_id >= 0")

    @classmethod
    def from_points(cls, points) -> "PointCloud":
        return cls(np.asarray(points), None, None)


@dataclass
class PatchSet:
    """M patches of K points each.

    ``local_coords[m, k] + centers[m] == points[neighbor_indices[m, k]]``.
    """

    centers: np.ndarray  # (M, 3)
    neighbor_indices: np.ndarray  # (M, K) int
    local_coords: np.ndarray  # (M, K, 3)
    center_indices: np.ndarray  # (M,) int

    @property
    def n_patches(self) -> int:
        return len(self.centers)

    @property
    def patch_size(self) -> int:
        return self.neighbor_indices.shape[1]


def _xyz(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return np.asarray(pts, dtype=np.float64)


def fps(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling.

    Starts from ``seed_index``; each subsequent pick is the point whose minimum
    squared distance to the already selected set is largest (lowest index on
    ties). Returns ``m`` distinct indices.
    """
    pts = _xyz(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise PreconditionError(f"fps needs 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= seed_index < n:
        raise PreconditionError(f"seed_index {seed_index} out of range for N={n}")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    min_d = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    min_d[seed_index] = -1.0
    for i in range(1, m):
        # np.argmax returns the first maximum, which is the lowest index.
        nxt = int(np.argmax(min_d))
        selected[i] = nxt
        d = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d, d, out=min_d)
        min_d[nxt] = -1.0
    return selected


def knn_group(cloud, center_indices, k: int) -> PatchSet:
    """Group the ``k`` nearest points (center included) around each center."""
    pts = _xyz(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise PreconditionError(f"knn_group needs 1 <= K <= N, got K={k}, N={n}")
    center_indices = np.asarray(center_indices, dtype=np.int64)
    if center_indices.size and (center_indices.min() < 0 or center_indices.max() >= n):
        raise PreconditionError("center index out of range")

    centers = pts[center_indices]
    d = np.sum((centers[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    # Stable sort keeps lower indices first among equal distances.
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    local = pts[order] - centers[:, None, :]
    return PatchSet(
        centers=centers,
        neighbor_indices=order,
        local_coords=local,
        center_indices=center_indices,
    )


def patchify(cloud, n_patches: int, patch_size: int, seed_index: int = 0) -> PatchSet:
    """FPS centers followed by k-NN grouping."""
    n = len(_xyz(cloud))
    centers = fps(cloud, min(n_patches, n), seed_index)
    return knn_group(cloud, centers, min(patch_size, n))


def chamfer_l2(a, b) -> float:
    """Squared-L2 Chamfer distance, mean per direction, directions summed."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise PreconditionError("chamfer_l2 needs two non-empty point sets")
    d = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())
