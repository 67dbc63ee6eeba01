"""Procedural indoor-like scenes with exact ground truth.

A scene is a square room (floor plus the two walls facing the camera) with a
handful of primitive objects standing on the floor. Surfaces are sampled
uniformly by area. The camera sits in the open corner and looks at the point
centroid; instance masks are rendered with a per-pixel nearest-depth-wins rule
over the projected points, and the teacher bundle comes from
:class:`~scenemae.teacher.FrozenSyntheticTeacher`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import CameraModel, InstanceMaskSet, MaskInfo, project_points
from .geometry import PointCloud
from .teacher import FrozenSyntheticTeacher, SceneRecord


@dataclass(frozen=True)
class LabelSpec:
    name: str
    shape: str  # "box" | "sphere" | "cylinder"
    size_min: tuple
    size_max: tuple  # box: (w, d, h); sphere: (r,); cylinder: (r, h)


DEFAULT_VOCAB = (
    LabelSpec("chair", "box", (0.40, 0.40, 0.80), (0.55, 0.55, 1.00)),
    LabelSpec("table", "box", (1.00, 0.70, 0.70), (1.60, 1.00, 0.80)),
    LabelSpec("cabinet", "box", (0.50, 0.40, 1.20), (0.80, 0.60, 1.80)),
    LabelSpec("sofa", "box", (1.60, 0.80, 0.60), (2.20, 1.00, 0.80)),
    LabelSpec("trash_bin", "cylinder", (0.15, 0.40), (0.25, 0.70)),
    LabelSpec("lamp", "cylinder", (0.08, 1.20), (0.15, 1.70)),
    LabelSpec("beanbag", "sphere", (0.25,), (0.40,)),
)


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_objects: tuple = (5, 8)  # inclusive range
    label_vocab: tuple = DEFAULT_VOCAB
    room_extent: float = 4.0
    wall_height: float = 2.5
    points_per_surface_unit: float = 100.0  # points per m^2 on background surfaces
    foreground_density: float | None = 180.0  # points per m^2 on objects; None -> background density
    image_width: int = 480
    image_height: int = 360
    horizontal_fov_deg: float = 90.0
    camera_height: float = 2.0
    d_img: int = 64
    d_txt: int = 64
    seed: int = 0

    def validate(self):
        lo, hi = self.n_objects
        if lo < 1 or hi < lo:
            raise SynthConfigError(f"n_objects range must satisfy 1 <= lo <= hi, got {self.n_objects}")
        if not self.label_vocab:
            raise SynthConfigError("label_vocab is empty")
        for spec in self.label_vocab:
            if spec.shape not in ("box", "sphere", "cylinder"):
                raise SynthConfigError(f"unknown primitive {spec.shape!r} for label {spec.name!r}")
        if self.points_per_surface_unit <= 0:
            raise SynthConfigError("points_per_surface_unit must be positive")
        if self.foreground_density is not None and self.foreground_density < 0:
            raise SynthConfigError("foreground_density must be >= 0")
        if self.room_extent <= 1.0 or self.wall_height <= 0:
            raise SynthConfigError("room too small")
        if self.image_width < 8 or self.image_height < 8:
            raise SynthConfigError("image too small")
        if self.d_img < 8 or self.d_txt < 8:
            raise SynthConfigError("teacher dims must be >= 8")

    @property
    def label_names(self) -> list:
        return [s.name for s in self.label_vocab]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "label_vocab"}
        d["n_objects"] = list(self.n_objects)
        d["label_vocab"] = [
            {"name": s.name, "shape": s.shape, "size_min": list(s.size_min), "size_max": list(s.size_max)}
            for s in self.label_vocab
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SynthConfigError(f"unknown synth config keys {sorted(unknown)}")
        if "label_vocab" in d:
            try:
                d["label_vocab"] = tuple(
                    LabelSpec(v["name"], v["shape"], tuple(v["size_min"]), tuple(v["size_max"]))
                    for v in d["label_vocab"]
                )
            except (KeyError, TypeError) as exc:
                raise SynthConfigError(f"bad label_vocab entry: {exc}") from exc
        if "n_objects" in d:
            d["n_objects"] = tuple(d["n_objects"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _n_samples(rng, area, density):
    return int(rng.poisson(area * density)) if density > 0 else 0


def _sample_rect(rng, n, origin, u, v):
    """n uniform points on the parallelogram origin + s*u + t*v."""
    st = rng.random((n, 2))
    return origin + st[:, :1] * u + st[:, 1:] * v


@dataclass
class _Object:
    label: int
    shape: str
    position: np.ndarray  # floor (x, y)
    yaw: float
    size: tuple
    radius: float = field(init=False)

    def __post_init__(self):
        if self.shape == "box":
            self.radius = 0.5 * float(np.hypot(self.size[0], self.size[1]))
        else:
            self.radius = float(self.size[0])

    def footprint_contains(self, xy):
        """Floor points hidden under the object (boxes and cylinders only)."""
        d = xy - self.position
        if self.shape == "box":
            c, s = np.cos(self.yaw), np.sin(self.yaw)
            lx = d[:, 0] * c + d[:, 1] * s
            ly = -d[:, 0] * s + d[:, 1] * c
            return (np.abs(lx) <= self.size[0] / 2) & (np.abs(ly) <= self.size[1] / 2)
        if self.shape == "cylinder":
            return np.hypot(d[:, 0], d[:, 1]) <= self.size[0]
        return np.zeros(len(xy), dtype=bool)

    def sample_surface(self, rng, density):
        if self.shape == "box":
            w, dep, h = self.size
            hx, hy = w / 2, dep / 2
            corners = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
            parts = [_sample_rect(rng, _n_samples(rng, w * dep, density), np.array([-hx, -hy, h]),
                                  np.array([w, 0, 0]), np.array([0, dep, 0]))]
            for i in range(4):
                a = np.array([*corners[i], 0.0])
                b = np.array([*corners[(i + 1) % 4], 0.0])
                edge = b - a
                parts.append(_sample_rect(rng, _n_samples(rng, np.linalg.norm(edge) * h, density), a, edge,
                                          np.array([0, 0, h])))
            local = np.concatenate(parts)
            c, s = np.cos(self.yaw), np.sin(self.yaw)
            rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
            local = local @ rot.T
        elif self.shape == "sphere":
            (r,) = self.size
            n = _n_samples(rng, 4 * np.pi * r * r, density)
            dirs = rng.standard_normal((n, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            local = dirs * r + np.array([0, 0, r])
        else:
            r, h = self.size
            n_side = _n_samples(rng, 2 * np.pi * r * h, density)
            theta = rng.random(n_side) * 2 * np.pi
            side = np.stack([r * np.cos(theta), r * np.sin(theta), rng.random(n_side) * h], axis=1)
            n_top = _n_samples(rng, np.pi * r * r, density)
            rad = r * np.sqrt(rng.random(n_top))
            phi = rng.random(n_top) * 2 * np.pi
            top = np.stack([rad * np.cos(phi), rad * np.sin(phi), np.full(n_top, h)], axis=1)
            local = np.concatenate([side, top])
        return local + np.array([self.position[0], self.position[1], 0.0])


def _place_objects(rng, config: SynthConfig) -> list:
    lo, hi = config.n_objects
    n = int(rng.integers(lo, hi + 1))
    L = config.room_extent
    objects = []
    for _ in range(n):
        label = int(rng.integers(len(config.label_vocab)))
        spec = config.label_vocab[label]
        size = tuple(float(rng.uniform(a, b)) for a, b in zip(spec.size_min, spec.size_max))
        for _attempt in range(50):
            obj = _Object(label, spec.shape, np.zeros(2), float(rng.uniform(0, np.pi)), size)
            margin = obj.radius + 0.05
            if L - 2 * margin <= 0:
                break
            obj.position = rng.uniform(margin, L - margin, size=2)
            if all(np.linalg.norm(obj.position - o.position) > obj.radius + o.radius + 0.05 for o in objects):
                objects.append(obj)
                break
    return objects


def render_instance_mask(points, instance_id, camera: CameraModel) -> np.ndarray:
    """(H, W) map of the nearest point's instance per pixel; -1 where nothing projects."""
    proj = project_points(points, camera)
    depth = camera.to_camera(points)[:, 2]
    idx = np.flatnonzero(proj.valid)
    pix = proj.pixels[idx, 1] * camera.width + proj.pixels[idx, 0]
    order = np.lexsort((idx, depth[idx], pix))  # by pixel, then depth, then point index
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = idx[order[first]]
    out = np.full(camera.height * camera.width, -1, dtype=np.int32)
    out[pix_sorted[first]] = instance_id[winners]
    return out.reshape(camera.height, camera.width)


def generate_scene(config: SynthConfig, scene_seed: int) -> SceneRecord:
    config.validate()
    rng = np.random.default_rng([config.seed, scene_seed])
    L, H = config.room_extent, config.wall_height
    bg_density = config.points_per_surface_unit
    fg_density = bg_density if config.foreground_density is None else config.foreground_density

    objects = _place_objects(rng, config)

    floor = _sample_rect(rng, _n_samples(rng, L * L, bg_density), np.zeros(3), np.array([L, 0, 0]),
                         np.array([0, L, 0]))
    hidden = np.zeros(len(floor), dtype=bool)
    for obj in objects:
        hidden |= obj.footprint_contains(floor[:, :2])
    floor = floor[~hidden]
    wall_x = _sample_rect(rng, _n_samples(rng, L * H, bg_density), np.zeros(3), np.array([0, L, 0]),
                          np.array([0, 0, H]))
    wall_y = _sample_rect(rng, _n_samples(rng, L * H, bg_density), np.zeros(3), np.array([L, 0, 0]),
                          np.array([0, 0, H]))
    parts = [floor, wall_x, wall_y]
    inst = [np.full(len(p), -1) for p in parts]
    labels = [np.full(len(p), -1) for p in parts]
    for j, obj in enumerate(objects):
        pts = obj.sample_surface(rng, fg_density)
        parts.append(pts)
        inst.append(np.full(len(pts), j))
        labels.append(np.full(len(pts), obj.label))

    points = np.concatenate(parts).astype(np.float32)
    instance_id = np.concatenate(inst).astype(np.int32)
    label_id = np.concatenate(labels).astype(np.int32)
    cloud = PointCloud(points, instance_id, label_id)

    w, h = config.image_width, config.image_height
    fx = w / (2 * np.tan(np.deg2rad(config.horizontal_fov_deg) / 2))
    eye = np.array([L - 0.05, L - 0.05, config.camera_height])
    camera = CameraModel.look_at(eye, points.astype(np.float64).mean(axis=0), fx, fx, w, h)

    pixel_mask = render_instance_mask(points, instance_id, camera)
    present = set(np.unique(pixel_mask).tolist()) - {-1}
    masks = InstanceMaskSet(
        [MaskInfo(j, objects[j].label, True) for j in sorted(present)],
        pixel_mask,
    )

    names = config.label_names
    scene_id = f"scene_{scene_seed:05d}"
    seen = sorted({objects[j].label for j in present})
    caption = "a room with " + (", ".join(names[lab] for lab in seen) if seen else "nothing in it")
    teacher = FrozenSyntheticTeacher(len(names), config.d_img, config.d_txt, config.seed)
    bundle = teacher.bundle(scene_id, masks, caption)
    record = SceneRecord(cloud, camera, masks, bundle, scene_id, names)
    record.validate()
    return record
