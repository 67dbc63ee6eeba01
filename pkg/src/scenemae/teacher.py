"""Teacher features and the on-disk scene container.

Foundation-model outputs (image/text features, instance masks, captions) are
produced offline. Training only ever reads them through a :class:`TeacherBundle`,
either loaded from a scene container or emitted by
:class:`FrozenSyntheticTeacher`, a deterministic stand-in for tests and
synthetic runs.

Container layout (one directory per scene)::

    manifest.json
    points.bin  instance_id.bin  label_id.bin  pixel_mask.bin
    scene_image_feature.bin  scene_text_feature.bin  mask_visual.bin  label_text.bin

Arrays are raw little-endian ``f32``/``i32``; the manifest records dtype, shape
and a CRC32 of each file.
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .correspondence import CameraModel, InstanceMaskSet, MaskInfo
from .geometry import PointCloud


class ContainerError(Exception):
    """Base class for unreadable or inconsistent scene containers."""


class MissingArrayError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class ManifestError(ContainerError):
    pass


@dataclass
class TeacherBundle:
    scene_image_feature: np.ndarray  # (D_img,)
    scene_text_feature: np.ndarray  # (D_txt,)
    per_mask_visual: dict  # mask_id -> (D_img,)
    per_label_text: dict  # label_id -> (D_txt,)
    caption: str = ""

    @property
    def d_img(self) -> int:
        return len(self.scene_image_feature)

    @property
    def d_txt(self) -> int:
        return len(self.scene_text_feature)


@dataclass
class SceneRecord:
    cloud: PointCloud
    camera: CameraModel
    masks: InstanceMaskSet
    teacher: TeacherBundle
    scene_id: str
    label_vocab: list = field(default_factory=list)

    def validate(self):
        self.cloud.validate()
        self.camera.validate()
        self.masks.validate()
        if self.masks.pixel_mask.shape != (self.camera.height, self.camera.width):
            raise ShapeMismatchError("mask image size differs from camera image size")
        t = self.teacher
        for info in self.masks.masks:
            if info.is_foreground and info.mask_id not in t.per_mask_visual:
                raise ManifestError(f"foreground mask {info.mask_id} has no visual feature")
        vecs = [t.scene_image_feature, t.scene_text_feature, *t.per_mask_visual.values(), *t.per_label_text.values()]
        if not all(np.all(np.isfinite(v)) for v in vecs):
            raise ManifestError("teacher features contain non-finite values")
        if any(len(v) != t.d_img for v in t.per_mask_visual.values()):
            raise ShapeMismatchError("per-mask visual features disagree with D_img")
        if any(len(v) != t.d_txt for v in t.per_label_text.values()):
            raise ShapeMismatchError("per-label text features disagree with D_txt")


# --------------------------------------------------------------------------
# frozen synthetic teacher


def _unit(v):
    return v / np.linalg.norm(v)


def _keyed_rng(*key) -> np.random.Generator:
    digest = hashlib.sha256(repr(key).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


class FrozenSyntheticTeacher:
    """Deterministic teacher: label anchors on the unit sphere plus small per-instance jitter.

    Each label's text feature and image anchor start from a random draw keyed by
    label, then are orthogonalized against all lower labels (Gram-Schmidt in
    label order), so distinct labels are exactly orthogonal while the vocabulary
    fits in the dimension and adding labels never moves existing ones. The
    background label ``-1`` keeps its raw draw. A mask's visual feature is its
    label's image anchor plus ``0.1`` times a unit perturbation keyed by
    (scene, instance), renormalized. Scene features are the normalized means of
    the scene's mask/label features.
    """

    jitter = 0.1

    def __init__(self, label_vocab_size: int, d_img: int = 64, d_txt: int = 64, global_seed: int = 0):
        if d_img < 8 or d_txt < 8:
            raise ValueError("teacher dims must be >= 8")
        self.label_vocab_size = label_vocab_size
        self.d_img = d_img
        self.d_txt = d_txt
        self.global_seed = global_seed
        self._basis = {"text": [], "img": []}

    def _anchor(self, kind: str, label: int) -> np.ndarray:
        dim = self.d_txt if kind == "text" else self.d_img
        draw = lambda lab: _unit(_keyed_rng(self.global_seed, kind, lab).standard_normal(dim))  # noqa: E731
        if label < 0:
            return draw(int(label))
        basis = self._basis[kind]
        while len(basis) <= label:
            v = draw(len(basis))
            if len(basis) < dim:
                for b in basis[:dim]:
                    v = v - (v @ b) * b
                v = _unit(v)
            basis.append(v)
        return basis[label].copy()

    def label_text(self, label: int) -> np.ndarray:
        return self._anchor("text", int(label))

    def image_anchor(self, label: int) -> np.ndarray:
        return self._anchor("img", int(label))

    def mask_visual(self, label: int, scene_id: str, instance: int) -> np.ndarray:
        jitter = _unit(_keyed_rng(self.global_seed, "img", str(scene_id), int(instance)).standard_normal(self.d_img))
        return _unit(self.image_anchor(label) + self.jitter * jitter)

    def bundle(self, scene_id: str, masks: InstanceMaskSet, caption: str = "") -> TeacherBundle:
        per_mask = {}
        labels = []
        for info in sorted(masks.masks, key=lambda m: m.mask_id):
            # Background masks (label -1) still get a visual feature; they carry no text.
            per_mask[info.mask_id] = self.mask_visual(info.label_id, scene_id, info.mask_id)
            if info.is_foreground and info.label_id >= 0 and info.label_id not in labels:
                labels.append(info.label_id)
        per_label = {lab: self.label_text(lab) for lab in sorted(labels)}
        if per_mask:
            img = _unit(np.mean(list(per_mask.values()), axis=0))
        else:
            img = self.image_anchor(-1)
        if per_label:
            txt = _unit(np.mean(list(per_label.values()), axis=0))
        else:
            txt = self.label_text(-1)
        f32 = lambda v: np.asarray(v, dtype=np.float32)  # noqa: E731
        return TeacherBundle(
            f32(img), f32(txt),
            {k: f32(v) for k, v in per_mask.items()},
            {k: f32(v) for k, v in per_label.items()},
            caption,
        )


# --------------------------------------------------------------------------
# container I/O

_DTYPES = {"f32": "<f4", "i32": "<i4", "f64": "<f8", "i64": "<i8", "u8": "u1"}


def write_array(directory: Path, name: str, array, dtype: str) -> dict:
    """Write one raw little-endian array and return its manifest entry."""
    arr = np.ascontiguousarray(np.asarray(array).astype(_DTYPES[dtype], copy=False))
    data = arr.tobytes()
    fname = f"{name.replace('/', '__')}.bin"
    with open(directory / fname, "wb") as fh:
        fh.write(data)
    return {"name": name, "dtype": dtype, "shape": list(arr.shape), "file": fname, "crc32": zlib.crc32(data)}


def read_array(directory: Path, entry: dict) -> np.ndarray:
    path = directory / entry["file"]
    if not path.exists():
        raise MissingArrayError(f"array file {entry['file']} is missing")
    data = path.read_bytes()
    if zlib.crc32(data) != entry["crc32"]:
        raise ChecksumError(f"checksum mismatch for {entry['file']}")
    dt = np.dtype(_DTYPES[entry["dtype"]])
    shape = tuple(entry["shape"])
    if len(data) != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatchError(f"{entry['file']} holds {len(data)} bytes, inconsistent with shape {shape}")
    return np.frombuffer(data, dtype=dt).reshape(shape).copy()


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def save_scene(record: SceneRecord, path) -> None:
    record.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    t = record.teacher
    masks = sorted(record.masks.masks, key=lambda m: m.mask_id)
    vocab_size = max(len(record.label_vocab), max(t.per_label_text, default=-1) + 1)

    mask_visual = np.zeros((len(masks), t.d_img), dtype=np.float32)
    has_visual = []
    for i, info in enumerate(masks):
        if info.mask_id in t.per_mask_visual:
            mask_visual[i] = t.per_mask_visual[info.mask_id]
            has_visual.append(True)
        else:
            has_visual.append(False)
    label_text = np.zeros((vocab_size, t.d_txt), dtype=np.float32)
    for lab, vec in t.per_label_text.items():
        label_text[lab] = vec

    c = record.camera
    arrays = [
        write_array(path, "points", record.cloud.points, "f32"),
        write_array(path, "instance_id", record.cloud.instance_id, "i32"),
        write_array(path, "label_id", record.cloud.label_id, "i32"),
        write_array(path, "pixel_mask", record.masks.pixel_mask, "i32"),
        write_array(path, "scene_image_feature", t.scene_image_feature, "f32"),
        write_array(path, "scene_text_feature", t.scene_text_feature, "f32"),
        write_array(path, "mask_visual", mask_visual, "f32"),
        write_array(path, "label_text", label_text, "f32"),
    ]
    manifest = {
        "scene_id": record.scene_id,
        "arrays": arrays,
        "camera": {
            "fx": float(c.fx), "fy": float(c.fy), "cx": float(c.cx), "cy": float(c.cy),
            "R": [float(x) for x in c.rotation.reshape(-1)],
            "t": [float(x) for x in c.translation],
            "width": int(c.width), "height": int(c.height),
        },
        "masks": [
            {"mask_id": int(m.mask_id), "label_id": int(m.label_id), "is_foreground": bool(m.is_foreground),
             "has_visual": has_visual[i]}
            for i, m in enumerate(masks)
        ],
        "text_labels": sorted(int(k) for k in t.per_label_text),
        "caption": t.caption,
        "label_vocab": list(record.label_vocab),
        "dims": {"D_img": t.d_img, "D_txt": t.d_txt},
    }
    _dump_json(path / "manifest.json", manifest)


REQUIRED_ARRAYS = (
    "points", "instance_id", "label_id", "pixel_mask",
    "scene_image_feature", "scene_text_feature", "mask_visual", "label_text",
)


def load_scene(path) -> SceneRecord:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ManifestError(f"{path} has no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"unreadable manifest in {path}: {exc}") from exc

    entries = {e["name"]: e for e in manifest["arrays"]}
    for name in REQUIRED_ARRAYS:
        if name not in entries:
            raise MissingArrayError(f"manifest lacks required array {name!r}")
    a = {name: read_array(path, entries[name]) for name in REQUIRED_ARRAYS}

    cam = manifest["camera"]
    d_img, d_txt = manifest["dims"]["D_img"], manifest["dims"]["D_txt"]
    n_points = len(a["points"])
    n_masks = len(manifest["masks"])
    expected = {
        "points": (n_points, 3),
        "instance_id": (n_points,),
        "label_id": (n_points,),
        "pixel_mask": (cam["height"], cam["width"]),
        "scene_image_feature": (d_img,),
        "scene_text_feature": (d_txt,),
        "mask_visual": (n_masks, d_img),
    }
    for name, shape in expected.items():
        if a[name].shape != shape:
            raise ShapeMismatchError(f"{name} has shape {a[name].shape}, expected {shape}")
    if a["label_text"].ndim != 2 or a["label_text"].shape[1] != d_txt:
        raise ShapeMismatchError(f"label_text has shape {a['label_text'].shape}, expected (V, {d_txt})")

    camera = CameraModel(cam["fx"], cam["fy"], cam["cx"], cam["cy"], np.array(cam["R"]).reshape(3, 3),
                         np.array(cam["t"]), cam["width"], cam["height"])
    infos = [MaskInfo(m["mask_id"], m["label_id"], m["is_foreground"]) for m in manifest["masks"]]
    masks = InstanceMaskSet(infos, a["pixel_mask"])
    per_mask = {m["mask_id"]: a["mask_visual"][i] for i, m in enumerate(manifest["masks"]) if m.get("has_visual", True)}
    labels = manifest.get("text_labels", list(range(len(a["label_text"]))))
    if labels and max(labels) >= len(a["label_text"]):
        raise ShapeMismatchError("text label index beyond label_text rows")
    per_label = {lab: a["label_text"][lab] for lab in labels}
    bundle = TeacherBundle(a["scene_image_feature"], a["scene_text_feature"], per_mask, per_label,
                           manifest.get("caption", ""))
    record = SceneRecord(
        cloud=PointCloud(a["points"], a["instance_id"], a["label_id"]),
        camera=camera,
        masks=masks,
        teacher=bundle,
        scene_id=manifest["scene_id"],
        label_vocab=list(manifest.get("label_vocab", [])),
    )
    record.validate()
    return record


# --------------------------------------------------------------------------
# datasets


def write_dataset_index(root, scene_dirs, label_vocab, dims, extra=None):
    index = {
        "scenes": [os.fspath(Path(d).relative_to(root)) for d in scene_dirs],
        "label_vocab": list(label_vocab),
        "dims": dims,
    }
    if extra:
        index.update(extra)
    _dump_json(Path(root) / "dataset.json", index)


def read_dataset_index(root) -> dict:
    path = Path(root) / "dataset.json"
    if not path.exists():
        raise ManifestError(f"{root} has no dataset.json")
    return json.loads(path.read_text())


def load_dataset(root) -> list:
    index = read_dataset_index(root)
    return [load_scene(Path(root) / rel) for rel in index["scenes"]]
