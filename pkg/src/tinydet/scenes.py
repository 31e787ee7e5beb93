"""Deterministic synthetic tiny-object scenes.

Each scene is an RGB image in [0,1] with a handful of small filled rectangles
or discs on a lightly textured background plus Gaussian noise.  Object colors
carry a per-class signature so classification is learnable; object sides are
drawn from a clipped exponential, which mirrors the heavy small-end skew of
tiny-object data.  Generation uses a counter-based (Philox) stream keyed by
(seed, scene index), so scenes are reproducible independently of generation
order or parallelism.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .anchors import Box
from .tensor import read_tensor_file, write_tensor_file

__all__ = [
    "SceneSpec",
    "Scene",
    "class_color",
    "generate_scene",
    "write_dataset",
    "read_dataset",
    "ANNOTATION_SCHEMA",
    "validate_annotations",
]

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations"],
    "properties": {
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "file", "height", "width"],
                "properties": {
                    "id": {"type": "integer"},
                    "file": {"type": "string"},
                    "height": {"type": "integer"},
                    "width": {"type": "integer"},
                },
            },
        },
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "bbox", "category"],
                "properties": {
                    "image_id": {"type": "integer"},
                    "bbox": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": 4,
                        "maxItems": 4,
                    },
                    "category": {"type": "integer"},
                },
            },
        },
    },
}


@dataclass
class SceneSpec:
    """Knobs of the generator; fully determines a dataset together with a seed."""

    height: int = 128
    width: int = 128
    objects_min: int = 1
    objects_max: int = 5
    side_min: float = 6.0
    side_max: float = 16.0
    side_scale: float = 3.0  # exponential decay scale of sides above side_min
    num_classes: int = 3
    contrast: float = 0.9
    noise_sigma: float = 0.02
    tiny_only: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.tiny_only and self.side_max > 16.0:
            raise ValueError("tiny-only spec requires side_max <= 16")
        if not (0 < self.side_min <= self.side_max):
            raise ValueError("need 0 < side_min <= side_max")
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ValueError("need 0 <= objects_min <= objects_max")
        if self.num_classes < 1:
            raise ValueError("need at least one object class")


@dataclass
class Scene:
    image: np.ndarray              # [3,H,W] float32 in [0,1]
    gts: list = field(default_factory=list)  # [(Box, class_id)]


_BG_LEVEL = 0.4


def class_color(class_id: int) -> np.ndarray:
    """Stable per-class RGB signature from a golden-angle hue walk."""
    hue = (0.13 + class_id * 0.61803398875) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9), dtype=np.float64)


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF,
                                                     index & 0xFFFFFFFFFFFFFFFF]))


def _smooth_texture(rng, h, w, amplitude):
    coarse = rng.uniform(-1.0, 1.0, size=(h // 16 + 2, w // 16 + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    tex = (coarse[y0[:, None], x0[None, :]] * (1 - wy) * (1 - wx)
           + coarse[y0[:, None], x0[None, :] + 1] * (1 - wy) * wx
           + coarse[y0[:, None] + 1, x0[None, :]] * wy * (1 - wx)
           + coarse[y0[:, None] + 1, x0[None, :] + 1] * wy * wx)
    return amplitude * tex


def _sample_side(rng, spec: SceneSpec) -> int:
    s = spec.side_min + rng.exponential(spec.side_scale)
    s = min(s, spec.side_max)
    return max(int(round(s)), int(np.ceil(spec.side_min)))


def generate_scene(spec: SceneSpec, index: int = 0) -> Scene:
    """Render one scene; fully determined by (spec, index)."""
    rng = _scene_rng(spec.seed, index)
    h, w = spec.height, spec.width
    img = np.full((h, w, 3), _BG_LEVEL, dtype=np.float64)
    img += _smooth_texture(rng, h, w, 2.0 * spec.noise_sigma)[..., None]

    n_objects = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    boxes: list[tuple[Box, int]] = []
    for _ in range(n_objects):
        placed = False
        for _attempt in range(100):
            sw = _sample_side(rng, spec)
            sh = _sample_side(rng, spec)
            cls = int(rng.integers(spec.num_classes))
            shape = int(rng.integers(2))  # 0 = rectangle, 1 = disc
            x1 = int(rng.integers(0, w - sw + 1))
            y1 = int(rng.integers(0, h - sh + 1))
            cand = Box(float(x1), float(y1), float(x1 + sw), float(y1 + sh))
            if any(cand.x1 < b.x2 + 1 and b.x1 < cand.x2 + 1
                   and cand.y1 < b.y2 + 1 and b.y1 < cand.y2 + 1 for b, _ in boxes):
                continue
            color = _BG_LEVEL + spec.contrast * (class_color(cls) - _BG_LEVEL)
            if shape == 0:
                img[y1:y1 + sh, x1:x1 + sw] = color
            else:
                yy, xx = np.mgrid[y1:y1 + sh, x1:x1 + sw]
                cy, cx = y1 + (sh - 1) / 2.0, x1 + (sw - 1) / 2.0
                ry, rx = max(sh / 2.0, 0.75), max(sw / 2.0, 0.75)
                mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
                img[y1:y1 + sh, x1:x1 + sw][mask] = color
            boxes.append((cand, cls))
            placed = True
            break
        if not placed:
            raise ValueError(
                f"scene {index}: could not place {n_objects} non-overlapping objects "
                f"in {w}x{h} after bounded retries"
            )
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Scene(image=img.transpose(2, 0, 1).astype(np.float32), gts=boxes)


# ---------------------------------------------------------------------------
# dataset directory layout: manifest.json, annotations.json, images/NNNNN.efbt


def validate_annotations(payload, path: str = "<annotations>"):
    """Minimal structural validation with record-level diagnostics."""
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: top level must be an object")
    for key in ("images", "annotations"):
        if key not in payload or not isinstance(payload[key], list):
            raise ValueError(f"{path}: missing or non-array field {key!r}")
    for i, rec in enumerate(payload["images"]):
        for field_name in ("id", "file", "height", "width"):
            if field_name not in rec:
                raise ValueError(f"{path}: images[{i}] missing {field_name!r}")
    for i, rec in enumerate(payload["annotations"]):
        for field_name in ("image_id", "bbox", "category"):
            if field_name not in rec:
                raise ValueError(f"{path}: annotations[{i}] missing {field_name!r}")
        if len(rec["bbox"]) != 4:
            raise ValueError(f"{path}: annotations[{i}] bbox must have 4 entries")


def write_dataset(spec: SceneSpec, n: int, out_dir: str):
    """Generate and persist n scenes; returns the manifest dict."""
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    images = []
    annotations = []
    for i in range(n):
        scene = generate_scene(spec, i)
        fname = f"images/{i:05d}.efbt"
        write_tensor_file(os.path.join(out_dir, fname), scene.image)
        images.append({"id": i, "file": fname, "height": spec.height, "width": spec.width})
        for box, cls in scene.gts:
            annotations.append({"image_id": i, "bbox": [box.x1, box.y1, box.x2, box.y2],
                                "category": cls})
    payload = {"images": images, "annotations": annotations}
    validate_annotations(payload)
    with open(os.path.join(out_dir, "annotations.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    manifest = {"format": "tinydet-dataset-v1", "count": n, "spec": asdict(spec)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def read_dataset(directory: str):
    """Load a dataset directory back into (scenes, manifest)."""
    manifest_path = os.path.join(directory, "manifest.json")
    ann_path = os.path.join(directory, "annotations.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"{manifest_path}: {e}") from e
    try:
        with open(ann_path) as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"{ann_path}: {e}") from e
    validate_annotations(payload, ann_path)
    by_image = {rec["id"]: [] for rec in payload["images"]}
    for i, rec in enumerate(payload["annotations"]):
        if rec["image_id"] not in by_image:
            raise ValueError(f"{ann_path}: annotations[{i}] references unknown image "
                             f"{rec['image_id']}")
        x1, y1, x2, y2 = rec["bbox"]
        by_image[rec["image_id"]].append((Box(x1, y1, x2, y2), int(rec["category"])))
    scenes = []
    for rec in payload["images"]:
        img = read_tensor_file(os.path.join(directory, rec["file"]))
        scenes.append(Scene(image=img, gts=by_image[rec["id"]]))
    return scenes, manifest
