"""Synthetic two-domain shape detection benchmark.

Scenes hold discs, squares and triangles of random color on a smooth textured
background.  The target domain renders the same kind of scene, then shifts
hue, blends in height-dependent fog and adds sensor noise.

Layout on disk::

    <root>/<split>/images/NNNNNN.png
    <root>/<split>/annotations.json   # [{file, width, height, boxes: [...]}, ...]
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .geometry import ImageSample, boxes_from_arrays

CLASS_NAMES = ("disc", "square", "triangle")
SPLITS = ("source", "target", "target_eval")
_SUPERSAMPLE = 4


@dataclass
class SyntheticSceneSpec:
    canvas_size: int = 64
    num_classes: int = 3
    objects_min: int = 1
    objects_max: int = 4
    size_min: int = 10
    size_max: int = 30
    fog_alpha: float = 0.55
    fog_color: float = 0.8
    noise_sigma: float = 0.06
    hue_shift: float = 0.12
    streak_count: int = 30
    streak_intensity: float = 0.45
    n_source: int = 400
    n_target: int = 400
    n_target_eval: int = 300

    def validate(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ValueError("bad objects-per-image range")
        if not 2 <= self.size_min <= self.size_max <= self.canvas_size:
            raise ValueError("bad object size range")
        if min(self.fog_alpha, self.noise_sigma, self.hue_shift) <= 0:
            raise ValueError("target style parameters must be strictly positive")
        if self.streak_count < 0 or self.streak_intensity < 0:
            raise ValueError("streak parameters must be non-negative")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    base = rng.uniform(0.15, 0.55, size=3)
    grad = rng.uniform(-0.15, 0.15, size=(2, 3))
    img = base + xx[..., None] * grad[0] + yy[..., None] * grad[1]
    # Low-frequency blotches give the texture maps something to find.
    for _ in range(3):
        cx, cy = rng.uniform(0, 1, size=2)
        sig = rng.uniform(0.1, 0.3)
        amp = rng.uniform(-0.12, 0.12, size=3)
        img = img + amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig**2))[..., None]
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _object_color(rng: np.random.Generator) -> Tuple[float, float, float]:
    h = rng.uniform(0, 1)
    s = rng.uniform(0.5, 1.0)
    v = rng.uniform(0.6, 1.0)
    return colorsys.hsv_to_rgb(h, s, v)


def _place_boxes(rng, spec: SyntheticSceneSpec) -> List[Tuple[int, int, int, int, int]]:
    n = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    boxes = []
    for _ in range(n):
        for _attempt in range(30):
            side = int(rng.integers(spec.size_min, spec.size_max + 1))
            x0 = int(rng.integers(0, spec.canvas_size - side + 1))
            y0 = int(rng.integers(0, spec.canvas_size - side + 1))
            cand = (x0, y0, x0 + side, y0 + side)
            if all(cand[2] + 1 <= b[0] or b[2] + 1 <= cand[0] or cand[3] + 1 <= b[1] or b[3] + 1 <= cand[1] for b in boxes):
                boxes.append(cand + (int(rng.integers(0, spec.num_classes)),))
                break
    return boxes


def render_scene(rng: np.random.Generator, spec: SyntheticSceneSpec) -> Tuple[np.ndarray, List[Tuple[int, int, int, int, int]]]:
    size = spec.canvas_size
    bg = _background(rng, size)
    boxes = _place_boxes(rng, spec)
    k = _SUPERSAMPLE
    mask_img = Image.new("L", (size * k, size * k), 0)
    color_layer = np.zeros((size, size, 3))
    coverage = np.zeros((size, size))
    for x0, y0, x1, y1, cls in boxes:
        mask_img.paste(0, (0, 0, size * k, size * k))
        draw = ImageDraw.Draw(mask_img)
        X0, Y0, X1, Y1 = x0 * k, y0 * k, x1 * k - 1, y1 * k - 1
        if CLASS_NAMES[cls] == "disc":
            draw.ellipse((X0, Y0, X1, Y1), fill=255)
        elif CLASS_NAMES[cls] == "square":
            draw.rectangle((X0, Y0, X1, Y1), fill=255)
        else:
            draw.polygon([((X0 + X1) / 2.0, Y0), (X1, Y1), (X0, Y1)], fill=255)
        alpha = np.asarray(mask_img.resize((size, size), Image.BOX), dtype=np.float64) / 255.0
        color = np.array(_object_color(rng))
        shade = 1.0 - 0.25 * (np.mgrid[0:size, 0:size][0] - y0) / max(1, y1 - y0)
        obj = np.clip(color * shade[..., None], 0, 1)
        color_layer = color_layer * (1 - alpha[..., None]) + obj * alpha[..., None]
        coverage = np.maximum(coverage, alpha)
    img = bg * (1 - coverage[..., None]) + color_layer
    return np.clip(img, 0.0, 1.0), boxes


def _streaks(rng: np.random.Generator, size: int, count: int) -> np.ndarray:
    """Slanted thin rain streaks as a coverage map in [0, 1]."""
    k = _SUPERSAMPLE
    layer = Image.new("L", (size * k, size * k), 0)
    draw = ImageDraw.Draw(layer)
    for _ in range(count):
        x, y = rng.uniform(0, size, size=2)
        length = rng.uniform(6.0, 16.0)
        angle = np.deg2rad(rng.uniform(70.0, 80.0))
        dx, dy = np.cos(angle) * length, np.sin(angle) * length
        draw.line([(x * k, y * k), ((x + dx) * k, (y + dy) * k)], fill=255, width=k)
    return np.asarray(layer.resize((size, size), Image.BOX), dtype=np.float64) / 255.0


def apply_target_style(img: np.ndarray, rng: np.random.Generator, spec: SyntheticSceneSpec) -> np.ndarray:
    """Hue rotation, rain streaks, height-dependent fog and Gaussian noise."""
    from skimage.color import hsv2rgb, rgb2hsv

    hsv = rgb2hsv(img)
    hsv[..., 0] = (hsv[..., 0] + spec.hue_shift) % 1.0
    out = hsv2rgb(hsv)
    size = img.shape[0]
    if spec.streak_count:
        out = out + spec.streak_intensity * _streaks(rng, size, spec.streak_count)[..., None]
    depth = 1.0 - np.arange(size, dtype=np.float64) / max(1, size - 1)  # denser fog at the top
    alpha = spec.fog_alpha * (0.6 + 0.4 * depth)[:, None, None]
    out = out * (1 - alpha) + spec.fog_color * alpha
    out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)


def generate_dataset(spec: SyntheticSceneSpec, seed: int, root=None) -> Dict[str, list]:
    """Render all splits; writes them under ``root`` when given.

    Returns ``{split: [(uint8 image, [(x0, y0, x1, y1, class_id), ...]), ...]}``.
    """
    spec.validate()
    counts = {"source": spec.n_source, "target": spec.n_target, "target_eval": spec.n_target_eval}
    data: Dict[str, list] = {}
    for split_idx, split in enumerate(SPLITS):
        rng = np.random.default_rng([int(seed), split_idx])
        items = []
        for _ in range(counts[split]):
            img, boxes = render_scene(rng, spec)
            if split != "source":
                img = apply_target_style(img, rng, spec)
            items.append((_to_uint8(img), boxes))
        data[split] = items
    if root is not None:
        write_dataset(data, root)
    return data


def write_dataset(data: Dict[str, list], root) -> None:
    root = Path(root)
    for split, items in data.items():
        img_dir = root / split / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i, (img, boxes) in enumerate(items):
            name = f"{i:06d}.png"
            Image.fromarray(img, mode="RGB").save(img_dir / name, optimize=False)
            records.append({
                "file": f"images/{name}",
                "width": int(img.shape[1]),
                "height": int(img.shape[0]),
                "boxes": [
                    {"x_min": b[0], "y_min": b[1], "x_max": b[2], "y_max": b[3], "class_id": b[4]}
                    for b in boxes
                ],
            })
        with open(root / split / "annotations.json", "w", encoding="utf-8") as fh:
            json.dump(records, fh, indent=1)


def load_split(root, split: str, domain: str = None, with_labels: bool = True) -> List[ImageSample]:
    """Read one split back as ImageSamples (float pixels in [0, 1])."""
    split_dir = Path(root) / split
    ann_path = split_dir / "annotations.json"
    with open(ann_path, encoding="utf-8") as fh:
        records = json.load(fh)
    domain = domain or ("source" if split == "source" else "target")
    samples = []
    for rec in records:
        pixels = np.asarray(Image.open(split_dir / rec["file"]).convert("RGB"), dtype=np.float64) / 255.0
        labels = None
        if with_labels:
            xyxy = [[b["x_min"], b["y_min"], b["x_max"], b["y_max"]] for b in rec["boxes"]]
            cls = [b["class_id"] for b in rec["boxes"]]
            labels = boxes_from_arrays(xyxy, cls, kind="ground_truth")
        samples.append(ImageSample(pixels=pixels, domain=domain, labels=labels, image_id=f"{split}/{rec['file']}"))
    return samples


def spec_to_dict(spec: SyntheticSceneSpec) -> dict:
    return asdict(spec)
