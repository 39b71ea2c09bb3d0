"""Core value types and coordinate-frame bookkeeping.

Coordinates are continuous pixels: pixel ``(i, j)`` covers ``[j, j+1) x [i, i+1)``
and its center sits at ``(j + 0.5, i + 0.5)``.  A :class:`GeoRecord` describes
the fixed chain resize -> horizontal flip -> crop -> translate, which is an
axis-aligned affine map ``x' = ax * x + bx``, ``y' = ay * y + by``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Literal, Optional, Sequence, Tuple

import numpy as np

_frame_counter = itertools.count(1)


def new_frame_id(prefix: str = "frame") -> str:
    return f"{prefix}-{next(_frame_counter)}"


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)


@dataclass(frozen=True)
class LabelSet:
    boxes: Tuple[Box, ...]
    frame_id: str
    kind: Literal["ground_truth", "pseudo"] = "ground_truth"

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.kind not in ("ground_truth", "pseudo"):
            raise ValueError(f"unknown label kind {self.kind!r}")
        if self.kind == "pseudo" and any(b.score >= 1.0 for b in self.boxes):
            raise ValueError("pseudo boxes must carry a score below 1")

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def as_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """(K, 4) float64 coordinates and (K,) int64 class ids."""
        if not self.boxes:
            return np.zeros((0, 4)), np.zeros((0,), dtype=np.int64)
        xyxy = np.stack([b.as_array() for b in self.boxes])
        cls = np.array([b.class_id for b in self.boxes], dtype=np.int64)
        return xyxy, cls

    def scores(self) -> np.ndarray:
        return np.array([b.score for b in self.boxes], dtype=np.float64)


@dataclass(frozen=True)
class GeoRecord:
    """Invertible resize/flip/crop/translate record.

    ``src_size`` is the (height, width) of the frame the record is applied to;
    horizontal flip mirrors about the resized width ``scale * src_width``.
    """

    src_size: Tuple[int, int]
    scale: float = 1.0
    flip_h: bool = False
    crop_origin: Tuple[float, float] = (0.0, 0.0)  # (x, y)
    crop_size: Optional[Tuple[int, int]] = None  # (height, width); None -> scaled source size
    translation: Tuple[float, float] = (0.0, 0.0)  # (x, y)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.crop_size is None:
            h, w = self.src_size
            object.__setattr__(
                self, "crop_size", (int(round(h * self.scale)), int(round(w * self.scale)))
            )
        object.__setattr__(self, "src_size", tuple(int(v) for v in self.src_size))
        object.__setattr__(self, "crop_size", tuple(int(v) for v in self.crop_size))
        object.__setattr__(self, "crop_origin", tuple(float(v) for v in self.crop_origin))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        object.__setattr__(self, "flip_h", bool(self.flip_h))

    @classmethod
    def identity(cls, size: Tuple[int, int]) -> "GeoRecord":
        return cls(src_size=size, crop_size=size)

    @property
    def out_size(self) -> Tuple[int, int]:
        return self.crop_size

    def affine(self) -> Tuple[float, float, float, float]:
        """Return ``(ax, bx, ay, by)`` of the forward point map."""
        s = self.scale
        cx, cy = self.crop_origin
        tx, ty = self.translation
        if self.flip_h:
            ax, bx = -s, s * self.src_size[1] - cx + tx
        else:
            ax, bx = s, -cx + tx
        return ax, bx, s, -cy + ty

    def map_points(self, xs, ys):
        ax, bx, ay, by = self.affine()
        return ax * np.asarray(xs, dtype=np.float64) + bx, ay * np.asarray(ys, dtype=np.float64) + by

    def is_identity(self, tol: float = 1e-9) -> bool:
        ax, bx, ay, by = self.affine()
        return (
            abs(ax - 1) <= tol and abs(ay - 1) <= tol and abs(bx) <= tol and abs(by) <= tol
            and tuple(self.crop_size) == tuple(self.src_size)
        )


def _from_affine(src_size, out_size, ax: float, bx: float, ay: float, by: float) -> GeoRecord:
    """Canonical record (zero crop origin) realising a given axis-aligned map."""
    if ay <= 0:
        raise ValueError("vertical flips are not representable")
    scale = ay
    flip = ax < 0
    tx = bx - (scale * src_size[1] if flip else 0.0)
    return GeoRecord(
        src_size=src_size,
        scale=scale,
        flip_h=flip,
        crop_origin=(0.0, 0.0),
        crop_size=out_size,
        translation=(tx, by),
    )


def compose_geo(first: GeoRecord, second: GeoRecord) -> GeoRecord:
    """Record equivalent to applying ``first`` and then ``second``."""
    a1x, b1x, a1y, b1y = first.affine()
    a2x, b2x, a2y, b2y = second.affine()
    return _from_affine(
        first.src_size,
        second.crop_size,
        a2x * a1x,
        a2x * b1x + b2x,
        a2y * a1y,
        a2y * b1y + b2y,
    )


def invert_geo(rec: GeoRecord) -> GeoRecord:
    """Inverse coordinate map; its source frame is ``rec``'s output frame."""
    ax, bx, ay, by = rec.affine()
    return _from_affine(rec.crop_size, rec.src_size, 1.0 / ax, -bx / ax, 1.0 / ay, -by / ay)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W[, C]) at continuous pixel coordinates, border-clamped.

    Half-pixel convention: pixel ``(i, j)`` is centered at ``(j + .5, i + .5)``.
    """
    h, w = img.shape[:2]
    u = np.clip(xs - 0.5, 0.0, w - 1)
    v = np.clip(ys - 0.5, 0.0, h - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    if img.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
    bottom = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
    return top * (1 - fv) + bottom * fv


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # (H, W, 3) float in [0, 1]
    domain: Literal["source", "target"] = "source"
    labels: Optional[LabelSet] = None
    frame_id: Optional[str] = None
    image_id: str = ""

    def __post_init__(self):
        if self.frame_id is None:
            if self.labels is not None:
                fid = self.labels.frame_id
            else:
                # named after the image so saved pseudo-labels do not depend on process history
                fid = f"image:{self.image_id}" if self.image_id else new_frame_id()
            object.__setattr__(self, "frame_id", fid)
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"expected a non-empty (H, W, 3) image, got {px.shape}")
        if self.domain not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.labels is not None and self.labels.frame_id != self.frame_id:
            raise ValueError("labels and image live in different frames")

    @property
    def size(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def apply_geo(rec: GeoRecord, img: ImageSample) -> ImageSample:
    """Warp an image (and its labels, if any) into the record's output frame."""
    if img.size != rec.src_size:
        raise ValueError(f"record expects a {rec.src_size} frame, image is {img.size}")
    h, w = rec.src_size
    rh, rw = h * rec.scale, w * rec.scale
    cx, cy = rec.crop_origin
    ch, cw = rec.crop_size
    eps = 1e-6
    if cx < -eps or cy < -eps or cx + cw > rw + eps or cy + ch > rh + eps:
        raise ValueError(
            f"crop window ({cx}, {cy}, {cw}x{ch}) outside resized image {rw:.3f}x{rh:.3f}"
        )
    frame = new_frame_id("geo")
    labels = None
    if img.labels is not None:
        labels = replace(transform_labels(rec, img.labels), frame_id=frame)
    if rec.is_identity():
        pixels = img.pixels.copy()
    else:
        inv = invert_geo(rec)
        oy, ox = np.mgrid[0:ch, 0:cw].astype(np.float64) + 0.5
        sx, sy = inv.map_points(ox, oy)
        pixels = np.clip(bilinear_sample(img.pixels, sx, sy), 0.0, 1.0)
    return ImageSample(pixels=pixels, domain=img.domain, labels=labels, frame_id=frame, image_id=img.image_id)


def _map_box_array(rec: GeoRecord, xyxy: np.ndarray) -> np.ndarray:
    ax, bx, ay, by = rec.affine()
    x0 = ax * xyxy[:, 0] + bx
    x1 = ax * xyxy[:, 2] + bx
    out = np.stack(
        [np.minimum(x0, x1), ay * xyxy[:, 1] + by, np.maximum(x0, x1), ay * xyxy[:, 3] + by], axis=1
    )
    return out


def transform_boxes(
    rec: GeoRecord, xyxy: np.ndarray, min_area_px: float = 4.0, clip: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """Map (K, 4) boxes; returns the surviving boxes and their input indices."""
    xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
    out = _map_box_array(rec, xyxy)
    if clip:
        h, w = rec.crop_size
        out[:, 0::2] = np.clip(out[:, 0::2], 0.0, w)
        out[:, 1::2] = np.clip(out[:, 1::2], 0.0, h)
    wh = out[:, 2:] - out[:, :2]
    keep = (wh[:, 0] > 0) & (wh[:, 1] > 0) & (wh[:, 0] * wh[:, 1] >= min_area_px)
    idx = np.nonzero(keep)[0]
    return out[idx], idx


def transform_labels(
    rec: GeoRecord, labels: LabelSet, min_area_px: float = 4.0, frame_id: Optional[str] = None
) -> LabelSet:
    xyxy, _ = labels.as_arrays()
    mapped, idx = transform_boxes(rec, xyxy, min_area_px=min_area_px)
    boxes = [
        Box(*map(float, mapped[n]), class_id=labels.boxes[i].class_id, score=labels.boxes[i].score)
        for n, i in enumerate(idx)
    ]
    return LabelSet(boxes=boxes, frame_id=frame_id or new_frame_id("labels"), kind=labels.kind)


def boxes_from_arrays(
    xyxy: Sequence, classes: Sequence, scores: Optional[Sequence] = None,
    frame_id: str = "", kind: str = "ground_truth",
) -> LabelSet:
    xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
    scores = np.ones(len(xyxy)) if scores is None else np.asarray(scores, dtype=np.float64)
    boxes = [
        Box(*map(float, xyxy[i]), class_id=int(classes[i]), score=float(scores[i]))
        for i in range(len(xyxy))
    ]
    return LabelSet(boxes=boxes, frame_id=frame_id or new_frame_id("labels"), kind=kind)
