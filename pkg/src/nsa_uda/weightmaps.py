"""Foreground masks, texture smoothness and sampled consistency weights.

All map operations accept ``(H, W)``, ``(C, H, W)`` or batched ``(N, C, H, W)``
torch tensors where noted; weights never carry gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

LEVEL_STRIDES = (4, 8)
LEVEL_SIZE_LIMITS = ((0.0, 32.0), (32.0, float("inf")))


def grid_centers(shape: Tuple[int, int], stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Image-frame (x, y) of feature cell centers, each ``(H, W)``."""
    h, w = shape
    ys = (np.arange(h, dtype=np.float64) + 0.5) * stride
    xs = (np.arange(w, dtype=np.float64) + 0.5) * stride
    return np.meshgrid(xs, ys)


def default_level_rule(xyxy: np.ndarray) -> np.ndarray:
    """Pyramid level per box from its longer side (level 0 below 32 px)."""
    xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
    longer = np.maximum(xyxy[:, 2] - xyxy[:, 0], xyxy[:, 3] - xyxy[:, 1])
    levels = np.zeros(len(xyxy), dtype=np.int64)
    for lvl, (lo, hi) in enumerate(LEVEL_SIZE_LIMITS):
        levels[(longer >= lo) & (longer < hi)] = lvl
    return levels


def assign_cells(
    xyxy: np.ndarray, layer_shape: Tuple[int, int], stride: int, mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Index of the smallest-area box (among ``mask``) covering each cell center, else -1."""
    xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
    cx, cy = grid_centers(layer_shape, stride)
    owner = np.full(layer_shape, -1, dtype=np.int64)
    if len(xyxy) == 0:
        return owner
    best_area = np.full(layer_shape, np.inf)
    areas = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])
    for k in np.argsort(areas, kind="stable"):
        if mask is not None and not mask[k]:
            continue
        x0, y0, x1, y1 = xyxy[k]
        inside = (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1) & (areas[k] < best_area)
        owner[inside] = k
        best_area[inside] = areas[k]
    return owner


def build_class_matrix(labels, layer_shape, stride: int, level: Optional[int] = None, level_rule=default_level_rule) -> np.ndarray:
    """Per-cell ``class_id + 1`` of the smallest covering box on this level, else 0.

    ``labels`` is a LabelSet or an ``(xyxy, classes)`` pair.  With ``level=None``
    every box is eligible.
    """
    xyxy, classes = labels.as_arrays() if hasattr(labels, "as_arrays") else labels
    xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64)
    mask = None if level is None else level_rule(xyxy) == level
    owner = assign_cells(xyxy, layer_shape, stride, mask)
    out = np.zeros(layer_shape, dtype=np.int64)
    hit = owner >= 0
    out[hit] = classes[owner[hit]] + 1
    return out


def foreground_mask(m):
    if isinstance(m, torch.Tensor):
        return (m > 0).to(torch.get_default_dtype())
    return (np.asarray(m) > 0).astype(np.float64)


def instance_weights(m_ins):
    """Returns ``(A_ins, B_ins)``: both the foreground indicator of ``m_ins``."""
    a = foreground_mask(m_ins)
    return a, a.clone() if isinstance(a, torch.Tensor) else a.copy()


def _as_nchw(x: torch.Tensor) -> Tuple[torch.Tensor, int]:
    nd = x.dim()
    if nd == 2:
        return x[None, None], nd
    if nd == 3:
        return x[None], nd
    if nd == 4:
        return x, nd
    raise ValueError(f"expected 2-4 dims, got shape {tuple(x.shape)}")


def _restore(x: torch.Tensor, nd: int) -> torch.Tensor:
    if nd == 2:
        return x[0, 0]
    if nd == 3:
        return x[0]
    return x


def _reflect_pad(x: torch.Tensor, p: int) -> torch.Tensor:
    if p == 0:
        return x
    h, w = x.shape[-2:]
    mode = "reflect" if p < h and p < w else "replicate"
    return F.pad(x, (p, p, p, p), mode=mode)


@torch.no_grad()
def smoothness(feat: torch.Tensor, r: int = 3, normalize: bool = True) -> torch.Tensor:
    """L1 distance (over channels) between each cell and its r x r window mean.

    ``feat`` is ``(C, H, W)`` or ``(N, C, H, W)``; returns ``(H, W)`` / ``(N, H, W)``
    min-max normalised per sample (all-zero where a map is constant).
    """
    if r < 1 or r % 2 == 0:
        raise ValueError("window must be odd and positive")
    x, nd = _as_nchw(feat.detach())
    if nd == 2:
        raise ValueError("smoothness needs a channel axis")
    mean = F.avg_pool2d(_reflect_pad(x, r // 2), kernel_size=r, stride=1)
    s = (x - mean).abs().sum(dim=1)
    if normalize:
        flat = s.flatten(1)
        lo = flat.min(dim=1).values[:, None, None]
        hi = flat.max(dim=1).values[:, None, None]
        span = hi - lo
        s = torch.where(span > 0, (s - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(s))
    return s[0] if nd == 3 else s


@torch.no_grad()
def texture_weights(s: torch.Tensor, eta1: float = 1.3, eta2: float = 1.6) -> torch.Tensor:
    """Three-level texture weights relative to the mean smoothness of each map."""
    if not eta1 < eta2:
        raise ValueError("eta1 must be below eta2")
    batched = s.dim() == 3
    x = s if batched else s[None]
    mean = x.flatten(1).mean(dim=1)[:, None, None]
    w = torch.zeros_like(x)
    w = torch.where(x > eta1 * mean, torch.full_like(x, 0.1), w)
    w = torch.where(x > eta2 * mean, torch.ones_like(x), w)
    return w if batched else w[0]


@torch.no_grad()
def sample_centers_psi(w_masked: torch.Tensor, s: torch.Tensor, psi_window: int = 3) -> torch.Tensor:
    """Keep ``w_masked`` at cells whose smoothness equals its window maximum."""
    if psi_window < 1 or psi_window % 2 == 0:
        raise ValueError("psi window must be odd and positive")
    x, nd = _as_nchw(s)
    peak = F.max_pool2d(_reflect_pad(x, psi_window // 2), kernel_size=psi_window, stride=1)
    is_max = _restore(x >= peak, nd)
    return torch.where(is_max, w_masked, torch.zeros_like(w_masked))


@dataclass
class WeightBundle:
    """Per-level maps (each ``(N, H, W)``) plus per-roi instance weights."""

    m_pix: List[torch.Tensor] = field(default_factory=list)
    a_pix: List[torch.Tensor] = field(default_factory=list)
    s: List[torch.Tensor] = field(default_factory=list)
    w_t: List[torch.Tensor] = field(default_factory=list)
    b_pix: List[torch.Tensor] = field(default_factory=list)
    covered: List[torch.Tensor] = field(default_factory=list)
    m_ins: Optional[torch.Tensor] = None
    a_ins: Optional[torch.Tensor] = None
    b_ins: Optional[torch.Tensor] = None


@torch.no_grad()
def build_weight_bundle(
    teacher_feats: Sequence[torch.Tensor],
    labels: Sequence,
    strides: Sequence[int] = LEVEL_STRIDES,
    eta1: float = 1.3,
    eta2: float = 1.6,
    r: int = 3,
    psi_window: int = 3,
    roi_classes: Optional[np.ndarray] = None,
) -> WeightBundle:
    """Assemble every mask for one batch.

    ``teacher_feats[l]`` is ``(N, C, H, W)`` already in the labels' frame;
    ``labels[n]`` is a LabelSet or ``(xyxy, classes)`` for image ``n``.
    ``roi_classes`` holds ``class_id + 1`` (0 = background) per pooled roi.
    """
    bundle = WeightBundle()
    for lvl, (feat, stride) in enumerate(zip(teacher_feats, strides)):
        shape = tuple(feat.shape[-2:])
        m = np.stack([build_class_matrix(lab, shape, stride, level=lvl) for lab in labels])
        cov = np.stack([build_class_matrix(lab, shape, stride, level=None) > 0 for lab in labels])
        dtype = feat.dtype
        m_t = torch.from_numpy(m)
        a = (m_t > 0).to(dtype)
        s = smoothness(feat, r=r)
        w_t = texture_weights(s, eta1, eta2)
        b = sample_centers_psi(w_t * a, s, psi_window)
        # Centers are only drawn from the highest texture class.
        b = torch.where(w_t >= 1.0, b, torch.zeros_like(b))
        bundle.m_pix.append(m_t)
        bundle.a_pix.append(a)
        bundle.s.append(s)
        bundle.w_t.append(w_t)
        bundle.b_pix.append(b)
        bundle.covered.append(torch.from_numpy(cov))
    if roi_classes is not None:
        m_ins = torch.as_tensor(np.asarray(roi_classes, dtype=np.int64))
        a_ins, b_ins = instance_weights(m_ins)
        bundle.m_ins, bundle.a_ins, bundle.b_ins = m_ins, a_ins, b_ins
    return bundle


def export_heatmap(values, path) -> Path:
    """Write a 2-D map in [0, 1] as an 8-bit grayscale PNG (values x 255)."""
    from PIL import Image

    arr = values.detach().cpu().numpy() if isinstance(values, torch.Tensor) else np.asarray(values)
    arr = np.clip(arr.astype(np.float64), 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)
    return path
