"""Detector contract and a two-level anchor-free toy detector.

The pixel head predicts, per pyramid cell, class logits, four nonnegative
distances (left, top, right, bottom, in image pixels) from the cell center to
the box sides, and a centerness logit.  Cell ``(i, j)`` at stride ``s`` is
centered at ``((j + .5) s, (i + .5) s)``.  An optional RoI head pools 7x7
regions from the stride-4 features and predicts (C + 1)-way logits (index 0 is
background) and box deltas.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, roi_align

from .geometry import LabelSet, boxes_from_arrays
from .weightmaps import LEVEL_STRIDES, assign_cells, default_level_rule, grid_centers

PIX_CATEGORIES = ("class", "box", "centerness")
INS_CATEGORIES = ("class", "box")


@dataclass
class DetectorOutputs:
    pix_features: List[torch.Tensor]
    pix_preds: List[Dict[str, torch.Tensor]]
    strides: List[int]
    image_size: Tuple[int, int]
    rho: int = 0
    ins_features: List[torch.Tensor] = field(default_factory=list)
    ins_preds: List[Dict[str, torch.Tensor]] = field(default_factory=list)
    rois: Optional[torch.Tensor] = None  # (R, 5): batch index, x0, y0, x1, y1
    roi_keep: List[np.ndarray] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.pix_features[0].shape[0]

    def detach(self) -> "DetectorOutputs":
        return DetectorOutputs(
            pix_features=[f.detach() for f in self.pix_features],
            pix_preds=[{k: v.detach() for k, v in p.items()} for p in self.pix_preds],
            strides=list(self.strides),
            image_size=self.image_size,
            rho=self.rho,
            ins_features=[f.detach() for f in self.ins_features],
            ins_preds=[{k: v.detach() for k, v in p.items()} for p in self.ins_preds],
            rois=None if self.rois is None else self.rois.detach(),
            roi_keep=list(self.roi_keep),
        )


class DetectorContract(Protocol):
    num_classes: int
    has_instance_head: bool

    def forward(self, images: torch.Tensor, roi_boxes: Optional[Sequence] = None) -> DetectorOutputs:
        ...

    def named_parameters(self):
        ...


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=False))


class ToyDetector(nn.Module):
    strides = list(LEVEL_STRIDES)

    def __init__(self, num_classes: int = 3, width: int = 32, instance_head: bool = True, seed: int = 0, pool_size: int = 7):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.has_instance_head = instance_head
        self.pool_size = pool_size
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.stem = nn.Sequential(_conv(3, width // 2, 2), _conv(width // 2, width, 2), _conv(width, width))
            self.down = nn.Sequential(_conv(width, width, 2), _conv(width, width))
            self.head = _conv(width, width)
            self.cls_out = nn.Conv2d(width, num_classes, 3, 1, 1)
            self.box_out = nn.Conv2d(width, 4, 3, 1, 1)
            self.ctr_out = nn.Conv2d(width, 1, 3, 1, 1)
            nn.init.normal_(self.cls_out.weight, std=0.01)
            nn.init.constant_(self.cls_out.bias, -float(np.log(99.0)))
            if instance_head:
                self.roi_fc = nn.Linear(width * pool_size * pool_size, width)
                self.roi_cls = nn.Linear(width, num_classes + 1)
                self.roi_box = nn.Linear(width, 4)
                nn.init.normal_(self.roi_box.weight, std=0.001)
                nn.init.zeros_(self.roi_box.bias)
        finally:
            torch.random.set_rng_state(gen_state)

    def _pixel_head(self, feat: torch.Tensor, stride: int) -> Dict[str, torch.Tensor]:
        h = self.head(feat)
        return {
            "class": self.cls_out(h),
            "box": F.softplus(self.box_out(h)) * stride,
            "centerness": self.ctr_out(h),
        }

    def forward(self, images: torch.Tensor, roi_boxes: Optional[Sequence] = None) -> DetectorOutputs:
        n, _, h, w = images.shape
        coarse = self.strides[-1]
        ph, pw = (-h) % coarse, (-w) % coarse
        x = F.pad(images, (0, pw, 0, ph)) if (ph or pw) else images
        f0 = self.stem(x)
        f1 = self.down(f0)
        feats = [f0, f1]
        preds = [self._pixel_head(f, s) for f, s in zip(feats, self.strides)]
        out = DetectorOutputs(pix_features=feats, pix_preds=preds, strides=list(self.strides), image_size=(h, w))
        if roi_boxes is not None and self.has_instance_head:
            rois, keep = self._prepare_rois(roi_boxes, (h, w), dtype=images.dtype)
            pooled = roi_align(
                f0, rois, output_size=self.pool_size, spatial_scale=1.0 / self.strides[0],
                sampling_ratio=2, aligned=True,
            )
            ins = F.relu(self.roi_fc(pooled.flatten(1)))
            out.rho = 1
            out.rois = rois
            out.roi_keep = keep
            out.ins_features = [ins]
            out.ins_preds = [{"class": self.roi_cls(ins), "box": self.roi_box(ins)}]
        return out

    @staticmethod
    def _prepare_rois(roi_boxes, size, dtype) -> Tuple[torch.Tensor, List[np.ndarray]]:
        h, w = size
        rows, keep = [], []
        for b, boxes in enumerate(roi_boxes):
            arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
            arr[:, 0::2] = np.clip(arr[:, 0::2], 0.0, w)
            arr[:, 1::2] = np.clip(arr[:, 1::2], 0.0, h)
            ok = np.nonzero((arr[:, 2] > arr[:, 0]) & (arr[:, 3] > arr[:, 1]))[0]
            keep.append(ok)
            if len(ok):
                rows.append(np.concatenate([np.full((len(ok), 1), b, dtype=np.float64), arr[ok]], axis=1))
        table = np.concatenate(rows) if rows else np.zeros((0, 5))
        return torch.as_tensor(table, dtype=dtype), keep


def images_to_tensor(images: Sequence, dtype=torch.float32) -> torch.Tensor:
    """Stack (H, W, 3) arrays or ImageSamples into an (N, 3, H, W) tensor."""
    arrs = [getattr(im, "pixels", im) for im in images]
    return torch.as_tensor(np.stack(arrs).transpose(0, 3, 1, 2).copy(), dtype=dtype)


# ---------------------------------------------------------------------------
# target encoding / decoding

@dataclass
class PixelTargets:
    classes: torch.Tensor  # (N, H, W) int, class_id + 1 or 0
    boxes: torch.Tensor  # (N, 4, H, W) ltrb distances (valid on foreground)
    centerness: torch.Tensor  # (N, 1, H, W)


def _ltrb(cx, cy, xyxy):
    return np.stack([cx - xyxy[..., 0], cy - xyxy[..., 1], xyxy[..., 2] - cx, xyxy[..., 3] - cy])


def encode_level_targets(labels: Sequence, shape: Tuple[int, int], stride: int, level: int, dtype=torch.float32) -> PixelTargets:
    h, w = shape
    n = len(labels)
    cls = np.zeros((n, h, w), dtype=np.int64)
    box = np.zeros((n, 4, h, w))
    ctr = np.zeros((n, 1, h, w))
    cx, cy = grid_centers(shape, stride)
    for i, lab in enumerate(labels):
        xyxy, classes = lab.as_arrays() if hasattr(lab, "as_arrays") else lab
        xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
        if len(xyxy) == 0:
            continue
        owner = assign_cells(xyxy, shape, stride, mask=default_level_rule(xyxy) == level)
        fg = owner >= 0
        if not fg.any():
            continue
        cls[i][fg] = np.asarray(classes)[owner[fg]] + 1
        d = _ltrb(cx[fg], cy[fg], xyxy[owner[fg]])
        box[i][:, fg] = d
        lr = np.minimum(d[0], d[2]) / np.maximum(d[0], d[2])
        tb = np.minimum(d[1], d[3]) / np.maximum(d[1], d[3])
        ctr[i, 0][fg] = np.sqrt(lr * tb)
    return PixelTargets(torch.from_numpy(cls), torch.as_tensor(box, dtype=dtype), torch.as_tensor(ctr, dtype=dtype))


def encode_targets(labels: Sequence, outputs: DetectorOutputs) -> List[PixelTargets]:
    dtype = outputs.pix_features[0].dtype
    return [
        encode_level_targets(labels, tuple(f.shape[-2:]), s, lvl, dtype=dtype)
        for lvl, (f, s) in enumerate(zip(outputs.pix_features, outputs.strides))
    ]


def render_outputs(labels: Sequence, image_size: Tuple[int, int], num_classes: int, strides=LEVEL_STRIDES, logit: float = 12.0) -> DetectorOutputs:
    """Ideal pixel predictions for ``labels`` (used to test loss/decoding consistency)."""
    h, w = image_size
    coarse = strides[-1]
    hp, wp = h + (-h) % coarse, w + (-w) % coarse
    preds, feats = [], []
    for lvl, s in enumerate(strides):
        shape = (hp // s, wp // s)
        t = encode_level_targets(labels, shape, s, lvl, dtype=torch.float64)
        onehot = F.one_hot(t.classes, num_classes + 1)[..., 1:].permute(0, 3, 1, 2).to(torch.float64)
        cls_logit = torch.where(onehot > 0, torch.tensor(logit, dtype=torch.float64), torch.tensor(-logit, dtype=torch.float64))
        ctr = t.centerness.clamp(1e-6, 1 - 1e-6)
        preds.append({"class": cls_logit, "box": t.boxes, "centerness": torch.log(ctr / (1 - ctr))})
        feats.append(torch.zeros(len(labels), 1, *shape, dtype=torch.float64))
    return DetectorOutputs(pix_features=feats, pix_preds=preds, strides=list(strides), image_size=image_size)


@torch.no_grad()
def decode_detections(
    outputs: DetectorOutputs,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_det: int = 100,
    kind: str = "pseudo",
) -> List[LabelSet]:
    """Per-image detections: score = sigmoid(class) * sigmoid(centerness)."""
    h, w = outputs.image_size
    results = []
    for b in range(outputs.batch_size):
        all_boxes, all_scores, all_cls = [], [], []
        for pred, stride in zip(outputs.pix_preds, outputs.strides):
            cls_p = torch.sigmoid(pred["class"][b].double())
            ctr_p = torch.sigmoid(pred["centerness"][b].double())
            scores = cls_p * ctr_p  # (C, H, W)
            c_idx, ys, xs = torch.nonzero(scores > score_thresh, as_tuple=True)
            if len(c_idx) == 0:
                continue
            dist = pred["box"][b].double()[:, ys, xs]
            cx = (xs.double() + 0.5) * stride
            cy = (ys.double() + 0.5) * stride
            boxes = torch.stack([cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]], dim=1)
            all_boxes.append(boxes)
            all_scores.append(scores[c_idx, ys, xs])
            all_cls.append(c_idx)
        if not all_boxes:
            results.append(LabelSet(boxes=(), frame_id=f"det-{b}", kind=kind))
            continue
        boxes = torch.cat(all_boxes)
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, w)
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, h)
        scores = torch.cat(all_scores)
        classes = torch.cat(all_cls)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores, classes = boxes[valid], scores[valid], classes[valid]
        keep = batched_nms(boxes, scores, classes, nms_iou)[:max_det]
        sc = scores[keep].numpy()
        if kind == "pseudo":
            sc = np.minimum(sc, np.nextafter(1.0, 0.0))
        results.append(
            boxes_from_arrays(boxes[keep].numpy(), classes[keep].numpy(), sc, frame_id=f"det-{b}", kind=kind)
        )
    return results


# ---------------------------------------------------------------------------
# RoI helpers

def box_iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def box_deltas(rois: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pw, ph = rois[:, 2] - rois[:, 0], rois[:, 3] - rois[:, 1]
    px, py = rois[:, 0] + pw / 2, rois[:, 1] + ph / 2
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + gw / 2, gt[:, 1] + gh / 2
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)


def sample_training_rois(
    xyxy: np.ndarray, image_size: Tuple[int, int], rng: np.random.Generator, n_background: int = 4,
    jitter: float = 0.1, hard_jitter: float = 0.4, n_hard: int = 2,
) -> np.ndarray:
    """Ground-truth boxes, a lightly jittered copy and ``n_hard`` strongly jittered copies of each, plus random background boxes.

    Strong jitter mostly falls below the foreground IoU and teaches the
    instance classifier to reject partial boxes.
    """
    h, w = image_size
    xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
    wh = np.concatenate([xyxy[:, 2:] - xyxy[:, :2]] * 2, axis=1)
    jittered = xyxy + rng.uniform(-jitter, jitter, size=xyxy.shape) * wh
    shifted = [xyxy + rng.uniform(-hard_jitter, hard_jitter, size=xyxy.shape) * wh for _ in range(n_hard)]
    side = rng.uniform(8.0, min(h, w) / 2.0, size=(n_background, 2))
    origin = rng.uniform(0.0, 1.0, size=(n_background, 2)) * (np.array([w, h]) - side)
    bg = np.concatenate([origin, origin + side], axis=1)
    return np.concatenate([xyxy, jittered, *shifted, bg])


def roi_targets(outputs: DetectorOutputs, labels: Sequence, fg_iou: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """``(class_id + 1 or 0, deltas)`` for every pooled roi of ``outputs``."""
    rois = outputs.rois.detach().cpu().numpy()
    classes = np.zeros(len(rois), dtype=np.int64)
    deltas = np.zeros((len(rois), 4))
    for b, lab in enumerate(labels):
        rows = np.nonzero(rois[:, 0] == b)[0]
        xyxy, cls = lab.as_arrays() if hasattr(lab, "as_arrays") else lab
        xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
        if len(rows) == 0 or len(xyxy) == 0:
            continue
        iou = box_iou_np(rois[rows, 1:], xyxy)
        best = iou.argmax(axis=1)
        fg = iou[np.arange(len(rows)), best] >= fg_iou
        classes[rows[fg]] = np.asarray(cls)[best[fg]] + 1
        deltas[rows[fg]] = box_deltas(rois[rows[fg], 1:], xyxy[best[fg]])
    return classes, deltas
