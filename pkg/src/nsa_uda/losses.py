"""Detection loss and the teacher-student consistency objectives."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import sigmoid_focal_loss

from .detector import (
    INS_CATEGORIES,
    PIX_CATEGORIES,
    DetectorOutputs,
    box_iou_np,
    encode_targets,
    images_to_tensor,
    roi_targets,
    sample_training_rois,
)
from .disturbance import DisturbanceConfig, make_hid, make_insd, make_lid
from .geometry import GeoRecord, invert_geo, transform_boxes
from .graph import GraphConfig, build_graph, extract_nodes, insd_loss
from .weightmaps import build_weight_bundle

COMPONENTS = (
    "det_cls", "det_reg", "eca_hid", "eca_lid_pix", "eca_lid_ins",
    "ica_lid_pix", "ica_lid_ins", "ica_insd",
)


class ContractError(ValueError):
    """Inputs violate a shape or frame contract."""


@dataclass
class LossConfig:
    gamma_hid: float = 1.0
    gamma_lid: float = 0.006
    gamma_insd: float = 0.001
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    background_rois: int = 4


@dataclass
class WeightConfig:
    eta1: float = 1.3
    eta2: float = 1.6
    r: int = 3
    psi_window: int = 3


@dataclass
class LossReport:
    total: float
    components: Dict[str, float]
    counts: Dict[str, float] = field(default_factory=dict)
    gammas: Dict[str, float] = field(default_factory=dict)
    total_tensor: Optional[torch.Tensor] = None
    graphs: list = field(default_factory=list, repr=False)

    def reassembled(self) -> float:
        c = self.components
        g = self.gammas
        return (
            c["det_cls"] + c["det_reg"]
            + g.get("hid", 0.0) * c["eca_hid"]
            + g.get("lid", 0.0) * (c["eca_lid_pix"] + c["eca_lid_ins"] + c["ica_lid_pix"] + c["ica_lid_ins"])
            + g.get("insd", 0.0) * c["ica_insd"]
        )

    def to_json_line(self, iteration: int, stage: str) -> str:
        row = {"iteration": iteration, "stage": stage, "total": self.total}
        row.update(self.components)
        row["counts"] = self.counts
        return json.dumps(row, sort_keys=True)


# ---------------------------------------------------------------------------
# detection loss

def _iou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - IoU for (K, 4) ltrb distances sharing an anchor point."""
    pa = (pred[:, 0] + pred[:, 2]) * (pred[:, 1] + pred[:, 3])
    ta = (target[:, 0] + target[:, 2]) * (target[:, 1] + target[:, 3])
    iw = torch.minimum(pred[:, 0], target[:, 0]) + torch.minimum(pred[:, 2], target[:, 2])
    ih = torch.minimum(pred[:, 1], target[:, 1]) + torch.minimum(pred[:, 3], target[:, 3])
    inter = iw * ih
    return 1.0 - inter / (pa + ta - inter).clamp_min(1e-12)


def _ignore_mask(ignore: Optional[Sequence], shape, stride: int, n: int) -> Optional[np.ndarray]:
    """(N, 1, H, W) 1.0 where a cell center lies inside an ignore box, else 0.0."""
    if ignore is None or not any(b is not None and len(np.asarray(b).reshape(-1, 4)) for b in ignore):
        return None
    h, w = shape
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    out = np.zeros((n, 1, h, w))
    for i, boxes in enumerate(ignore):
        if boxes is None:
            continue
        for x0, y0, x1, y1 in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
            inside = ((cy >= y0) & (cy <= y1))[:, None] & ((cx >= x0) & (cx <= x1))[None, :]
            out[i, 0][inside] = 1.0
    return out


def det_loss(
    outputs: DetectorOutputs, targets: Sequence, cfg: Optional[LossConfig] = None, ignore: Optional[Sequence] = None
) -> Dict[str, torch.Tensor]:
    """Classification and box-regression loss of one detector output batch.

    ``targets[n]`` is a LabelSet (or ``(xyxy, classes)``) in image ``n``'s frame.
    ``ignore[n]`` optionally lists boxes whose non-foreground cells (and
    overlapping background rois) are left out of the classification loss.
    Returns ``{"cls", "reg", "num_fg"}``.
    """
    cfg = cfg or LossConfig()
    if len(targets) != outputs.batch_size:
        raise ContractError(f"{len(targets)} label sets for a batch of {outputs.batch_size}")
    level_targets = encode_targets(targets, outputs)
    num_fg = sum(int((t.classes > 0).sum()) for t in level_targets)
    norm = max(num_fg, 1)
    cls_sum = outputs.pix_features[0].new_zeros(())
    reg_sum = outputs.pix_features[0].new_zeros(())
    ctr_sum = outputs.pix_features[0].new_zeros(())
    for pred, tgt, stride in zip(outputs.pix_preds, level_targets, outputs.strides):
        logits = pred["class"]
        c = logits.shape[1]
        onehot = F.one_hot(tgt.classes, c + 1)[..., 1:].permute(0, 3, 1, 2).to(logits.dtype)
        fg = tgt.classes > 0
        ign = _ignore_mask(ignore, logits.shape[-2:], stride, logits.shape[0])
        if ign is None:
            cls_sum = cls_sum + sigmoid_focal_loss(logits, onehot, alpha=cfg.focal_alpha, gamma=cfg.focal_gamma, reduction="sum")
        else:
            keep = 1.0 - torch.as_tensor(ign, dtype=logits.dtype) * (~fg).unsqueeze(1).to(logits.dtype)
            focal = sigmoid_focal_loss(logits, onehot, alpha=cfg.focal_alpha, gamma=cfg.focal_gamma, reduction="none")
            cls_sum = cls_sum + (focal * keep).sum()
        if fg.any():
            b, y, x = torch.nonzero(fg, as_tuple=True)
            p_box = pred["box"][b, :, y, x]
            t_box = tgt.boxes[b, :, y, x]
            reg_sum = reg_sum + _iou_loss(p_box, t_box).sum()
            ctr_sum = ctr_sum + F.binary_cross_entropy_with_logits(
                pred["centerness"][b, 0, y, x], tgt.centerness[b, 0, y, x], reduction="sum"
            )
    cls = (cls_sum + ctr_sum) / norm
    reg = reg_sum / norm
    out = {"cls": cls, "reg": reg, "num_fg": num_fg}
    if outputs.rho and outputs.rois is not None and len(outputs.rois):
        classes, deltas = roi_targets(outputs, targets)
        ins = outputs.ins_preds[0]
        cls_t = torch.as_tensor(classes)
        ce = F.cross_entropy(ins["class"], cls_t, reduction="none")
        weight = np.ones(len(classes))
        if ignore is not None:
            rois = outputs.rois.detach().cpu().numpy()
            for b, boxes in enumerate(ignore):
                boxes = np.asarray(boxes if boxes is not None else [], dtype=np.float64).reshape(-1, 4)
                rows = np.nonzero((rois[:, 0] == b) & (classes == 0))[0]
                if len(boxes) and len(rows):
                    weight[rows[box_iou_np(rois[rows, 1:], boxes).max(axis=1) >= 0.5]] = 0.0
        w_t = torch.as_tensor(weight, dtype=ce.dtype)
        out["cls"] = out["cls"] + (ce * w_t).sum() / w_t.sum().clamp_min(1.0)
        fg_rois = np.nonzero(classes > 0)[0]
        if len(fg_rois):
            d_t = torch.as_tensor(deltas[fg_rois], dtype=ins["box"].dtype)
            out["reg"] = out["reg"] + F.smooth_l1_loss(ins["box"][fg_rois], d_t, beta=1.0 / 9.0, reduction="sum") / len(fg_rois)
        out["num_fg_rois"] = int(len(fg_rois))
    return out


def eca_hid(student_out_on_xhid: DetectorOutputs, labels_in_hid_frame: Sequence, cfg: Optional[LossConfig] = None) -> torch.Tensor:
    """Detection loss of the student on the heavily disturbed view."""
    d = det_loss(student_out_on_xhid, labels_in_hid_frame, cfg)
    return d["cls"] + d["reg"]


# ---------------------------------------------------------------------------
# registration of teacher maps into the student's frame

def _bilinear_grid(maps: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample (C, H, W) at fractional cell indices (border clamped)."""
    _, h, w = maps.shape
    u = u.clamp(0, w - 1)
    v = v.clamp(0, h - 1)
    u0 = u.floor().long()
    v0 = v.floor().long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)
    fu = (u - u0.to(u.dtype)).to(maps.dtype)
    fv = (v - v0.to(v.dtype)).to(maps.dtype)
    top = maps[:, v0, u0] * (1 - fu) + maps[:, v0, u1] * fu
    bot = maps[:, v1, u0] * (1 - fu) + maps[:, v1, u1] * fu
    return top * (1 - fv) + bot * fv


def warp_level(maps: torch.Tensor, geo: GeoRecord, stride: int, out_shape) -> torch.Tensor:
    """Resample one image's (C, H, W) level map from the source frame into ``geo``'s output frame."""
    ho, wo = out_shape
    inv = invert_geo(geo)
    ys = (np.arange(ho, dtype=np.float64) + 0.5) * stride
    xs = (np.arange(wo, dtype=np.float64) + 0.5) * stride
    gx, gy = np.meshgrid(xs, ys)
    sx, sy = inv.map_points(gx, gy)
    u = torch.from_numpy(sx / stride - 0.5)
    v = torch.from_numpy(sy / stride - 0.5)
    return _bilinear_grid(maps, u, v)


@torch.no_grad()
def align_maps(teacher_out: DetectorOutputs, geos: Sequence[GeoRecord], out_size=None) -> DetectorOutputs:
    """Warp teacher pixel maps into each student view's frame.

    Box distances scale with the record and swap left/right under flip; the
    instance-head box deltas negate their x offset under flip.
    """
    if len(geos) != teacher_out.batch_size:
        raise ContractError("one GeoRecord per image is required")
    out_size = tuple(out_size or geos[0].crop_size)
    coarse = teacher_out.strides[-1]
    padded = (out_size[0] + (-out_size[0]) % coarse, out_size[1] + (-out_size[1]) % coarse)
    feats, preds = [], []
    for lvl, stride in enumerate(teacher_out.strides):
        shape = (padded[0] // stride, padded[1] // stride)
        lvl_feats, lvl_preds = [], {k: [] for k in teacher_out.pix_preds[lvl]}
        names = list(teacher_out.pix_preds[lvl])
        for b, geo in enumerate(geos):
            parts = [teacher_out.pix_features[lvl][b]] + [teacher_out.pix_preds[lvl][k][b] for k in names]
            identity = geo.is_identity() and tuple(parts[0].shape[-2:]) == shape
            if not identity:
                # one sampling grid for features and every prediction map
                sizes = [p.shape[0] for p in parts]
                parts = list(torch.split(warp_level(torch.cat(parts), geo, stride, shape), sizes))
            lvl_feats.append(parts[0])
            for k, w in zip(names, parts[1:]):
                if k == "box" and not identity:
                    w = w * geo.scale
                    if geo.flip_h:
                        w = w[[2, 1, 0, 3]]
                lvl_preds[k].append(w)
        feats.append(torch.stack(lvl_feats))
        preds.append({k: torch.stack(v) for k, v in lvl_preds.items()})
    ins_preds = []
    for p in teacher_out.ins_preds:
        box = p["box"].clone()
        if teacher_out.rois is not None and len(box):
            flips = torch.tensor([geos[int(b)].flip_h for b in teacher_out.rois[:, 0]], dtype=torch.bool)
            box[flips, 0] = -box[flips, 0]
        ins_preds.append({"class": p["class"], "box": box})
    return DetectorOutputs(
        pix_features=feats,
        pix_preds=preds,
        strides=list(teacher_out.strides),
        image_size=out_size,
        rho=teacher_out.rho,
        ins_features=list(teacher_out.ins_features),
        ins_preds=ins_preds,
        rois=teacher_out.rois,
        roi_keep=list(teacher_out.roi_keep),
    )


# ---------------------------------------------------------------------------
# consistency terms

def masked_norm_ratio(diff: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """||mask * diff||_2 / ||mask||_1, zero when the mask is empty.

    ``mask`` broadcasts against ``diff`` after inserting a channel axis at 1.
    """
    denom = mask.abs().sum()
    if float(denom.detach()) == 0.0:
        return diff.sum() * 0.0
    m = mask.unsqueeze(1).to(diff.dtype)
    sq = ((m * diff) ** 2).sum()
    if float(sq.detach()) == 0.0:
        return sq * 0.0
    return torch.sqrt(sq) / denom


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ContractError(f"{what}: teacher {tuple(a.shape)} vs student {tuple(b.shape)}")


def eca_lid(teacher_aligned: DetectorOutputs, student_out: DetectorOutputs, a_pix: Sequence[torch.Tensor], a_ins: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    """Masked prediction consistency: ``{"pix", "ins"}``."""
    pix = student_out.pix_features[0].new_zeros(())
    for lvl, (t_pred, s_pred) in enumerate(zip(teacher_aligned.pix_preds, student_out.pix_preds)):
        for cat in PIX_CATEGORIES:
            if cat not in s_pred:
                continue
            _check_shapes(t_pred[cat], s_pred[cat], f"level {lvl} {cat}")
            if a_pix[lvl].shape != s_pred[cat].shape[:1] + s_pred[cat].shape[2:]:
                raise ContractError(f"mask shape {tuple(a_pix[lvl].shape)} does not match level {lvl}")
            pix = pix + masked_norm_ratio(t_pred[cat].detach() - s_pred[cat], a_pix[lvl])
    ins = pix.new_zeros(())
    if student_out.rho and a_ins is not None and len(a_ins):
        for t_pred, s_pred in zip(teacher_aligned.ins_preds, student_out.ins_preds):
            for cat in INS_CATEGORIES:
                _check_shapes(t_pred[cat], s_pred[cat], f"instance {cat}")
                ins = ins + masked_norm_ratio(t_pred[cat].detach() - s_pred[cat], a_ins)
    return {"pix": pix, "ins": ins}


def ica_lid(
    teacher_feats: Sequence[torch.Tensor],
    student_feats: Sequence[torch.Tensor],
    b_pix: Sequence[torch.Tensor],
    teacher_ins: Sequence[torch.Tensor] = (),
    student_ins: Sequence[torch.Tensor] = (),
    b_ins: Optional[torch.Tensor] = None,
    rho: int = 0,
) -> Dict[str, torch.Tensor]:
    """Masked feature consistency: ``{"pix", "ins"}``."""
    pix = student_feats[0].new_zeros(())
    for lvl, (t, s) in enumerate(zip(teacher_feats, student_feats)):
        _check_shapes(t, s, f"feature level {lvl}")
        pix = pix + masked_norm_ratio(t.detach() - s, b_pix[lvl])
    ins = pix.new_zeros(())
    if rho and b_ins is not None and len(b_ins):
        for t, s in zip(teacher_ins, student_ins):
            _check_shapes(t, s, "instance features")
            ins = ins + masked_norm_ratio(t.detach() - s, b_ins)
    return {"pix": pix, "ins": ins}


# ---------------------------------------------------------------------------
# combined objective

@dataclass
class BatchItem:
    """One training image with its (ground-truth or pseudo) labels in its own frame."""

    sample: object  # ImageSample
    xyxy: np.ndarray
    classes: np.ndarray
    ignore: Optional[np.ndarray] = None  # (K, 4) regions excluded from background supervision


def _label_pair(xyxy, classes):
    return (np.asarray(xyxy, dtype=np.float64).reshape(-1, 4), np.asarray(classes, dtype=np.int64))


def total_objective(
    batch: Sequence[BatchItem],
    teacher,
    student,
    dist_cfg: DisturbanceConfig,
    loss_cfg: LossConfig,
    weight_cfg: WeightConfig,
    graph_cfg: GraphConfig,
    rngs: Sequence[np.random.Generator],
    det_on_clean: bool = False,
    keep_graphs: bool = False,
) -> LossReport:
    """Full teacher-student objective for one batch.

    The student's supervised path runs on the heavy view (``eca_hid``); with
    ``det_on_clean`` an extra detection loss on the undisturbed images is added.
    Each item gets its own generator from ``rngs``.
    """
    dtype = next(student.parameters()).dtype
    use_rois = bool(getattr(student, "has_instance_head", False))
    counts: Dict[str, float] = {}
    zero = torch.zeros((), dtype=dtype)
    comp = {k: zero for k in COMPONENTS}

    hid_views, lid_views, insd_views = [], [], []
    for item, rng in zip(batch, rngs):
        hv = make_hid(item.sample, dist_cfg, rng)
        lv = make_lid(item.sample, dist_cfg, rng)
        iv = make_insd(item.sample, dist_cfg, rng, lid_view=lv, hid_view=hv)
        hid_views.append(hv)
        lid_views.append(lv)
        insd_views.append(iv)

    if det_on_clean:
        labels = [_label_pair(it.xyxy, it.classes) for it in batch]
        images = images_to_tensor([it.sample for it in batch], dtype)
        rois = [sample_training_rois(lab[0], images.shape[-2:], rng, loss_cfg.background_rois) for lab, rng in zip(labels, rngs)] if use_rois else None
        d = det_loss(student(images, rois), labels, loss_cfg, ignore=[it.ignore for it in batch])
        comp["det_cls"], comp["det_reg"] = d["cls"], d["reg"]

    if loss_cfg.gamma_hid:
        hid_labels, hid_ignore = [], []
        for item, hv in zip(batch, hid_views):
            boxes, idx = transform_boxes(hv.geo, item.xyxy)
            hid_labels.append(_label_pair(boxes, item.classes[idx]))
            if item.ignore is not None and len(item.ignore):
                hid_ignore.append(transform_boxes(hv.geo, np.asarray(item.ignore, dtype=np.float64).reshape(-1, 4), min_area_px=1.0)[0])
            else:
                hid_ignore.append(np.zeros((0, 4)))
        images = images_to_tensor([v.image for v in hid_views], dtype)
        rois = [sample_training_rois(lab[0], images.shape[-2:], rng, loss_cfg.background_rois) for lab, rng in zip(hid_labels, rngs)] if use_rois else None
        d = det_loss(student(images, rois), hid_labels, loss_cfg, ignore=hid_ignore)
        comp["eca_hid"] = d["cls"] + d["reg"]
        counts["hid_fg"] = d["num_fg"]

    graphs = []
    if loss_cfg.gamma_lid or loss_cfg.gamma_insd:
        # Rois survive only where they survive in every view so indices stay aligned.
        orig_boxes, lid_boxes, lid_labels, roi_classes = [], [], [], []
        for item, lv in zip(batch, lid_views):
            boxes, idx = transform_boxes(lv.geo, item.xyxy, min_area_px=1.0)
            lid_labels.append(_label_pair(boxes, item.classes[idx]))
            orig_boxes.append(item.xyxy[idx])
            lid_boxes.append(boxes)
            roi_classes.append(item.classes[idx] + 1)
        x = images_to_tensor([it.sample for it in batch], dtype)
        with torch.no_grad():
            t_out = teacher(x, orig_boxes if use_rois else None)
        s_out = student(images_to_tensor([v.image for v in lid_views], dtype), lid_boxes if use_rois else None)
        aligned = align_maps(t_out, [v.geo for v in lid_views])
        roi_cls = np.concatenate(roi_classes) if use_rois else None
        bundle = build_weight_bundle(
            aligned.pix_features, lid_labels, strides=s_out.strides, eta1=weight_cfg.eta1,
            eta2=weight_cfg.eta2, r=weight_cfg.r, psi_window=weight_cfg.psi_window, roi_classes=roi_cls,
        )
        counts["a_pix"] = float(sum(float(a.sum()) for a in bundle.a_pix))
        counts["b_pix"] = float(sum(float(b.sum()) for b in bundle.b_pix))
        if loss_cfg.gamma_lid:
            e = eca_lid(aligned, s_out, bundle.a_pix, bundle.a_ins)
            i = ica_lid(aligned.pix_features, s_out.pix_features, bundle.b_pix,
                        aligned.ins_features, s_out.ins_features, bundle.b_ins, rho=s_out.rho)
            comp["eca_lid_pix"], comp["eca_lid_ins"] = e["pix"], e["ins"]
            comp["ica_lid_pix"], comp["ica_lid_ins"] = i["pix"], i["ins"]
        if loss_cfg.gamma_insd:
            if dist_cfg.insd_view == "share_lid":
                g_aligned, g_student, g_labels, g_bundle = aligned, s_out, lid_labels, bundle
            else:
                g_boxes, g_labels = [], []
                for item, iv in zip(batch, insd_views):
                    boxes, idx = transform_boxes(iv.geo, item.xyxy, min_area_px=1.0)
                    g_labels.append(_label_pair(boxes, item.classes[idx]))
                g_student = student(images_to_tensor([v.image for v in insd_views], dtype))
                g_aligned = align_maps(t_out, [v.geo for v in insd_views])
                g_bundle = build_weight_bundle(
                    g_aligned.pix_features, g_labels, strides=g_student.strides, eta1=weight_cfg.eta1,
                    eta2=weight_cfg.eta2, r=weight_cfg.r, psi_window=weight_cfg.psi_window,
                )
                roi_cls = None
            layers = extract_nodes(g_aligned, g_student, g_labels, g_bundle, graph_cfg, roi_classes=roi_cls)
            graphs = [build_graph(nodes, graph_cfg.n_b) for nodes in layers]
            comp["ica_insd"] = insd_loss(graphs).to(dtype)
            counts["graph_nodes"] = float(sum(len(g.nodes) for g in graphs))
            counts["graph_fg"] = float(sum(float(g.w_insd.sum()) for g in graphs))

    total = (
        comp["det_cls"] + comp["det_reg"]
        + loss_cfg.gamma_hid * comp["eca_hid"]
        + loss_cfg.gamma_lid * (comp["eca_lid_pix"] + comp["eca_lid_ins"] + comp["ica_lid_pix"] + comp["ica_lid_ins"])
        + loss_cfg.gamma_insd * comp["ica_insd"]
    )
    values = {k: float(v.detach()) for k, v in comp.items()}
    for k, v in values.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss component {k}={v}")
    return LossReport(
        total=float(total.detach()),
        components=values,
        counts=counts,
        gammas={"hid": loss_cfg.gamma_hid, "lid": loss_cfg.gamma_lid, "insd": loss_cfg.gamma_insd},
        total_tensor=total,
        graphs=graphs if keep_graphs else [],
    )
