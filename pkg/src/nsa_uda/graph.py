"""Batch-level instance graph and its contrastive loss.

Nodes pair a student feature with the teacher feature at the same place;
edges and distances are cosine-based, class centers and background samples
come from the teacher side only and never carry gradient.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .weightmaps import assign_cells, default_level_rule


@dataclass
class GraphConfig:
    n_b: int = 16
    window: int = 3
    area_min_factor: float = 2.0
    area_max_factor: float = 16.0

    def area_gate(self, stride: int):
        return (self.area_min_factor * stride) ** 2, (self.area_max_factor * stride) ** 2


@dataclass
class GraphNodes:
    """Struct-of-arrays view of graph nodes (class 0 = background candidate)."""

    feature_student: torch.Tensor  # (N_g, C)
    feature_teacher: torch.Tensor  # (N_g, C)
    class_id: torch.Tensor  # (N_g,) int64
    source: List[str] = field(default_factory=list)
    layer: int = 0
    area_px: Optional[torch.Tensor] = None
    image_index: Optional[torch.Tensor] = None
    cell: Optional[torch.Tensor] = None  # (N_g, 2) row/col for pixel-window nodes

    def __len__(self) -> int:
        return int(self.class_id.shape[0])

    def subset(self, idx: torch.Tensor) -> "GraphNodes":
        pick = idx.tolist()
        return GraphNodes(
            feature_student=self.feature_student[idx],
            feature_teacher=self.feature_teacher[idx],
            class_id=self.class_id[idx],
            source=[self.source[i] for i in pick] if self.source else [],
            layer=self.layer,
            area_px=None if self.area_px is None else self.area_px[idx],
            image_index=None if self.image_index is None else self.image_index[idx],
            cell=None if self.cell is None else self.cell[idx],
        )


def empty_nodes(channels: int, dtype=torch.float32, layer: int = 0) -> GraphNodes:
    return GraphNodes(
        feature_student=torch.zeros(0, channels, dtype=dtype),
        feature_teacher=torch.zeros(0, channels, dtype=dtype),
        class_id=torch.zeros(0, dtype=torch.int64),
        layer=layer,
        area_px=torch.zeros(0, dtype=torch.float64),
    )


def drop_zero_norm(nodes: GraphNodes, eps: float = 1e-12) -> GraphNodes:
    ok = (nodes.feature_student.norm(dim=1) > eps) & (nodes.feature_teacher.norm(dim=1) > eps)
    if bool(ok.all()):
        return nodes
    return nodes.subset(torch.nonzero(ok).flatten())


def extract_pixel_nodes(
    teacher_feat: torch.Tensor,
    student_feat: torch.Tensor,
    labels: Sequence,
    w_t: torch.Tensor,
    stride: int,
    level: int,
    m_pix: torch.Tensor,
    covered: torch.Tensor,
    cfg: GraphConfig,
) -> GraphNodes:
    """Window nodes at cells with the highest texture weight.

    A cell is a foreground node if it carries a class on this level and its
    owning box area lies inside the level's gate; a background candidate if no
    box of any level covers it; otherwise it is skipped.
    """
    k = cfg.window
    pool = dict(kernel_size=k, stride=1, padding=k // 2, count_include_pad=False)
    t = F.avg_pool2d(teacher_feat.detach(), **pool)
    s = F.avg_pool2d(student_feat, **pool)
    n, c, h, w = s.shape
    area = np.zeros((n, h, w))
    for i, lab in enumerate(labels):
        xyxy, _ = lab.as_arrays() if hasattr(lab, "as_arrays") else lab
        xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
        owner = assign_cells(xyxy, (h, w), stride, mask=default_level_rule(xyxy) == level)
        if len(xyxy):
            areas = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])
            area[i][owner >= 0] = areas[owner[owner >= 0]]
    lo, hi = cfg.area_gate(stride)
    area_t = torch.from_numpy(area)
    textured = w_t >= 1.0
    fg = textured & (m_pix > 0) & (area_t >= lo) & (area_t <= hi)
    bg = textured & ~covered
    sel = fg | bg
    bi, yi, xi = torch.nonzero(sel, as_tuple=True)
    classes = torch.where(fg[bi, yi, xi], m_pix[bi, yi, xi], torch.zeros_like(m_pix[bi, yi, xi]))
    nodes = GraphNodes(
        feature_student=s[bi, :, yi, xi],
        feature_teacher=t[bi, :, yi, xi],
        class_id=classes.to(torch.int64),
        source=["pixel_window"] * len(bi),
        layer=level,
        area_px=area_t[bi, yi, xi],
        image_index=bi,
        cell=torch.stack([yi, xi], dim=1),
    )
    return drop_zero_norm(nodes)


def extract_instance_nodes(teacher_ins: torch.Tensor, student_ins: torch.Tensor, roi_classes, roi_area=None, layer: int = -1) -> GraphNodes:
    cls = torch.as_tensor(np.asarray(roi_classes, dtype=np.int64))
    nodes = GraphNodes(
        feature_student=student_ins,
        feature_teacher=teacher_ins.detach(),
        class_id=cls,
        source=["instance_roi"] * len(cls),
        layer=layer,
        area_px=None if roi_area is None else torch.as_tensor(np.asarray(roi_area, dtype=np.float64)),
    )
    return drop_zero_norm(nodes)


def extract_nodes(teacher_out, student_out, labels, weight_bundle, cfg: GraphConfig, roi_classes=None) -> List[GraphNodes]:
    """Node sets for every graph layer: each pixel level, then the instance layer."""
    layers = []
    for lvl, stride in enumerate(student_out.strides):
        layers.append(
            extract_pixel_nodes(
                teacher_out.pix_features[lvl], student_out.pix_features[lvl], labels,
                weight_bundle.w_t[lvl], stride, lvl, weight_bundle.m_pix[lvl], weight_bundle.covered[lvl], cfg,
            )
        )
    if student_out.rho and teacher_out.rho and roi_classes is not None and len(roi_classes):
        layers.append(
            extract_instance_nodes(teacher_out.ins_features[0], student_out.ins_features[0], roi_classes, layer=len(layers))
        )
    return layers


@torch.no_grad()
def build_edges(nodes: GraphNodes) -> torch.Tensor:
    """E[i, j] = 1 - cos(student_i, teacher_j)."""
    s = F.normalize(nodes.feature_student.detach(), dim=1)
    t = F.normalize(nodes.feature_teacher.detach(), dim=1)
    return 1.0 - s @ t.T


@torch.no_grad()
def select_background(nodes: GraphNodes, edges: torch.Tensor, n_b: int) -> torch.Tensor:
    """Background candidates most similar to any foreground node, hardest first."""
    cand = torch.nonzero(nodes.class_id == 0).flatten()
    fg = torch.nonzero(nodes.class_id > 0).flatten()
    if n_b <= 0 or len(cand) == 0:
        return torch.zeros(0, dtype=torch.int64)
    if len(fg) == 0:
        return cand[:n_b]
    closeness = edges[cand][:, fg].min(dim=1).values
    order = torch.sort(closeness, stable=True).indices
    return cand[order[:n_b]]


def class_centers(nodes: GraphNodes):
    """Mean teacher feature per present foreground class: ``(classes, centers)``."""
    present = torch.unique(nodes.class_id[nodes.class_id > 0], sorted=True)
    t = nodes.feature_teacher.detach()
    centers = [t[nodes.class_id == k].mean(dim=0) for k in present.tolist()]
    if centers:
        return present, torch.stack(centers)
    return present, t.new_zeros(0, t.shape[1])


def distances(nodes: GraphNodes, centers: torch.Tensor, background: torch.Tensor):
    """Cosine similarity of each student feature to teacher centers and background."""
    s = F.normalize(nodes.feature_student, dim=1)
    d_ct = s @ F.normalize(centers.detach(), dim=1).T
    bg = nodes.feature_teacher.detach()[background]
    d_bg = s @ F.normalize(bg, dim=1).T
    return d_ct, d_bg


@dataclass
class InstanceGraph:
    nodes: GraphNodes
    edges: torch.Tensor
    center_classes: torch.Tensor
    centers: torch.Tensor
    background: torch.Tensor
    d_ct: torch.Tensor
    d_bg: torch.Tensor

    @property
    def w_insd(self) -> torch.Tensor:
        return (self.nodes.class_id > 0).to(self.d_ct.dtype)

    def to_json(self) -> dict:
        def arr(x):
            return x.detach().cpu().double().numpy().round(8).tolist()

        return {
            "layer": self.nodes.layer,
            "nodes": [
                {
                    "class_id": int(self.nodes.class_id[i]),
                    "source": self.nodes.source[i] if self.nodes.source else "",
                    "area_px": None if self.nodes.area_px is None else float(self.nodes.area_px[i]),
                }
                for i in range(len(self.nodes))
            ],
            "center_classes": self.center_classes.tolist(),
            "background": self.background.tolist(),
            "E": arr(self.edges),
            "D_ct": arr(self.d_ct),
            "D_bg": arr(self.d_bg),
        }


def build_graph(nodes: GraphNodes, n_b: int) -> InstanceGraph:
    edges = build_edges(nodes)
    background = select_background(nodes, edges, n_b)
    classes, centers = class_centers(nodes)
    d_ct, d_bg = distances(nodes, centers, background)
    return InstanceGraph(nodes, edges, classes, centers, background, d_ct, d_bg)


def layer_loss(graph: InstanceGraph) -> torch.Tensor:
    w = graph.w_insd
    total_w = w.sum()
    if float(total_w.detach()) == 0.0:
        return graph.d_ct.sum() * 0.0 if graph.d_ct.numel() else graph.nodes.feature_student.sum() * 0.0
    fg = torch.nonzero(graph.nodes.class_id > 0).flatten()
    own = torch.searchsorted(graph.center_classes, graph.nodes.class_id[fg])
    logits = torch.cat([graph.d_ct[fg], graph.d_bg[fg]], dim=1)
    log_p = graph.d_ct[fg, own] - torch.logsumexp(logits, dim=1)
    return -(log_p.sum()) / total_w


def insd_loss(graphs: Sequence[InstanceGraph]) -> torch.Tensor:
    """Sum over layers of the weighted mean negative log own-center probability."""
    terms = [layer_loss(g) for g in graphs]
    if not terms:
        return torch.zeros(())
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def dump_graphs(graphs: Sequence[InstanceGraph], path) -> None:
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([g.to_json() for g in graphs], fh)
