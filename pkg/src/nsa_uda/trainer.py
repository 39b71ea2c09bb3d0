"""Three-stage teacher/student training with EMA updates and checkpoints."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from torchvision.ops import nms

from .detector import ToyDetector, decode_detections, images_to_tensor, sample_training_rois
from .disturbance import _center_crop_record
from .geometry import LabelSet, apply_geo, boxes_from_arrays, transform_boxes
from .losses import BatchItem, det_loss, total_objective

log = logging.getLogger(__name__)

STAGES = ("S1", "S2", "S3")
FORMAT_VERSION = 1
_MAGIC = b"NSACKPT\x00"


class StageError(RuntimeError):
    """A stage was started without its prerequisite state."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class PseudoEntry:
    labels: LabelSet
    iteration: int
    threshold: float
    ignore: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # uncertain detections


@dataclass
class TrainState:
    teacher: ToyDetector
    student: Optional[ToyDetector] = None
    delta: float = 0.97
    stage: str = "init"
    iteration: int = 0
    stage_iteration: int = 0
    completed: List[str] = field(default_factory=list)
    optimizer: Optional[torch.optim.Optimizer] = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    pseudo: Dict[str, PseudoEntry] = field(default_factory=dict)
    model_args: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def fresh(cls, num_classes=3, width=32, instance_head=True, seed=0, delta=0.97) -> "TrainState":
        args = {"num_classes": num_classes, "width": width, "instance_head": instance_head}
        teacher = ToyDetector(seed=seed, **args)
        return cls(teacher=teacher, delta=delta, rng=np.random.default_rng(seed), model_args=args)


# ---------------------------------------------------------------------------
# EMA and optimisation helpers

@torch.no_grad()
def ema_update(state: TrainState) -> TrainState:
    """teacher <- delta * teacher + (1 - delta) * student, elementwise."""
    if state.student is None:
        raise StageError("EMA needs a student network")
    t_params = dict(state.teacher.named_parameters())
    s_params = dict(state.student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter names differ")
    d = state.delta
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.copy_(d * t + (1.0 - d) * s)
    return state


def make_sgd(params, lr, momentum, weight_decay) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


# ---------------------------------------------------------------------------
# inference / pseudo labels

@torch.no_grad()
def predict(model: ToyDetector, samples: Sequence, score_thresh=0.05, nms_iou=0.5, batch_size=32, kind="pseudo") -> List[LabelSet]:
    model.eval()
    dtype = next(model.parameters()).dtype
    out: List[LabelSet] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        outputs = model(images_to_tensor(chunk, dtype))
        out.extend(decode_detections(outputs, score_thresh=score_thresh, nms_iou=nms_iou, kind=kind))
    model.train()
    return out


def generate_pseudo_labels(
    teacher: ToyDetector, target_images: Sequence, score_thresh=0.25, nms_iou=0.5, iteration=0,
    ignore_thresh: Optional[float] = None,
) -> Dict[str, PseudoEntry]:
    """Teacher detections on target images kept at ``score >= score_thresh``.

    Overlaps across classes are resolved by a class-agnostic NMS; every other
    detection scoring at least ``ignore_thresh`` is stored as an ignore
    region: neither object nor background during training.
    """
    low = score_thresh if ignore_thresh is None else min(ignore_thresh, score_thresh)
    dets = predict(teacher, target_images, score_thresh=low, nms_iou=nms_iou)
    cache = {}
    for img, lab in zip(target_images, dets):
        xyxy, cls = lab.as_arrays()
        scores = lab.scores()
        # One object carries one class: suppress overlapping boxes across classes.
        keep = nms(torch.from_numpy(xyxy), torch.from_numpy(scores), nms_iou).numpy() if len(xyxy) else np.zeros(0, dtype=np.int64)
        sure = keep[scores[keep] >= score_thresh]
        kept = [lab.boxes[i] for i in sure]
        unsure = np.zeros((0, 4))
        if ignore_thresh is not None:
            rest = np.setdiff1d(np.arange(len(xyxy)), sure)
            unsure = xyxy[rest[scores[rest] >= ignore_thresh]].reshape(-1, 4)
        cache[img.image_id] = PseudoEntry(LabelSet(kept, frame_id=img.frame_id, kind="pseudo"), iteration, score_thresh, unsure)
    return cache


# ---------------------------------------------------------------------------
# stages

def _item(sample, labels: Optional[LabelSet], ignore: Optional[np.ndarray] = None) -> BatchItem:
    lab = labels if labels is not None else sample.labels
    xyxy, cls = lab.as_arrays() if lab is not None else (np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    return BatchItem(sample=sample, xyxy=xyxy, classes=cls, ignore=ignore)


def _child_rngs(rng: np.random.Generator, n: int) -> List[np.random.Generator]:
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [np.random.default_rng(int(s)) for s in seeds]


def _s1_augment(sample, rng, scale_max):
    # log-uniform so that unzoomed and zoomed views are equally represented
    scale = float(np.exp(rng.uniform(0.0, np.log(scale_max))))
    flip = bool(rng.integers(0, 2))
    rec = _center_crop_record(sample.size, scale, sample.size, flip=flip)
    view = apply_geo(rec, sample)
    return view, rec


def _s1_step(state, batch, cfg, it):
    s1 = cfg.stages.s1
    model = state.teacher
    dtype = next(model.parameters()).dtype
    rngs = _child_rngs(state.rng, len(batch))
    images, labels = [], []
    for sample, rng in zip(batch, rngs):
        view, rec = _s1_augment(sample, rng, s1.scale_max)
        xyxy, cls = sample.labels.as_arrays()
        boxes, idx = transform_boxes(rec, xyxy)
        images.append(view.pixels)
        labels.append((boxes, cls[idx]))
    x = images_to_tensor(images, dtype)
    rois = None
    if model.has_instance_head:
        rois = [sample_training_rois(lab[0], x.shape[-2:], rng, cfg.loss.background_rois) for lab, rng in zip(labels, rngs)]
    d = det_loss(model(x, rois), labels, cfg.loss)
    loss = d["cls"] + d["reg"]
    lr = s1.lr * min(1.0, (it + 1) / max(1, s1.warmup))
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    return {"det_cls": d["cls"].item(), "det_reg": d["reg"].item(), "total": loss.item(), "lr": lr}


def _enter_stage(state: TrainState, stage: str, cfg) -> None:
    if stage == "S1":
        state.optimizer = make_sgd(state.teacher.parameters(), cfg.stages.s1.lr, cfg.stages.s1.momentum, cfg.stages.s1.weight_decay)
    else:
        need = "S1" if stage == "S2" else "S2"
        if need not in state.completed:
            raise StageError(f"{stage} requires a finished {need} state")
        if stage == "S2" or state.student is None:
            state.student = copy.deepcopy(state.teacher)
        state.student.train()
        for p in state.student.parameters():
            p.requires_grad_(True)
        for p in state.teacher.parameters():
            p.requires_grad_(False)
        o = cfg.optim
        state.optimizer = make_sgd(state.student.parameters(), o.lr, o.momentum, o.weight_decay)
        state.delta = cfg.ema.delta
    state.stage = stage
    state.stage_iteration = 0


def run_stage(
    state: TrainState,
    stage: str,
    datasets: Dict[str, Sequence],
    cfg,
    metrics: Optional[Callable[[dict], None]] = None,
    checkpoint: Optional[Callable[[TrainState], None]] = None,
    graph_dump: Optional[Callable[[list], None]] = None,
) -> TrainState:
    """Run (or resume) one stage until its iteration budget is spent.

    ``datasets`` holds ``source`` (labelled) and, for S3, ``target`` samples.
    ``metrics`` receives one dict per logged iteration.
    """
    stage = stage.upper()
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}")
    if state.stage != stage:
        _enter_stage(state, stage, cfg)
    stage_cfg = getattr(cfg.stages, stage.lower())
    total_iters = stage_cfg.iterations
    source = list(datasets["source"])
    target = list(datasets.get("target") or [])
    if stage == "S3" and not target:
        raise StageError("S3 needs target images")
    bs = stage_cfg.batch_size
    while state.stage_iteration < total_iters:
        it = state.stage_iteration
        if stage == "S1":
            idx = state.rng.integers(0, len(source), size=bs)
            row = _s1_step(state, [source[i] for i in idx], cfg, it)
        else:
            use_target = stage == "S3" and it % 2 == 1
            if stage == "S3" and (not state.pseudo or it % cfg.pseudo.refresh_interval == 0):
                state.pseudo = generate_pseudo_labels(
                    state.teacher, target, cfg.pseudo.threshold, cfg.pseudo.nms_iou, iteration=state.iteration,
                    ignore_thresh=cfg.pseudo.ignore_threshold,
                )
            pool = target if use_target else source
            idx = state.rng.integers(0, len(pool), size=bs)
            batch = []
            for i in idx:
                sample = pool[i]
                if use_target:
                    entry = state.pseudo[sample.image_id]
                    batch.append(_item(sample, entry.labels, entry.ignore))
                else:
                    batch.append(_item(sample, sample.labels))
            rngs = _child_rngs(state.rng, bs)
            report = total_objective(
                batch, state.teacher, state.student, cfg.disturbance, cfg.loss, cfg.weights, cfg.graph, rngs,
                keep_graphs=graph_dump is not None and it == 0,
            )
            state.optimizer.zero_grad(set_to_none=True)
            report.total_tensor.backward()
            state.optimizer.step()
            ema_update(state)
            row = {"total": report.total, **report.components, "counts": report.counts, "domain": "target" if use_target else "source"}
            if graph_dump is not None and report.graphs:
                graph_dump(report.graphs)
        state.stage_iteration += 1
        state.iteration += 1
        if metrics is not None and (state.stage_iteration % cfg.train.log_interval == 0 or state.stage_iteration == total_iters):
            metrics({"iteration": state.iteration, "stage": stage, **row})
        if checkpoint is not None and cfg.train.checkpoint_interval and state.stage_iteration % cfg.train.checkpoint_interval == 0:
            checkpoint(state)
    if stage not in state.completed:
        state.completed.append(stage)
    return state


def eval_model(state: TrainState) -> ToyDetector:
    """The network reported for a stage: the teacher (trained in S1, EMA afterwards)."""
    return state.teacher


# ---------------------------------------------------------------------------
# checkpoint container

def _arrays_of(state: TrainState) -> Dict[str, np.ndarray]:
    arrays = {f"teacher.{k}": v.detach().cpu().numpy() for k, v in state.teacher.named_parameters()}
    owner = state.student if state.stage in ("S2", "S3") and state.student is not None else state.teacher
    if state.student is not None:
        arrays.update({f"student.{k}": v.detach().cpu().numpy() for k, v in state.student.named_parameters()})
    if state.optimizer is not None:
        for name, p in owner.named_parameters():
            buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                arrays[f"optim.{name}"] = buf.detach().cpu().numpy()
    return arrays


def _pseudo_to_json(cache: Dict[str, PseudoEntry]) -> dict:
    out = {}
    for key, e in sorted(cache.items()):
        xyxy, cls = e.labels.as_arrays()
        out[key] = {
            "xyxy": xyxy.tolist(), "classes": cls.tolist(), "scores": e.labels.scores().tolist(),
            "iteration": e.iteration, "threshold": e.threshold, "frame_id": e.labels.frame_id,
            "ignore": e.ignore.tolist(),
        }
    return out


def _pseudo_from_json(data: dict) -> Dict[str, PseudoEntry]:
    from .geometry import boxes_from_arrays

    cache = {}
    for key, e in data.items():
        labels = boxes_from_arrays(e["xyxy"], e["classes"], e["scores"], frame_id=e["frame_id"], kind="pseudo")
        ignore = np.asarray(e.get("ignore", []), dtype=np.float64).reshape(-1, 4)
        cache[key] = PseudoEntry(labels, e["iteration"], e["threshold"], ignore)
    return cache


def save_checkpoint(state: TrainState, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _arrays_of(state)
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "stage": state.stage,
        "iteration": state.iteration,
        "stage_iteration": state.stage_iteration,
        "completed": state.completed,
        "delta": state.delta,
        "model_args": state.model_args,
        "optimizer": None if state.optimizer is None else {
            k: v for k, v in state.optimizer.param_groups[0].items() if k != "params" and isinstance(v, (int, float, bool))
        },
        "rng_state": state.rng.bit_generator.state,
        "pseudo": _pseudo_to_json(state.pseudo),
        "arrays": index,
        "payload_bytes": len(payload),
        "checksum": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
    return path


def read_checkpoint(path):
    """Return ``(header, {name: array})`` after version and checksum checks."""
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC) or len(data) < len(_MAGIC) + 12:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack("<IQ", data[len(_MAGIC):len(_MAGIC) + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(_MAGIC) + 12
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header (checksum cannot be verified)") from exc
    payload = data[start + head_len:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt payload)")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header, arrays


def _load_params(model: ToyDetector, arrays, prefix):
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"{prefix}.{name}"]))


def load_checkpoint(path, cfg=None) -> TrainState:
    header, arrays = read_checkpoint(path)
    args = header["model_args"]
    teacher = ToyDetector(**args)
    _load_params(teacher, arrays, "teacher")
    state = TrainState(teacher=teacher, delta=header["delta"], model_args=args)
    state.stage = header["stage"]
    state.iteration = header["iteration"]
    state.stage_iteration = header["stage_iteration"]
    state.completed = list(header["completed"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    state.rng = rng
    state.pseudo = _pseudo_from_json(header["pseudo"])
    if any(k.startswith("student.") for k in arrays):
        state.student = ToyDetector(**args)
        _load_params(state.student, arrays, "student")
    opt = header["optimizer"]
    if opt is not None:
        owner = state.student if state.stage in ("S2", "S3") and state.student is not None else state.teacher
        if owner is state.student:
            for p in state.teacher.parameters():
                p.requires_grad_(False)
        state.optimizer = make_sgd(owner.parameters(), opt["lr"], opt["momentum"], opt["weight_decay"])
        for name, p in owner.named_parameters():
            key = f"optim.{name}"
            if key in arrays:
                state.optimizer.state[p]["momentum_buffer"] = torch.from_numpy(arrays[key])
    return state
