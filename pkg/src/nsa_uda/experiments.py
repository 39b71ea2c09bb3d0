"""End-to-end stage runs on the synthetic benchmark (S1 -> S2 -> S3 plus ablations)."""
from __future__ import annotations

import copy
import logging
import time
from typing import Dict, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .evaluation import evaluate_detections
from .geometry import ImageSample
from .synthetic import generate_dataset
from .trainer import TrainState, eval_model, predict, run_stage

log = logging.getLogger(__name__)

ABLATIONS = {
    "hid": {"gamma_lid": 0.0, "gamma_insd": 0.0},
    "hid_lid": {"gamma_insd": 0.0},
    "full": {},
}


def in_memory_datasets(cfg: RunConfig) -> Dict[str, list]:
    """Generate the benchmark without touching disk; target train labels are withheld."""
    from .geometry import boxes_from_arrays

    raw = generate_dataset(cfg.dataset, cfg.dataset.seed)
    out: Dict[str, list] = {}
    for split, items in raw.items():
        samples = []
        for i, (img, boxes) in enumerate(items):
            labels = None
            if split != "target":
                labels = boxes_from_arrays([b[:4] for b in boxes], [b[4] for b in boxes])
            samples.append(ImageSample(
                pixels=img.astype(np.float64) / 255.0,
                domain="source" if split == "source" else "target",
                labels=labels,
                image_id=f"{split}/{i:06d}",
            ))
        out[split] = samples
    return out


def target_map(state: TrainState, eval_split: Sequence[ImageSample], cfg: RunConfig) -> float:
    preds = predict(eval_model(state), eval_split, score_thresh=cfg.eval.score_thresh, nms_iou=cfg.pseudo.nms_iou, kind="pseudo")
    res = evaluate_detections(preds, [s.labels for s in eval_split], cfg.model.num_classes, cfg.eval.iou)
    return 100.0 * res["map"]


def run_seed(cfg: RunConfig, seed: int, datasets=None, ablations: Sequence[str] = ("full",), with_s3: bool = True) -> Dict[str, float]:
    """Train S1, each requested S2 variant, and S3 from the full S2; returns target mAP (%)."""
    torch.set_num_threads(1)
    datasets = datasets or in_memory_datasets(cfg)
    ev = datasets["target_eval"]
    m = cfg.model
    state = TrainState.fresh(m.num_classes, m.width, m.instance_head, seed=seed, delta=cfg.ema.delta)
    results: Dict[str, float] = {}
    t0 = time.time()
    run_stage(state, "S1", datasets, cfg)
    results["S1"] = target_map(state, ev, cfg)
    log.info("seed %d S1 %.2f (%.0fs)", seed, results["S1"], time.time() - t0)
    full_state: Optional[TrainState] = None
    for name in ablations:
        variant = copy.deepcopy(cfg)
        for key, value in ABLATIONS[name].items():
            setattr(variant.loss, key, value)
        st = copy.deepcopy(state)
        run_stage(st, "S2", datasets, variant)
        results[f"S2_{name}"] = target_map(st, ev, variant)
        log.info("seed %d S2[%s] %.2f (%.0fs)", seed, name, results[f"S2_{name}"], time.time() - t0)
        if name == "full":
            full_state = st
    if "S2_full" in results:
        results["S2"] = results["S2_full"]
    if with_s3 and full_state is not None:
        run_stage(full_state, "S3", datasets, cfg)
        results["S3"] = target_map(full_state, ev, cfg)
        log.info("seed %d S3 %.2f (%.0fs)", seed, results["S3"], time.time() - t0)
    results["seconds"] = time.time() - t0
    return results
