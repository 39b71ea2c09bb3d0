"""Command line entry points.

    nsa-uda [--config PATH] [--seed N] [--single-thread] [--set key=value ...] COMMAND ...

Exit codes: 0 ok, 2 configuration error, 3 training-state error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .evaluation import evaluate_detections
from .geometry import ImageSample, boxes_from_arrays
from .synthetic import generate_dataset, load_split, write_dataset
from .trainer import (
    CheckpointError,
    StageError,
    TrainState,
    eval_model,
    load_checkpoint,
    predict,
    run_stage,
    save_checkpoint,
)
from .weightmaps import build_weight_bundle, export_heatmap

log = logging.getLogger("nsa_uda")

EXIT_OK, EXIT_CONFIG, EXIT_STATE, EXIT_IO = 0, 2, 3, 4
_PREREQ = {"s2": "s1", "s3": "s2"}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(args) -> RunConfig:
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.single_thread:
        overrides["single_thread"] = "true"
    return load_config(args.config, overrides)


def _setup_runtime(cfg: RunConfig) -> None:
    if cfg.single_thread:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.train.run_dir)


def stage_checkpoint_path(cfg: RunConfig, stage: str) -> Path:
    return _run_dir(cfg) / f"{stage.lower()}.ckpt"


def _load_splits(cfg: RunConfig, splits) -> Dict[str, List[ImageSample]]:
    root = Path(cfg.dataset.root)
    out = {}
    for split in splits:
        if not (root / split / "annotations.json").exists():
            raise CliError(f"dataset split {split!r} not found under {root} (run make-dataset first)", EXIT_IO)
        # target training labels exist on disk for diagnostics but are never read for training
        out[split] = load_split(root, split, with_labels=split != "target")
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_make_dataset(cfg: RunConfig, args) -> int:
    root = Path(args.out or cfg.dataset.root)
    try:
        data = generate_dataset(cfg.dataset, cfg.dataset.seed)
        write_dataset(data, root)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {root}: {exc}", EXIT_IO) from exc
    sizes = {k: len(v) for k, v in data.items()}
    print(json.dumps({"root": str(root), "splits": sizes}, sort_keys=True))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    stage = args.stage.lower()
    run_dir = _run_dir(cfg)
    if args.resume:
        state = _load_state(args.resume)
        if state.stage.lower() != stage and stage.upper() not in _next_stages(state):
            raise CliError(f"checkpoint is at stage {state.stage}; cannot train {stage.upper()} from it", EXIT_STATE)
    elif stage == "s1":
        m = cfg.model
        state = TrainState.fresh(m.num_classes, m.width, m.instance_head, seed=cfg.seed, delta=cfg.ema.delta)
    else:
        prereq = stage_checkpoint_path(cfg, _PREREQ[stage])
        if not prereq.exists():
            raise CliError(f"{stage.upper()} needs the {_PREREQ[stage].upper()} checkpoint {prereq}", EXIT_STATE)
        state = _load_state(prereq)

    splits = ["source", "target"] if stage == "s3" else ["source"]
    datasets = _load_splits(cfg, splits)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.jsonl"
        fh = open(metrics_path, "a", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write to {run_dir}: {exc}", EXIT_IO) from exc

    graph_dump = None
    if args.dump_graph:
        dump_dir = Path(args.dump_graph)

        def graph_dump(graphs):
            from .graph import dump_graphs

            dump_graphs(graphs, dump_dir / f"{stage}_graphs.json")

    with fh:
        header = {"effective_config": cfg.flatten(), "stage": stage.upper(), "start_iteration": state.iteration}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        log.info("effective config:\n%s", cfg.dumps())

        def metrics(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()

        def checkpoint(st):
            save_checkpoint(st, run_dir / f"{stage}.last.ckpt", extra={"config": cfg.flatten()})

        try:
            run_stage(state, stage.upper(), datasets, cfg, metrics=metrics, checkpoint=checkpoint, graph_dump=graph_dump)
        except StageError as exc:
            raise CliError(str(exc), EXIT_STATE) from exc
    out = save_checkpoint(state, stage_checkpoint_path(cfg, stage), extra={"config": cfg.flatten()})
    print(json.dumps({"checkpoint": str(out), "stage": stage.upper(), "iteration": state.iteration}, sort_keys=True))
    return EXIT_OK


def _next_stages(state: TrainState):
    order = ["S1", "S2", "S3"]
    done = [s for s in order if s in state.completed]
    return order[len(done):len(done) + 1]


def _load_state(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist", EXIT_STATE)
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(f"cannot load {path}: {exc}", EXIT_STATE) from exc
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc


def cmd_evaluate(cfg: RunConfig, args) -> int:
    state = _load_state(args.checkpoint)
    split = args.split or cfg.eval.split
    samples = _load_splits(cfg, [split])[split]
    if any(s.labels is None for s in samples):
        raise CliError(f"split {split!r} has no ground truth", EXIT_IO)
    preds = predict(eval_model(state), samples, score_thresh=cfg.eval.score_thresh, nms_iou=cfg.pseudo.nms_iou)
    res = evaluate_detections(preds, [s.labels for s in samples], state.teacher.num_classes, cfg.eval.iou)
    report = {
        "checkpoint": str(args.checkpoint), "split": split, "iou": res["iou"],
        "ap": {str(k): v for k, v in res["ap"].items()}, "map": res["map"],
        "num_gt": {str(k): v for k, v in res["num_gt"].items()},
    }
    text = json.dumps(report, sort_keys=True, indent=1)
    print(text)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(f".eval_{split}.json")
    try:
        out.write_text(text + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from exc
    return EXIT_OK


def _read_annotations(path, image_name: str):
    """Boxes from an annotations.json (matched by file name) or a plain list of box dicts."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, list) and data and "boxes" in data[0]:
        match = [r for r in data if Path(r["file"]).name == image_name]
        if not match:
            raise CliError(f"{image_name} not listed in {path}", EXIT_IO)
        data = match[0]["boxes"]
    xyxy = [[b["x_min"], b["y_min"], b["x_max"], b["y_max"]] for b in data]
    return boxes_from_arrays(xyxy, [b["class_id"] for b in data])


def cmd_visualize_weights(cfg: RunConfig, args) -> int:
    from PIL import Image, UnidentifiedImageError

    state = _load_state(args.checkpoint)
    try:
        pixels = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise CliError(f"cannot read image {args.image}: {exc}", EXIT_IO) from exc
    labels = boxes_from_arrays(np.zeros((0, 4)), [])
    if args.annotations:
        try:
            labels = _read_annotations(args.annotations, Path(args.image).name)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot read annotations {args.annotations}: {exc}", EXIT_IO) from exc
    model = eval_model(state)
    with torch.no_grad():
        out = model(torch.from_numpy(pixels).permute(2, 0, 1)[None].float())
    w = cfg.weights
    bundle = build_weight_bundle(out.pix_features, [labels], strides=out.strides, eta1=w.eta1, eta2=w.eta2, r=w.r, psi_window=w.psi_window)
    out_dir = Path(args.out or _run_dir(cfg) / "weights")
    written = []
    try:
        for lvl in range(len(out.strides)):
            for name, maps in (("a_pix", bundle.a_pix), ("w_t", bundle.w_t), ("b_pix", bundle.b_pix)):
                written.append(str(export_heatmap(maps[lvl][0], out_dir / f"layer{lvl}" / f"{name}.png")))
    except OSError as exc:
        raise CliError(f"cannot write heat maps to {out_dir}: {exc}", EXIT_IO) from exc
    print(json.dumps({"written": written}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsa-uda", description="Network stability analysis for domain-adaptive detection")
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--single-thread", action="store_true", help="one torch thread (bit-reproducible runs)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-dataset", help="render the synthetic two-domain benchmark")
    mk.add_argument("--out", help="output root (default dataset.root)")
    mk.set_defaults(func=cmd_make_dataset)

    tr = sub.add_parser("train", help="run one training stage")
    tr.add_argument("--stage", required=True, choices=["s1", "s2", "s3", "S1", "S2", "S3"])
    tr.add_argument("--resume", metavar="PATH", help="continue from this checkpoint")
    tr.add_argument("--dump-graph", metavar="DIR", help="write the first batch's instance graphs as JSON")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="AP at IoU 0.5 of a checkpoint's teacher")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", help="dataset split (default eval.split)")
    ev.add_argument("--out", help="report path (default next to the checkpoint)")
    ev.set_defaults(func=cmd_evaluate)

    vz = sub.add_parser("visualize-weights", help="export A, W_t and B heat maps for one image")
    vz.add_argument("--checkpoint", required=True)
    vz.add_argument("--image", required=True)
    vz.add_argument("--annotations", help="annotations.json or a JSON list of boxes")
    vz.add_argument("--out", help="output directory (default <run_dir>/weights)")
    vz.set_defaults(func=cmd_visualize_weights)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    _setup_runtime(cfg)
    try:
        return args.func(cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
