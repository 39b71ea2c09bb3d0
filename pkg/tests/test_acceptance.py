"""End-to-end acceptance checks; each test records one PASS/FAIL line."""

import os
import shutil
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context

import numpy as np
import pytest
import torch

import oracles
from test_config_cli import cli
from test_evaluation import GT, hand_predictions
from test_geometry import random_record
from test_graph import random_nodes
from test_losses import _run_objective, _teacher_student, identity_cfg, leaf_list, rebuild, toy_outputs
from test_weightmaps import _levels_exact, _scene_bundle
from nsa_uda.config import RunConfig
from nsa_uda.detector import images_to_tensor
from nsa_uda.evaluation import evaluate_detections
from nsa_uda.experiments import run_seed
from nsa_uda.geometry import GeoRecord, compose_geo, invert_geo, transform_boxes
from nsa_uda.graph import GraphNodes, build_edges, build_graph, class_centers, distances, insd_loss, select_background
from nsa_uda.losses import align_maps, det_loss, eca_lid, ica_lid
from nsa_uda.trainer import TrainState, ema_update
from nsa_uda.weightmaps import build_weight_bundle, grid_centers, sample_centers_psi, smoothness, texture_weights

SEEDS = (0, 1, 2)
N_RANDOM = 120


def test_c1_zero_disturbance_identity(acceptance):
    t0 = time.time()
    rep = _run_objective(identity_cfg())
    keys = ("eca_lid_pix", "eca_lid_ins", "ica_lid_pix", "ica_lid_ins", "ica_insd")
    vals = {k: rep.components[k] for k in keys}
    dt = time.time() - t0
    ok = all(v < 1e-6 for v in vals.values()) and dt < 10
    detail = " ".join(f"{k}={v:.2e}" for k, v in vals.items())
    assert acceptance(1, ok, f"{detail} ({dt:.1f}s)"), vals


def _oracle_checks():
    """Yields (name, worst error, tolerance) for every op and precision."""
    rng = np.random.default_rng(100)
    for dtype, tol in ((torch.float64, 1e-6), (torch.float32, 1e-5)):
        worst = dict.fromkeys(("smoothness", "texture_weights", "sample_centers_psi", "class_centers",
                               "build_edges", "distances", "insd_loss"), 0.0)
        for _ in range(N_RANDOM):
            c, h, w = (int(v) for v in rng.integers(1, 9, size=3))
            feat = rng.normal(size=(c, h, w))
            raw = oracles.smoothness(feat, normalize=False)
            err = np.abs(smoothness(torch.tensor(feat, dtype=dtype), normalize=False).double().numpy() - raw).max()
            worst["smoothness"] = max(worst["smoothness"], err)

            s = rng.uniform(size=(h, w)) * rng.uniform(0.5, 2.0)
            got = texture_weights(torch.tensor(s, dtype=dtype)).double().numpy()
            # cells within rounding of a threshold may legitimately land either side in float32
            sbar = s.mean()
            clear = (np.abs(s - 1.3 * sbar) > 1e-5) & (np.abs(s - 1.6 * sbar) > 1e-5)
            worst["texture_weights"] = max(worst["texture_weights"], np.abs(got - oracles.texture_weights(s))[clear].max(initial=0))

            s_int = rng.integers(0, 4, size=(h, w)).astype(np.float64)
            wm = rng.uniform(size=(h, w))
            got = sample_centers_psi(torch.tensor(wm, dtype=dtype), torch.tensor(s_int, dtype=dtype)).double().numpy()
            worst["sample_centers_psi"] = max(worst["sample_centers_psi"], np.abs(got - oracles.sample_centers_psi(wm, s_int)).max())

            nodes, fs, ft, classes = random_nodes(rng, dtype=dtype)
            edges = build_edges(nodes)
            worst["build_edges"] = max(worst["build_edges"], np.abs(edges.double().numpy() - oracles.build_edges(fs, ft)).max())
            present, centers = class_centers(nodes)
            p_ref, c_ref = oracles.class_centers(ft, classes)
            assert present.tolist() == p_ref
            worst["class_centers"] = max(worst["class_centers"], np.abs(centers.double().numpy() - c_ref).max(initial=0))
            bg = select_background(nodes, edges, 3)
            d_ct, d_bg = distances(nodes, centers, bg)
            r_ct, r_bg = oracles.distances(fs, c_ref, [ft[j] for j in bg.tolist()])
            err = max(np.abs(d_ct.double().numpy() - r_ct).max(initial=0), np.abs(d_bg.double().numpy() - r_bg).max(initial=0))
            worst["distances"] = max(worst["distances"], err)
            n_b = int(rng.integers(0, 5))
            ref = oracles.insd_layer_loss(fs, ft, classes, n_b)
            got = float(insd_loss([build_graph(nodes, n_b)]))
            worst["insd_loss"] = max(worst["insd_loss"], abs(got - ref) / max(1.0, abs(ref)))
        for name, err in worst.items():
            yield f"{name}/{str(dtype)[6:]}", float(err), tol


def test_c2_oracle_equivalence(acceptance):
    t0 = time.time()
    results = list(_oracle_checks())
    dt = time.time() - t0
    bad = [f"{n}={e:.1e}" for n, e, tol in results if not e < tol]
    worst = max(results, key=lambda r: r[1] / r[2])
    ok = not bad and dt < 120
    detail = f"{len(results)} op/precision pairs x {N_RANDOM} inputs, worst {worst[0]}={worst[1]:.1e} ({dt:.1f}s)"
    assert acceptance(2, ok, detail + (f" failing: {bad}" if bad else "")), bad


def _gradient_errors():
    scene, out = toy_outputs()
    labels = [scene.labels]

    def det_fn(leaves):
        d = det_loss(rebuild(out, leaves), labels)
        return d["cls"] + d["reg"]

    errs = {"det_loss": oracles.finite_difference_error(det_fn, leaf_list(out))}

    scene, t_det, s_det = _teacher_student()
    xyxy, cls = scene.labels.as_arrays()
    x = images_to_tensor([scene], torch.float64)
    with torch.no_grad():
        t_out, s_out = t_det(x, [xyxy]), s_det(x, [xyxy])
    aligned = align_maps(t_out, [GeoRecord(src_size=scene.size, flip_h=True)])
    bundle = build_weight_bundle(aligned.pix_features, [scene.labels], roi_classes=cls + 1)

    def eca_fn(leaves):
        e = eca_lid(aligned, rebuild(s_out, leaves), bundle.a_pix, bundle.a_ins)
        return e["pix"] + e["ins"]

    gen = torch.Generator().manual_seed(0)
    point = [v + 0.1 * torch.randn(v.shape, generator=gen, dtype=v.dtype) for v in leaf_list(s_out)]
    errs["eca_lid"] = oracles.finite_difference_error(eca_fn, point)

    def ica_fn(leaves):
        i = ica_lid(aligned.pix_features, leaves[:2], bundle.b_pix, aligned.ins_features, leaves[2:], bundle.b_ins, rho=1)
        return i["pix"] + i["ins"]

    errs["ica_lid"] = oracles.finite_difference_error(ica_fn, list(s_out.pix_features) + list(s_out.ins_features))

    nodes, *_ = random_nodes(np.random.default_rng(7), n=7, c=4)
    nodes.class_id = torch.tensor([1, 2, 1, 0, 0, 3, 0])

    def insd_fn(leaves):
        n = GraphNodes(feature_student=leaves[0], feature_teacher=nodes.feature_teacher, class_id=nodes.class_id)
        return insd_loss([build_graph(n, 2)])

    errs["insd_loss"] = oracles.finite_difference_error(insd_fn, [nodes.feature_student])
    return errs


def test_c3_gradient_checks(acceptance):
    t0 = time.time()
    errs = _gradient_errors()
    dt = time.time() - t0
    ok = all(e < 1e-4 for e in errs.values()) and dt < 120
    detail = " ".join(f"{k}={v:.1e}" for k, v in errs.items())
    assert acceptance(3, ok, f"{detail} ({dt:.1f}s)"), errs


def test_c4_ema_exactness(acceptance):
    t0 = time.time()
    state = TrainState(teacher=TrainState.fresh(width=8, seed=0).teacher.double(), delta=0.97)
    state.student = TrainState.fresh(width=8, seed=1).teacher.double()

    def gap():
        return max(float((t - s).detach().abs().max()) for t, s in zip(state.teacher.parameters(), state.student.parameters()))

    gap0, exact = gap(), True
    with torch.no_grad():
        for _ in range(10):
            before = [t.clone() for t in state.teacher.parameters()]
            ema_update(state)
            exact &= all(torch.equal(t, 0.97 * b + (1.0 - 0.97) * s)
                         for b, t, s in zip(before, state.teacher.parameters(), state.student.parameters()))
    ratio = gap() / gap0
    dt = time.time() - t0
    ok = exact and ratio == pytest.approx(0.97 ** 10, rel=1e-12) and dt < 5
    assert acceptance(4, ok, f"bit-exact={exact} ratio={ratio:.15f} vs {0.97 ** 10:.15f} ({dt:.2f}s)")


def test_c5_geometry_round_trips(acceptance):
    t0 = time.time()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10_000):
        rec = random_record(rng)
        xy = rng.uniform(0, 40, size=(4, 2))
        wh = rng.uniform(1, 20, size=(4, 2))
        boxes = np.concatenate([xy, xy + wh], 1)
        fwd, _ = transform_boxes(rec, boxes, min_area_px=0.0, clip=False)
        back, _ = transform_boxes(invert_geo(rec), fwd, min_area_px=0.0, clip=False)
        worst = max(worst, float(np.abs(back - boxes).max()))
    flip_worst = 0.0
    for _ in range(1000):
        size = (int(rng.integers(8, 64)), int(rng.integers(8, 64)))
        flip = GeoRecord(src_size=size, flip_h=True)
        twice = compose_geo(flip, GeoRecord(src_size=size, flip_h=True))
        xy = rng.uniform(-10, 70, size=(8, 2))
        px, py = twice.map_points(xy[:, 0], xy[:, 1])
        flip_worst = max(flip_worst, float(np.abs(np.stack([px, py], 1) - xy).max()))
    scene, t_det, _ = _teacher_student()
    with torch.no_grad():
        out = t_det(images_to_tensor([scene], torch.float64))
    flip = GeoRecord(src_size=scene.size, flip_h=True)
    twice = align_maps(align_maps(out, [flip]), [flip])
    align_worst = max(
        float((twice.pix_features[l] - out.pix_features[l]).abs().max()) for l in range(len(out.pix_features))
    )
    align_worst = max(align_worst, *(float((a["box"] - b["box"]).abs().max()) for a, b in zip(twice.pix_preds, out.pix_preds)))
    dt = time.time() - t0
    ok = worst < 1e-6 and flip_worst < 1e-6 and align_worst < 1e-6 and dt < 30
    detail = f"box round-trip {worst:.1e}px, flip∘flip {flip_worst:.1e}, align flip twice {align_worst:.1e} ({dt:.1f}s)"
    assert acceptance(5, ok, detail)


def test_c6_weight_map_structure(acceptance):
    t0 = time.time()
    selected = inside = 0
    levels_ok = subset_ok = True
    for seed in range(30):
        scene, bundle = _scene_bundle(seed)
        xyxy = scene.labels.as_arrays()[0]
        for lvl, stride in enumerate((4, 8)):
            a, w_t, b = bundle.a_pix[lvl][0], bundle.w_t[lvl][0], bundle.b_pix[lvl][0]
            levels_ok &= _levels_exact(w_t)
            support = b != 0
            subset_ok &= not bool((support & ~((a > 0) & (w_t == 1.0))).any())
            cx, cy = grid_centers(tuple(b.shape), stride)
            for i, j in zip(*np.nonzero(support.numpy())):
                x, y = cx[i, j], cy[i, j]
                selected += 1
                inside += bool(((xyxy[:, 0] <= x) & (x < xyxy[:, 2]) & (xyxy[:, 1] <= y) & (y < xyxy[:, 3])).any())
    dt = time.time() - t0
    ok = levels_ok and subset_ok and selected > 0 and inside == selected and dt < 30
    detail = f"W_t levels exact={levels_ok}, supp(B)⊆A∩{{W_t=1}}={subset_ok}, B inside GT {inside}/{selected} ({dt:.1f}s)"
    assert acceptance(6, ok, detail)


def test_c7_ap_evaluator(acceptance):
    hand = evaluate_detections([hand_predictions()], [GT], num_classes=1)["ap"][0]
    gt = [(np.array([[0, 0, 5, 5], [10, 10, 20, 20]]), np.array([0, 2])), (np.array([[3, 3, 9, 9]]), np.array([1]))]
    perfect = evaluate_detections([(b, c, np.full(len(c), 0.9)) for b, c in gt], gt, num_classes=3)["map"]
    ok = hand == 5 / 9 and perfect == 1.0
    assert acceptance(7, ok, f"hand AP={hand!r} (manual 5/9), perfect mAP={perfect}")


def _seed_job(seed):
    return run_seed(RunConfig(), seed, ablations=("hid", "hid_lid", "full"))


@pytest.fixture(scope="module")
def seed_runs():
    t0 = time.time()
    workers = min(len(SEEDS), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as pool:
            runs = list(pool.map(_seed_job, SEEDS))
    else:
        runs = [_seed_job(s) for s in SEEDS]
    return runs, time.time() - t0


def _median(runs, key):
    return statistics.median(r[key] for r in runs)


def test_c8_stage_trend(acceptance, seed_runs):
    runs, dt = seed_runs
    s1, s2, s3 = (_median(runs, k) for k in ("S1", "S2", "S3"))
    ok = s2 >= s1 + 5 and s3 >= s2 - 0.5 and dt <= 45 * 60
    per_seed = "; ".join(f"seed{s}: {r['S1']:.1f}/{r['S2']:.1f}/{r['S3']:.1f}" for s, r in zip(SEEDS, runs))
    detail = f"median S1={s1:.2f} S2={s2:.2f} S3={s3:.2f} [{per_seed}] ({dt / 60:.1f} min, {os.cpu_count()} cpu)"
    assert acceptance(8, ok, detail)


def test_c9_ablation_direction(acceptance, seed_runs):
    runs, dt = seed_runs
    hid, hid_lid, full = (_median(runs, k) for k in ("S2_hid", "S2_hid_lid", "S2_full"))
    ok = hid_lid - hid >= -0.5 and full - hid_lid >= -0.5 and full - hid >= 1.0 and dt <= 45 * 60
    detail = (f"median S2 HID={hid:.2f} +LID={hid_lid:.2f} ({hid_lid - hid:+.2f}) +InsD={full:.2f} "
              f"({full - hid_lid:+.2f}); full-HID={full - hid:+.2f} (need >= +1)")
    assert acceptance(9, ok, detail)


def test_c10_determinism(acceptance, tmp_path):
    assert cli(tmp_path, "make-dataset") == 0
    saved = []
    for _ in range(2):
        shutil.rmtree(tmp_path / "run", ignore_errors=True)
        for stage in ("s1", "s2", "s3"):
            assert cli(tmp_path, "train", "--stage", stage) == 0
        saved.append({n: (tmp_path / "run" / n).read_bytes() for n in ("s1.ckpt", "s2.ckpt", "s3.ckpt", "metrics.jsonl")})
    same = [n for n in saved[0] if saved[0][n] == saved[1][n]]
    ok = len(same) == len(saved[0])
    assert acceptance(10, ok, f"bit-identical: {', '.join(same)}")
