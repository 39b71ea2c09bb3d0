import numpy as np
import pytest
import torch

from conftest import make_scene
from nsa_uda.detector import (
    ToyDetector,
    box_deltas,
    box_iou_np,
    decode_detections,
    encode_level_targets,
    images_to_tensor,
    render_outputs,
    roi_targets,
    sample_training_rois,
)
from nsa_uda.evaluation import evaluate_detections


def test_output_shapes():
    det = ToyDetector(num_classes=3, width=16)
    x = torch.rand(2, 3, 50, 70)
    out = det(x, [np.array([[0, 0, 10, 10]]), np.zeros((0, 4))])
    assert out.strides == [4, 8]
    assert out.image_size == (50, 70)
    # inputs are padded up to the coarse stride
    assert out.pix_features[0].shape[-2:] == (14, 18)
    assert out.pix_features[1].shape[-2:] == (7, 9)
    for p, f in zip(out.pix_preds, out.pix_features):
        assert p["class"].shape[1] == 3 and p["box"].shape[1] == 4 and p["centerness"].shape[1] == 1
        assert p["class"].shape[-2:] == f.shape[-2:]
        assert (p["box"] >= 0).all()
    assert out.rho == 1
    assert out.ins_preds[0]["class"].shape == (1, 4)
    assert out.rois[:, 0].tolist() == [0.0]


def test_no_rois_without_instance_head():
    det = ToyDetector(instance_head=False, width=8)
    out = det(torch.rand(1, 3, 32, 32), [np.array([[0, 0, 8, 8]])])
    assert out.rho == 0 and out.ins_features == []


def test_seeded_init_leaves_global_rng_alone():
    torch.manual_seed(5)
    before = torch.rand(1)
    torch.manual_seed(5)
    ToyDetector(seed=3)
    assert torch.equal(torch.rand(1), before)
    a, b = ToyDetector(seed=3), ToyDetector(seed=3)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb)


def test_degenerate_rois_are_dropped():
    det = ToyDetector(width=8)
    out = det(torch.rand(1, 3, 32, 32), [np.array([[5, 5, 5, 9], [0, 0, 8, 8], [40, 40, 50, 50]])])
    assert out.roi_keep[0].tolist() == [1]


def test_encode_targets_centerness_hand_case():
    t = encode_level_targets([(np.array([[0, 0, 16, 8]]), np.array([1]))], (2, 4), 4, 0)
    assert t.classes[0].tolist() == [[2, 2, 2, 2], [2, 2, 2, 2]]
    # cell (0, 0) center (2, 2): ltrb = (2, 2, 14, 6)
    assert t.boxes[0, :, 0, 0].tolist() == [2, 2, 14, 6]
    assert float(t.centerness[0, 0, 0, 0]) == pytest.approx(np.sqrt(2 / 14 * 2 / 6), rel=1e-6)


def test_decode_ideal_outputs_recovers_boxes():
    for seed in range(5):
        scene = make_scene(seed, canvas=64)
        out = render_outputs([scene.labels], scene.size, num_classes=3)
        dets = decode_detections(out, score_thresh=0.05, kind="pseudo")
        res = evaluate_detections(dets, [scene.labels], num_classes=3)
        assert res["map"] == pytest.approx(1.0)


def test_decode_pseudo_scores_below_one():
    scene = make_scene(0)
    out = render_outputs([scene.labels], scene.size, num_classes=3, logit=60.0)
    out.pix_preds = [{**p, "centerness": torch.full_like(p["centerness"], 60.0)} for p in out.pix_preds]
    labels = decode_detections(out, kind="pseudo")[0]
    assert len(labels.boxes) > 0
    assert all(b.score < 1.0 for b in labels.boxes)


def test_box_iou_and_deltas():
    a = np.array([[0, 0, 10, 10]])
    b = np.array([[5, 0, 15, 10], [20, 20, 30, 30]])
    np.testing.assert_allclose(box_iou_np(a, b), [[50 / 150, 0.0]])
    np.testing.assert_allclose(box_deltas(a.astype(float), a.astype(float)), [[0, 0, 0, 0]])


def test_training_rois_layout():
    rng = np.random.default_rng(0)
    xyxy = np.array([[10, 10, 30, 30], [40, 5, 60, 20]], dtype=float)
    rois = sample_training_rois(xyxy, (64, 64), rng, n_background=4, n_hard=2)
    assert rois.shape == (2 + 2 + 4 + 4, 4)
    np.testing.assert_array_equal(rois[:2], xyxy)
    bg = rois[-4:]
    assert (bg[:, 2] > bg[:, 0]).all() and (bg[:, 2] <= 64).all() and (bg[:, 3] <= 64).all()


def test_roi_targets():
    det = ToyDetector(width=8)
    gt = (np.array([[0, 0, 16, 16]]), np.array([2]))
    out = det(torch.rand(1, 3, 32, 32), [np.array([[0, 0, 16, 16], [0, 0, 16, 15], [20, 20, 30, 30]])])
    classes, deltas = roi_targets(out, [gt])
    assert classes.tolist() == [3, 3, 0]
    np.testing.assert_allclose(deltas[0], 0, atol=1e-12)


def test_images_to_tensor_layout(scene):
    x = images_to_tensor([scene, scene])
    assert x.shape == (2, 3, *scene.size)
    assert float(x[0, 1, 2, 3]) == pytest.approx(scene.pixels[2, 3, 1], abs=1e-6)
