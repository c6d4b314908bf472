import math
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pillarcoral import autodiff as ad
from pillarcoral.config import desk_lidar
from pillarcoral.coral import reshape_feature_map
from pillarcoral.core import Box3D, ClassId, Dataset, Domain, Frame, PointCloud
from pillarcoral.detector import (
    AnchorGrid, CoralConfig, LossWeights, NetworkConfig, PillarBatch, PillarNet, TrainConfig, backbone_forward,
    build_targets, decode, detection_loss, encode, head_forward, infer, load_model, match_anchors, pfn_forward,
    save_model, split_direction, total_loss, train,
)
from pillarcoral.detector.network import NetOutput
from pillarcoral.errors import CheckpointMismatch, ConfigError, EmptyDataset, NumericalDivergence
from pillarcoral.evaluation import bev_iou
from pillarcoral.pillar import PillarTensor, desk_grid, full_scale_grid, pillarize
from pillarcoral.scenegen import GapConfig, SceneConfig, generate_dataset

from conftest import random_cloud

DESK = desk_grid()
NET = NetworkConfig()


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(SceneConfig(lidar=desk_lidar()), GapConfig(), 4, 0)


def test_full_scale_shapes():
    start = time.perf_counter()
    net = PillarNet(NetworkConfig(channels=64), full_scale_grid())
    fm = backbone_forward(ad.Tensor(np.zeros((1, 64, 400, 400))), net)
    assert fm.shape == (1, 256, 50, 50)
    assert reshape_feature_map(fm.data).data.shape == (256, 2500)
    assert time.perf_counter() - start < 10


def test_desk_shapes():
    net = PillarNet(NET, DESK)
    fm = backbone_forward(ad.Tensor(np.random.default_rng(0).normal(size=(2, 16, 32, 32))), net, train=True)
    assert fm.shape == (2, 64, 4, 4)
    out = head_forward(fm.data[:1], net)
    assert len(AnchorGrid.build(DESK, NET)) == 64
    assert out.cls.shape == (1, 64, 2) and out.reg.shape == (1, 64, 7) and out.dir.shape == (1, 64, 2)


def test_zero_input_gives_zero_features():
    net = PillarNet(NET, DESK)
    assert not backbone_forward(ad.Tensor(np.zeros((1, 16, 32, 32))), net).data.any()


def test_zero_head_weights_give_even_odds():
    net = PillarNet(NET, DESK)
    for name in ("cls", "reg", "dir"):
        net.params[f"head.{name}.weight"].data[:] = 0
        net.params[f"head.{name}.bias"].data[:] = 0
    out = head_forward(np.random.default_rng(1).normal(size=(1, 64, 4, 4)), net)
    np.testing.assert_array_equal(ad.sigmoid(out.cls).data, 0.5)
    np.testing.assert_array_equal(ad.softmax(out.dir).data, 0.5)


def test_eval_forward_is_deterministic(tiny_data):
    from pillarcoral.core import clip_to_range
    net = PillarNet(NET, DESK, seed=3)
    cloud = clip_to_range(tiny_data[0].frames[0].cloud, DESK.range)
    batch = PillarBatch.collate([pillarize(cloud, DESK, 0), pillarize(PointCloud(), DESK)], DESK)
    a, b = net.forward(batch), net.forward(batch)
    assert a.cls.data.tobytes() == b.cls.data.tobytes()


def test_empty_pillars_give_zero_image():
    net = PillarNet(NET, DESK)
    img = pfn_forward(pillarize(PointCloud(), DESK), net)
    assert img.data.shape == (16, 32, 32) and not img.data.any()


def test_single_point_pillar_is_its_own_max():
    net = PillarNet(NET, DESK, seed=2)
    pt = pillarize(PointCloud([[0.2, 0.3, -1.0, 0.5], [-5.0, 6.0, -1.5, 0.1]]), DESK)
    img = pfn_forward(pt, net)
    w, b = net.params["pfn.linear.weight"].data, net.params["pfn.linear.bias"].data
    y = w @ pt.features[:, 0, 0] + b
    st_ = net.bn["pfn.bn"]
    expected = np.maximum((y - st_.running_mean) / np.sqrt(st_.running_var + NET.bn_eps), 0)
    r, c = pt.pillar_coords[0]
    np.testing.assert_allclose(img.data[:, r, c], expected, atol=1e-12)
    assert np.count_nonzero(np.abs(img.data).sum(axis=0)) <= 2


@given(st.integers(0, 2**31))
def test_pfn_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    net = PillarNet(NET, DESK, seed=seed % 7)
    pt = pillarize(random_cloud(rng, 150, extent=3.0, z=(-2.5, 0.5)), DESK, seed)
    feats = pt.features.copy()
    for p, k in enumerate(pt.pillar_counts):
        feats[:, p, :k] = feats[:, p, rng.permutation(k)]
    shuffled = PillarTensor(feats, pt.pillar_coords, pt.pillar_counts)
    for train_mode in (False, True):
        a = pfn_forward(pt, net, train_mode).data
        b = pfn_forward(shuffled, net, train_mode).data
        np.testing.assert_allclose(a, b, atol=1e-12)


# -- anchors and matching -------------------------------------------------------------

def test_match_examples():
    anchors = AnchorGrid.build(DESK, NET)
    none = match_anchors(anchors, [], NET)
    assert none.n_pos == 0 and np.all(none.negative)

    a = anchors.boxes[21]
    cls = [ClassId.Car, ClassId.Pedestrian][anchors.class_index[21]]
    exact = Box3D(tuple(a[:3]), tuple(a[3:6]), float(a[6]), cls)
    m = match_anchors(anchors, [exact], NET)
    assert m.assignment[21] == 0 and m.max_iou[21] == pytest.approx(1.0, abs=1e-12)


def test_best_anchor_is_forced_positive():
    anchors = AnchorGrid.build(DESK, NET)
    car_anchor = np.nonzero((anchors.class_index == 0) & (anchors.boxes[:, 6] == 0.0))[0][5]
    a = anchors.boxes[car_anchor]
    shift = a[4] * 0.7 / 1.3  # y offset giving IoU (w - d) / (w + d) = 0.3
    gt = Box3D((a[0], a[1] + shift, a[2]), tuple(a[3:6]), 0.0, ClassId.Car)
    oracle = [bev_iou(b, gt) if k == 0 else 0.0 for b, k in zip(anchors.to_boxes(), anchors.class_index)]
    assert max(oracle) == pytest.approx(0.3, abs=1e-9)
    assert int(np.argmax(oracle)) == car_anchor
    m = match_anchors(anchors, [gt], NET)
    assert m.assignment[car_anchor] == 0
    assert m.n_pos == 1


def test_match_is_class_strict():
    anchors = AnchorGrid.build(DESK, NET)
    ped_anchor = np.nonzero(anchors.class_index == 1)[0][0]
    a = anchors.boxes[ped_anchor]
    gt = Box3D(tuple(a[:3]), tuple(a[3:6]), float(a[6]), ClassId.Pedestrian)
    m = match_anchors(anchors, [gt], NET)
    assert np.all(anchors.class_index[m.positive] == 1)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(0)
    n = 1000
    anchor = np.column_stack([rng.uniform(-8, 8, (n, 3)), rng.uniform(0.3, 5, (n, 3)), rng.uniform(-math.pi, math.pi, n)])
    gt = np.column_stack([rng.uniform(-8, 8, (n, 3)), rng.uniform(0.3, 5, (n, 3)), rng.uniform(-math.pi, math.pi, n)])
    back = decode(encode(gt, anchor), anchor)
    np.testing.assert_allclose(back[:, :6], gt[:, :6], atol=1e-9)
    dyaw = np.angle(np.exp(1j * (back[:, 6] - gt[:, 6])))
    assert np.max(np.abs(dyaw)) < 1e-9


@given(st.floats(-math.pi, math.pi))
def test_direction_split_reassembles(dtheta):
    folded, d = split_direction(np.array([dtheta]))
    assert -math.pi / 2 - 1e-12 <= folded[0] <= math.pi / 2 + 1e-12
    recon = folded[0] + (math.pi if d[0] else 0.0)
    assert math.isclose(math.cos(recon), math.cos(dtheta), abs_tol=1e-9)
    assert math.isclose(math.sin(recon), math.sin(dtheta), abs_tol=1e-9)


# -- losses ------------------------------------------------------------------------

def test_focal_and_smooth_l1_examples():
    focal = ad.sigmoid_focal_loss(ad.Tensor([[0.0]]), [[1.0]]).item()
    assert focal == pytest.approx(-0.25 * 0.25 * math.log(0.5), abs=1e-15)
    assert round(focal, 5) == 0.04332
    assert ad.smooth_l1(ad.Tensor([0.5]), beta=1.0).item() == 0.125


def test_total_loss_examples():
    w = LossWeights(1.0, 2.0, 0.2, 1e8)
    assert total_loss(2.0, 1.0, 0.5, 1e-9, w, 2) == pytest.approx(2.15, abs=1e-12)
    assert total_loss(0.0, 0.0, 0.0, 0.0, w, 0) == 0.0
    assert total_loss(2.0, 1.0, 0.5, 5.0, replace(w, da=0.0), 2) == pytest.approx(2.05)


@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.integers(0, 4), st.floats(0, 10), st.integers(0, 20))
def test_total_loss_is_monotone(losses, which, bump, n_pos):
    w = LossWeights(1.0, 2.0, 0.2, 3.0)
    base = total_loss(*losses, w, n_pos)
    more = list(losses)
    if which < 4:
        more[which] += bump
        assert total_loss(*more, w, n_pos) >= base
    else:
        assert total_loss(*losses, replace(w, da=w.da + bump), n_pos) >= base
    with pytest.raises(ConfigError):
        total_loss(*losses, replace(w, cls=-1.0), n_pos)


def _manual_targets(n_anchor=4):
    from pillarcoral.detector import Targets
    cls = np.zeros((n_anchor, 2))
    cls[1, 0] = cls[3, 1] = 1.0
    weight = np.array([1.0, 1.0, 0.0, 1.0])
    reg = np.array([[0.1, -0.2, 0.05, 0.0, 0.1, -0.1, 0.3], [-0.4, 0.2, 0.0, 0.2, 0.0, 0.1, -0.5]])
    return Targets(cls, weight, np.array([1, 3]), reg, np.array([0, 1]))


def test_perfect_predictions_have_zero_loss():
    t = _manual_targets()
    logits = np.where(t.cls > 0, 60.0, -60.0)
    reg = np.zeros((4, 7))
    reg[t.pos_index] = t.reg
    dirs = np.zeros((4, 2))
    dirs[t.pos_index, t.dir] = 60.0
    out = NetOutput(ad.Tensor(np.zeros((1, 1, 1, 1))), ad.Tensor(logits[None]), ad.Tensor(reg[None]), ad.Tensor(dirs[None]))
    l_cls, l_loc, l_dir, n_pos = detection_loss(out, [t], NET)
    assert n_pos == 2
    assert l_cls.item() < 1e-9 and l_loc.item() < 1e-9 and l_dir.item() < 1e-9


def test_detection_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    t = _manual_targets()
    arrays = [rng.normal(size=(1, 4, 2)), rng.normal(size=(1, 4, 7)) * 0.3, rng.normal(size=(1, 4, 2))]
    w = LossWeights.from_configs(NET)

    def value(arrs):
        out = NetOutput(ad.Tensor(np.zeros((1, 1, 1, 1))), *[ad.Tensor(a) for a in arrs])
        l_cls, l_loc, l_dir, n_pos = detection_loss(out, [t], NET)
        return total_loss(l_cls, l_loc, l_dir, 0.0, w, n_pos)

    params = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = NetOutput(ad.Tensor(np.zeros((1, 1, 1, 1))), *params)
        l_cls, l_loc, l_dir, n_pos = detection_loss(out, [t], NET)
        loss = total_loss(l_cls, l_loc, l_dir, 0.0, w, n_pos)
    grads = tape.gradient(loss, params)
    eps = 1e-6
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            hi = [x.copy() for x in arrays]
            lo = [x.copy() for x in arrays]
            hi[k][idx] += eps
            lo[k][idx] -= eps
            num[idx] = (value(hi).item() - value(lo).item()) / (2 * eps)
        assert np.linalg.norm(num - grads[k]) / max(np.linalg.norm(num), 1e-12) < 1e-5
    # ignored anchors receive no classification gradient
    assert not grads[0][0, 2].any()


def test_targets_from_scene(tiny_data):
    anchors = AnchorGrid.build(DESK, NET)
    frame = tiny_data[0].frames[0]
    t = build_targets(anchors, frame.boxes, NET)
    m = match_anchors(anchors, frame.boxes, NET)
    assert t.n_pos == m.n_pos >= len([b for b in frame.boxes if b.class_id == ClassId.Car])
    assert np.all(np.abs(t.reg[:, 6]) <= math.pi / 2 + 1e-12)


# -- training ---------------------------------------------------------------------

def _one_frame(tiny_data):
    return tiny_data[0].with_frames(tiny_data[0].frames[:1])


def test_overfitting_one_batch_decreases_loss(tiny_data):
    res = train(_one_frame(tiny_data), None, DESK, NET, CoralConfig(), TrainConfig(batch_size=1, epochs=50, lr=1e-3))
    total = np.array([row[5] for row in res.log])
    assert len(total) == 50
    assert np.all(np.diff(total) < 0)


def test_training_is_deterministic(tiny_data):
    sim, real = tiny_data
    cfg = TrainConfig(batch_size=2, epochs=1, seed=5)
    a = train(sim, real, DESK, NET, CoralConfig(beta_da=10.0), cfg)
    b = train(sim, real, DESK, NET, CoralConfig(beta_da=10.0), cfg)
    assert a.log == b.log
    assert all(row[4] > 0 for row in a.log)


def test_coral_term_vanishes_for_identical_domains():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 60, extent=7.0, z=(-2.5, 0.5))
    ds = Dataset((Frame(cloud, (Box3D((1.0, 1.0, -1.0), (4.0, 1.8, 1.5), 0.0, ClassId.Car),), "000000",
                        Domain.Simulated),))
    res = train(ds, ds, DESK, NET, CoralConfig(beta_da=1.0), TrainConfig(batch_size=1, epochs=1))
    assert abs(res.log[0][4]) < 1e-12


def test_beta_zero_logs_zero_coral(tiny_data):
    res = train(*tiny_data, DESK, NET, CoralConfig(), TrainConfig(batch_size=2, epochs=1))
    assert all(row[4] == 0.0 for row in res.log)


def test_training_errors(tiny_data):
    sim, real = tiny_data
    with pytest.raises(EmptyDataset):
        train(sim, None, DESK, NET, CoralConfig(beta_da=1.0), TrainConfig(epochs=1))
    with pytest.raises(NumericalDivergence):
        train(sim, real, DESK, NET, CoralConfig(), TrainConfig(batch_size=2, epochs=2, lr=1e6))
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        CoralConfig(hook="head")


def test_sgd_and_pseudo_image_hook(tiny_data):
    res = train(*tiny_data, DESK, NET, CoralConfig(beta_da=1.0, hook="pseudo_image"),
                TrainConfig(batch_size=2, epochs=1, optimizer="sgd", lr=1e-3))
    assert len(res.log) == 2 and all(row[4] > 0 for row in res.log)


# -- inference and checkpoints ------------------------------------------------------------

def test_infer_edge_cases(tiny_data):
    net = PillarNet(NET, DESK)
    frame = tiny_data[0].frames[0]
    assert infer(frame.replace(cloud=PointCloud()), net) == []
    assert infer(frame, net, score_threshold=1.0) == []
    preds = infer(frame, net, score_threshold=0.0)
    scores = [p.score for p in preds]
    assert scores == sorted(scores, reverse=True)
    assert all(p.is_prediction for p in preds)


def test_infer_suppresses_duplicates():
    net = PillarNet(NET, DESK)
    # make every car anchor confident and regress all of them onto one box
    net.params["head.cls.bias"].data[:] = 5.0
    net.params["head.reg.weight"].data[:] = 0.0
    net.params["head.reg.bias"].data[:] = 0.0
    frame = Frame(random_cloud(np.random.default_rng(0), 200, extent=7.0, z=(-2.5, 0.5)), (), "000000")
    preds = infer(frame, net, score_threshold=0.5, nms_iou=0.5)
    for i, a in enumerate(preds):
        for b in preds[i + 1:]:
            if a.class_id == b.class_id:
                assert bev_iou(a, b) <= 0.5


def test_checkpoint_round_trip(tmp_path, tiny_data):
    res = train(*tiny_data, DESK, NET, CoralConfig(), TrainConfig(batch_size=2, epochs=1))
    save_model(res.model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt", NET, DESK)
    for (ka, va), (kb, vb) in zip(res.model.state_dict().items(), back.state_dict().items()):
        assert ka == kb and va.tobytes() == vb.tobytes()
    frame = tiny_data[0].frames[1]
    assert infer(frame, res.model, 0.05) == infer(frame, tmp_path / "m.ckpt", 0.05)


def test_checkpoint_mismatch(tmp_path):
    net = PillarNet(NET, DESK)
    save_model(net, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointMismatch):
        load_model(tmp_path / "m.ckpt", NetworkConfig(channels=8), DESK)
    other = PillarNet(NetworkConfig(channels=8), DESK)
    with pytest.raises(CheckpointMismatch):
        other.load_state_dict(net.state_dict())


def test_cosine_schedule():
    cfg = TrainConfig(lr=2.0, lr_schedule="cosine")
    assert [cfg.lr_at(s, 4) for s in (0, 2)] == [2.0, pytest.approx(1.0)]
    assert cfg.lr_at(3, 4) == pytest.approx(1.0 - math.sqrt(0.5))
    assert TrainConfig(lr=2.0).lr_at(3, 4) == 2.0
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="step")
