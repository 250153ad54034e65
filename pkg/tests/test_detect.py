import copy
import math

import numpy as np
import pytest

from radarbox import detect as D
from radarbox import neural as nn
from radarbox.core import Box3D, bev_iou, bev_iou_matrix
from radarbox.dataio import FusedCloud

from oracles import greedy_nms, inside_footprint, random_box


def _cloud(xyz, labels=(), priors=None, seed=0):
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    pts = np.column_stack([xyz, rng.normal(0, 2, len(xyz)), rng.uniform(0, 2, len(xyz)),
                           rng.uniform(0.5, 1, len(xyz))])
    return FusedCloud(pts, np.zeros(len(xyz), int), labels=list(labels), heading_priors=priors)


def _car_cloud(seed, n=40, box=Box3D(6.0, 1.0, 0.75, 1.8, 1.5, 4.5, 0.4), clutter=10):
    """Points on a car's footprint plus uniform clutter."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-box.l / 2, box.l / 2, n)
    v = rng.choice([-box.w / 2, box.w / 2], n) + rng.normal(0, 0.05, n)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    car = np.column_stack([box.cx + c * u - s * v, box.cy + s * u + c * v, rng.uniform(0.3, 1.2, n)])
    noise = rng.uniform([0, -8, 0], [16, 8, 2], size=(clutter, 3))
    return _cloud(np.vstack([car, noise]), [box], seed=seed)


class TestSampling:
    def test_exact_size_is_permutation(self):
        fc = _cloud(np.random.default_rng(0).normal(size=(70, 3)))
        sc = D.sample_cloud(fc, 70, 1)
        assert sorted(sc.source_index.tolist()) == list(range(70))

    def test_short_cloud_repeats_evenly(self):
        fc = _cloud(np.random.default_rng(0).normal(size=(10, 3)))
        sc = D.sample_cloud(fc, 70, 1)
        assert np.bincount(sc.source_index).tolist() == [7] * 10

    def test_deterministic_subset(self):
        fc = _cloud(np.random.default_rng(0).normal(size=(200, 3)))
        a, b = D.sample_cloud(fc, 70, 5), D.sample_cloud(fc, 70, 5)
        assert np.array_equal(a.features, b.features)
        assert len(set(a.source_index.tolist())) == 70

    def test_empty_cloud(self):
        assert D.sample_cloud(_cloud(np.zeros((0, 3))), 70, 0).features.shape == (0, 6)


class TestAnchors:
    def test_count_and_dims(self):
        xyz = np.random.default_rng(0).normal(size=(70, 3))
        boxes, pidx, place, _ = D.generate_anchors(xyz)
        assert boxes.shape == (350, 7)
        assert np.all(boxes[:, 3:6] == [2.0, 2.0, 5.0])
        assert np.array_equal(pidx, np.repeat(np.arange(70), 5))
        assert np.array_equal(place, np.tile(np.arange(5), 70))

    def test_centre_placement(self):
        boxes, *_ = D.generate_anchors(np.array([[1.0, 2.0, 0.3]]))
        assert np.array_equal(boxes[0, :3], [1.0, 2.0, 0.3])

    def test_front_placement_with_prior(self):
        boxes, _, _, has = D.generate_anchors(np.array([[1.0, 2.0, 0.0]]), np.array([math.pi / 2]))
        assert has.all()
        assert np.allclose(boxes[1, :2], [1.0, 4.5], atol=1e-12)
        assert np.allclose(boxes[3, :2], [0.0, 2.0], atol=1e-12)  # left of +y heading is -x

    def test_point_on_anchor_footprint(self):
        rng = np.random.default_rng(1)
        xyz = rng.normal(0, 5, size=(50, 3))
        pri = np.where(rng.random(50) < 0.5, rng.uniform(-3, 3, 50), np.nan)
        boxes, pidx, *_ = D.generate_anchors(xyz, pri)
        for b, i in zip(boxes, pidx):
            loc = np.abs(D.anchor_local_coords(xyz[i:i + 1], b[None])[0, 0])
            assert loc[0] <= 2.5 + 1e-9 and loc[1] <= 1.0 + 1e-9

    def test_missing_prior_uses_zero(self):
        boxes, _, _, has = D.generate_anchors(np.zeros((2, 3)), np.array([np.nan, 0.3]))
        assert has.tolist() == [False] * 5 + [True] * 5
        assert np.all(boxes[:5, 6] == 0.0)


class TestRoiPool:
    def test_exact_k_members(self):
        xyz = np.column_stack([np.linspace(-2, 2, 32), np.zeros(32), np.zeros(32)])
        anchor = np.array([[0, 0, 0, 2, 2, 5, 0.0]])
        roi = D.roi_pool(xyz, anchor, 32, 0)
        assert sorted(roi.index[0].tolist()) == list(range(32))

    def test_short_members_repeat(self):
        xyz = np.vstack([np.column_stack([np.linspace(-2, 2, 8), np.zeros(8), np.zeros(8)]),
                         [[30.0, 0, 0]]])
        roi = D.roi_pool(xyz, np.array([[0, 0, 0, 2, 2, 5, 0.0]]), 32, 0)
        assert np.bincount(roi.index[0], minlength=9).tolist() == [4] * 8 + [0]

    def test_membership_matches_local_frame_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            xyz = rng.uniform(-5, 5, size=(80, 3))
            anchors = np.array([random_box(rng, 3.0) for _ in range(15)])
            inside, _ = D.roi_membership(xyz, anchors)
            for a, b in enumerate(anchors):
                want = inside_footprint(xyz[:, :2], b) & (np.abs(xyz[:, 2] - b[2]) <= b[4] / 2)
                assert np.array_equal(inside[a], want)

    def test_empty_anchor_flagged(self):
        roi = D.roi_pool(np.array([[50.0, 0, 0]]), np.array([[0, 0, 0, 2, 2, 5, 0.0]]), 32, 0)
        assert roi.empty[0] and not roi.local[0].any()

    def test_local_coordinates(self):
        xyz = np.array([[1.0, 1.0, 0.5]])
        anchor = np.array([[1.0, 0.0, 0.0, 2, 2, 5, math.pi / 2]])
        roi = D.roi_pool(xyz, anchor, 4, 0)
        assert np.allclose(roi.local[0, 0], [1.0, 0.0, 0.5], atol=1e-12)


def _prepared(seed=0, tcfg=None):
    tcfg = tcfg or D.TrainConfig()
    return D.prepare_scene(_car_cloud(seed), tcfg, seed)


class TestNetwork:
    def test_compact_rows_equal_tiled_layout(self):
        ps = _prepared(3)
        net = D.RPNet(D.network_preset("desk", input_channels=D.CHANNELS))
        net2 = copy.deepcopy(net)
        rng = np.random.default_rng(0)
        c1, d1 = net.forward(ps.features, ps.roi, train=True)
        c2, d2 = net2.forward(ps.features, ps.roi, train=True, tiled=True)
        assert np.allclose(c1, c2, atol=1e-12) and np.allclose(d1, d2, atol=1e-12)
        gc, gd = rng.normal(size=c1.shape), rng.normal(size=d1.shape)
        net.zero_grad(), net2.zero_grad()
        net.backward(gc, gd)
        net2.backward(gc, gd)
        for (name, a), (_, b) in zip(net.named_layers(), net2.named_layers()):
            for k in a.grads:
                assert np.allclose(a.grads[k], b.grads[k], rtol=1e-9, atol=1e-10), (name, k)
            for k in a.buffers:
                assert np.allclose(a.buffers[k], b.buffers[k], rtol=1e-12, atol=1e-14), (name, k)

    def test_folded_eval_equals_layerwise_eval(self):
        ps = _prepared(4)
        net = D.RPNet(D.network_preset("desk"))
        for _ in range(3):
            net.forward(ps.features, ps.roi, train=True)  # move running stats off identity
        c1, d1 = net.forward(ps.features, ps.roi, train=False)
        c2, d2 = net.forward(ps.features, ps.roi, train=False, tiled=True)
        assert np.allclose(c1, c2, atol=1e-12) and np.allclose(d1, d2, atol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        xyz = rng.uniform([-10, -10, 0], [10, 10, 2], size=(70, 3))
        feats = np.column_stack([xyz, rng.normal(size=(70, 2)), rng.random(70)])
        net = D.RPNet(D.network_preset("desk"))
        anchors, *_ = D.generate_anchors(xyz)
        roi = D.roi_pool(xyz, anchors, 32, 0)
        assert roi.counts.max() <= 32  # every member is pooled whatever the draw
        conf, _ = net.forward(feats, roi)
        perm = rng.permutation(70)
        anchors_p, *_ = D.generate_anchors(xyz[perm])
        conf_p, _ = net.forward(feats[perm], D.roi_pool(xyz[perm], anchors_p, 32, 9))
        a_perm = (5 * perm[:, None] + np.arange(5)).ravel()
        assert np.array_equal(conf_p, conf[a_perm])

    def test_within_roi_permutation_invariance(self):
        ps = _prepared(6)
        net = D.RPNet(D.network_preset("desk"))
        conf, _ = net.forward(ps.features, ps.roi)
        rng = np.random.default_rng(0)
        p = np.argsort(rng.random(ps.roi.index.shape), axis=1)
        roi2 = D.RoiBatch(np.take_along_axis(ps.roi.index, p, 1),
                          np.take_along_axis(ps.roi.local, p[..., None], 1), ps.roi.empty, ps.roi.counts)
        assert np.array_equal(net.forward(ps.features, roi2)[0], conf)

    def test_confidence_range_and_empty_anchors(self):
        ps = _prepared(7)
        conf, deltas = D.RPNet(D.network_preset("desk")).forward(ps.features, ps.roi)
        assert np.all((conf >= 0) & (conf <= 1))
        assert np.all(conf[ps.roi.empty] == 0.0)
        assert deltas.shape == (len(conf), 7)

    def test_checkpoint_round_trip(self, tmp_path):
        ps = _prepared(8)
        net = D.RPNet(D.network_preset("desk", seed=3))
        net.forward(ps.features, ps.roi, train=True)
        net.save(tmp_path / "n.ckpt", {"note": "x"})
        back, meta = D.RPNet.load(tmp_path / "n.ckpt")
        assert meta["note"] == "x"
        a = net.forward(ps.features, ps.roi)
        b = back.forward(ps.features, ps.roi)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestRefinement:
    def test_zero_output_keeps_anchor(self):
        ps = _prepared(9)
        _, deltas = D.RPNet(D.network_preset("desk")).forward(ps.features, ps.roi)
        assert not deltas.any()
        assert np.array_equal(D.apply_refinement(ps.anchors, deltas), ps.anchors)

    def test_additivity(self):
        rng = np.random.default_rng(0)
        anchors = np.array([random_box(rng) for _ in range(20)])
        deltas = rng.normal(0, 0.1, size=(20, 7))
        out = D.apply_refinement(anchors, deltas)
        # tuple order h, w, l, x, y, z, yaw
        want = anchors.copy()
        for j, col in enumerate([4, 3, 5, 0, 1, 2, 6]):
            want[:, col] += deltas[:, j]
        assert np.array_equal(out, want)

    def test_targets_invert_refinement(self):
        rng = np.random.default_rng(1)
        a = np.array([random_box(rng) for _ in range(30)])
        g = np.array([random_box(rng) for _ in range(30)])
        t = D.refinement_targets(a, g)
        assert np.all(np.abs(t[:, 6]) <= math.pi / 2 + 1e-12)
        r = D.apply_refinement(a, t)
        for x, y in zip(r, g):
            assert bev_iou(Box3D.from_array(x), Box3D.from_array(y)) == pytest.approx(1.0, abs=1e-9)


class TestNms:
    def test_disjoint_all_kept(self):
        boxes = np.array([[10.0 * i, 0, 0, 1, 1, 1, 0] for i in range(6)])
        assert sorted(D.nms(boxes, np.random.default_rng(0).random(6))) == list(range(6))

    def test_identical_keeps_higher(self):
        b = np.array([[0, 0, 0, 2, 2, 5, 0.3]] * 2)
        assert D.nms(b, [0.8, 0.9]) == [1]

    def test_ties_prefer_lower_index(self):
        b = np.array([[0, 0, 0, 2, 2, 5, 0.3]] * 3)
        assert D.nms(b, [0.5, 0.5, 0.5]) == [0]

    def test_matches_greedy_oracle(self):
        rng = np.random.default_rng(3)
        iou = lambda a, b: bev_iou(Box3D.from_array(a), Box3D.from_array(b))
        for k in range(25):
            n = int(rng.integers(1, 80))
            boxes = np.array([random_box(rng, 4.0) for _ in range(n)])
            conf = np.round(rng.random(n), 1)  # plenty of ties
            thr = rng.uniform(0.1, 0.7)
            assert D.nms(boxes, conf, thr) == greedy_nms(boxes, conf, thr, iou)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            D.nms(np.zeros((2, 7)) + [0, 0, 0, 1, 1, 1, 0], [0.5])


class TestTargets:
    def test_identical_anchor(self):
        g = np.array([[3.0, 1, 0.5, 2, 2, 5, 0.2]])
        tg = D.assign_targets(g.copy(), g)
        assert tg.labels[0] == 1 and not tg.refine[0].any()

    def test_low_iou_negative(self):
        a = np.array([[0.0, 0, 0, 2, 2, 5, 0]])
        # shifted along the length so the overlap x satisfies x / (10 - x) = 0.1
        g = a.copy()
        g[0, 0] = 5 - 10 / 11
        iou = bev_iou(Box3D.from_array(a[0]), Box3D.from_array(g[0]))
        assert iou == pytest.approx(0.1, abs=1e-9)
        assert D.assign_targets(a, g).labels[0] == 0

    def test_topk_matches_full_sort(self):
        rng = np.random.default_rng(4)
        anchors = np.array([random_box(rng, 5.0) for _ in range(300)])
        gt = np.array([random_box(rng, 5.0) for _ in range(3)])
        tg = D.assign_targets(anchors, gt, top_k=100)
        score = bev_iou_matrix(anchors, gt).max(axis=1)
        oracle = sorted(range(300), key=lambda i: (-score[i], i))[:100]
        assert tg.topk.tolist() == oracle

    def test_no_gt_all_negative(self):
        tg = D.assign_targets(np.array([[0.0, 0, 0, 2, 2, 5, 0]] * 4), np.zeros((0, 7)))
        assert not tg.labels.any()


class TestTraining:
    def test_overfit_single_scene(self):
        fc = _car_cloud(11)
        tc = D.TrainConfig(epochs=200, warmup_epochs=30, learning_rate=2e-3)
        res = D.train([fc], tc, D.network_preset("desk"))
        assert res.loss_trace[-1] <= 0.1 * res.loss_trace[0]

    def test_deterministic_trace(self):
        data = [_car_cloud(s) for s in range(3)]
        tc = D.TrainConfig(epochs=3, warmup_epochs=1, seed=2)
        a = D.train(data, tc, D.network_preset("desk"))
        b = D.train(data, tc, D.network_preset("desk"))
        assert a.loss_trace == b.loss_trace
        assert all(np.array_equal(x, y) for x, y in zip(a.network.parameters(), b.network.parameters()))

    def test_warmup_schedule_is_live(self):
        data = [_car_cloud(s) for s in range(3)]
        a = D.train(data, D.TrainConfig(epochs=4, warmup_epochs=0), D.network_preset("desk"))
        b = D.train(data, D.TrainConfig(epochs=4, warmup_epochs=30), D.network_preset("desk"))
        assert a.loss_trace != b.loss_trace

    def test_gt_free_scenes(self):
        rng = np.random.default_rng(0)
        data = [_cloud(rng.uniform([0, -8, 0], [16, 8, 2], size=(40, 3)), seed=i) for i in range(3)]
        res = D.train(data, D.TrainConfig(epochs=60, learning_rate=2e-3), D.network_preset("desk"))
        assert all(r == 0.0 for r in res.ref_trace)
        assert res.loss_trace[-1] < res.loss_trace[0]
        for i, fc in enumerate(data):
            assert D.predict(fc, res.network, 0.5, seed=i) == []

    def test_divergence_raises_with_state(self, tmp_path):
        fc = _car_cloud(1)
        fc.points[:, 3] = np.nan
        with pytest.raises(D.TrainingDiverged) as ei:
            D.train([fc], D.TrainConfig(epochs=2), D.network_preset("desk"), dump_dir=tmp_path)
        assert ei.value.state["epoch"] == 0
        assert (tmp_path / "diverged.json").exists()

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            D.train([], D.TrainConfig(epochs=1))


class TestPredict:
    def test_empty_cloud(self):
        net = D.RPNet(D.network_preset("desk"))
        assert D.predict(_cloud(np.zeros((0, 3))), net) == []

    def test_outputs_sorted_and_suppressed(self):
        net = D.RPNet(D.network_preset("desk", seed=4))
        dets = D.predict(_car_cloud(2), net, conf_floor=0.0)
        conf = [d.confidence for d in dets]
        assert conf == sorted(conf, reverse=True)
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                assert bev_iou(dets[i].box, dets[j].box) <= 0.5

    def test_trained_detector_finds_clean_car(self):
        data = [_car_cloud(s, clutter=0) for s in range(4)]
        res = D.train(data, D.TrainConfig(epochs=80, warmup_epochs=20, learning_rate=2e-3),
                      D.network_preset("desk"))
        dets = D.predict(data[0], res.network, 0.5)
        assert any(bev_iou(d.box, data[0].labels[0]) > 0.2 for d in dets)


class TestBaseline:
    def test_collinear_x(self):
        xy = np.column_stack([np.linspace(0, 4, 9), np.zeros(9)])
        assert abs(D.pca_yaw(xy)) < 1e-12

    def test_diagonal(self):
        t = np.linspace(0, 4, 9)
        assert D.pca_yaw(np.column_stack([t, t])) == pytest.approx(math.pi / 4, abs=1e-12)

    def test_matches_closed_form_eigenvector(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            xy = rng.normal(size=(20, 2)) @ rng.normal(size=(2, 2))
            c = np.cov(xy.T)
            want = 0.5 * math.atan2(2 * c[0, 1], c[0, 0] - c[1, 1])
            got = D.pca_yaw(xy)
            assert abs((got - want + math.pi / 2) % math.pi - math.pi / 2) < 1e-9

    def test_one_box_per_cluster(self):
        fc = _cloud(np.vstack([np.random.default_rng(0).normal([5, 0, 1], 0.2, (10, 3)),
                               np.random.default_rng(1).normal([5, 6, 1], 0.2, (5, 3))]))
        dets = D.baseline_cluster_pca(fc)
        assert len(dets) == 2
        assert dets[0].confidence == pytest.approx(10 / 15)
        assert all((d.box.w, d.box.h, d.box.l) == (2.0, 2.0, 5.0) for d in dets)

    def test_small_cluster_yaw_zero(self):
        assert D.pca_yaw(np.zeros((1, 2))) == 0.0
