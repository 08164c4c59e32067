import numpy as np
import pytest

from o2v.decoders import ColorDecoder, OccupancyDecoder, PositionalEncoder
from o2v.renderer import (
    RaySampleBatch,
    compute_losses,
    render_depth_color,
    render_language,
    render_rays,
    sample_ray,
    sample_rays,
    termination_weights,
    termination_weights_backward,
    train_step,
)
from o2v.scene import CameraIntrinsics, Pose, Ray, RGBDFrame, SceneBounds
from o2v.voxels import ObservationRecord, SparseVoxelField

WIDE = SceneBounds(np.full(3, -10.0), np.full(3, 10.0))


class TestSampling:
    def test_stratification_arithmetic(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        batch = sample_ray(ray, WIDE, n_strat=32, n_surf=8,
                           near=0.1, far=4.1, rng=np.random.default_rng(0))
        assert batch.depths.shape == (1, 32)
        d = batch.depths[0]
        for i, t in enumerate(d):
            assert 0.1 + 0.125 * i <= t <= 0.1 + 0.125 * (i + 1)

    def test_zero_gt_means_no_surface_samples(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        batch = sample_ray(ray, WIDE, gt_depth=0.0, n_strat=16, n_surf=8,
                           rng=np.random.default_rng(0))
        assert batch.depths.shape == (1, 16)

    def test_surface_samples_near_gt(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        batch = sample_ray(ray, WIDE, gt_depth=3.0, n_strat=4, n_surf=16,
                           near=0.1, far=9.0, surface_window=0.5,
                           rng=np.random.default_rng(1))
        assert batch.depths.shape == (1, 20)
        near_gt = np.abs(batch.depths[0] - 3.0) <= 0.5
        assert near_gt.sum() >= 16

    def test_strictly_sorted_random_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            o = rng.uniform(-1, 1, size=(5, 3))
            d = rng.normal(size=(5, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            gt = rng.uniform(0.5, 5.0, size=5)
            b = sample_rays(o, d, WIDE, gt_depth=gt, rng=rng)
            assert np.all(np.diff(b.depths, axis=1) > 0)

    def test_miss_gives_empty(self):
        # ray pointing away from a small box
        small = SceneBounds(np.array([5.0, 5.0, 5.0]), np.array([6.0, 6.0, 6.0]))
        b = sample_rays(np.zeros((1, 3)), np.array([[0.0, 0.0, -1.0]]), small,
                        rng=np.random.default_rng(0))
        assert not b.hit[0]

    def test_samples_inside_bounds(self):
        tight = SceneBounds(np.array([-1.0, -1.0, 0.0]), np.array([1.0, 1.0, 2.0]))
        b = sample_rays(np.array([[0.0, 0.0, 0.5]]), np.array([[0.0, 0.0, 1.0]]),
                        tight, near=0.1, far=10.0, rng=np.random.default_rng(3))
        pts = b.points()[0]
        assert tight.contains(pts).all()


class TestTerminationWeights:
    def test_opaque_first_sample(self):
        w, _ = termination_weights(np.array([1.0, 0.7, 0.2]))
        assert np.allclose(w, [1.0, 0.0, 0.0])

    def test_half_occupancy(self):
        w, _ = termination_weights(np.array([0.5, 0.5]))
        assert np.allclose(w, [0.5, 0.25])

    def test_empty_space(self):
        w, _ = termination_weights(np.zeros(5))
        assert np.allclose(w, 0.0)

    def test_sum_identity(self):
        rng = np.random.default_rng(4)
        o = rng.uniform(0, 1, size=(1000, 24))
        w, _ = termination_weights(o)
        lhs = w.sum(axis=1)
        rhs = 1.0 - np.prod(1.0 - o, axis=1)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_appending_zero_occupancy_is_noop(self):
        rng = np.random.default_rng(5)
        o = rng.uniform(0, 1, size=(10, 8))
        w1, _ = termination_weights(o)
        o2 = np.concatenate([o, np.zeros((10, 3))], axis=1)
        w2, _ = termination_weights(o2)
        assert np.allclose(w1, w2[:, :8])
        assert np.allclose(w2[:, 8:], 0.0)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        o = rng.uniform(0.05, 0.95, size=(4, 12))
        g = rng.normal(size=(4, 12))

        def loss(oo):
            w, _ = termination_weights(oo)
            return float((g * w).sum())

        w, t_excl = termination_weights(o)
        do = termination_weights_backward(o, t_excl, g)
        h = 1e-6
        for _ in range(40):
            i, j = rng.integers(4), rng.integers(12)
            op = o.copy()
            op[i, j] += h
            om = o.copy()
            om[i, j] -= h
            fd = (loss(op) - loss(om)) / (2 * h)
            assert abs(fd - do[i, j]) < 1e-6 * max(1.0, abs(fd))

    def test_backward_handles_saturated_occupancy(self):
        # o == 1 would divide by zero in a naive formulation
        o = np.array([[0.3, 1.0, 0.5]])
        g = np.array([[1.0, 2.0, 3.0]])
        w, t_excl = termination_weights(o)
        do = termination_weights_backward(o, t_excl, g)
        assert np.all(np.isfinite(do))


class TestRenderDepthColor:
    def test_examples(self):
        batch = RaySampleBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]),
                               np.array([[2.0, 3.0]]), np.array([True]))
        d, _ = render_depth_color(batch, np.array([[1.0, 0.0]]),
                                  np.zeros((1, 2, 3)))
        assert d[0] == 2.0

        batch = RaySampleBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]),
                               np.array([[1.0, 2.0]]), np.array([True]))
        w = np.array([[0.5, 0.25]])
        c = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
        d, rgb = render_depth_color(batch, w, c)
        assert np.isclose(d[0], 1.0)
        assert np.allclose(rgb[0], [0.5, 0.25, 0.0])

    def test_vacuum_ray(self):
        batch = RaySampleBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]),
                               np.array([[1.0, 2.0]]), np.array([True]))
        d, rgb = render_depth_color(batch, np.zeros((1, 2)), np.ones((1, 2, 3)))
        assert d[0] == 0.0 and np.allclose(rgb[0], 0.0)

    def test_matches_direct_dot_product_exactly(self):
        rng = np.random.default_rng(7)
        depths = np.sort(rng.uniform(0.1, 5.0, size=(100, 16)), axis=1)
        w = rng.uniform(0, 1, size=(100, 16))
        c = rng.uniform(0, 1, size=(100, 16, 3))
        batch = RaySampleBatch(np.zeros((100, 3)),
                               np.tile([[0.0, 0.0, 1.0]], (100, 1)),
                               depths, np.ones(100, dtype=bool))
        d, rgb = render_depth_color(batch, w, c)
        for i in range(100):
            assert d[i] == np.sum(w[i] * depths[i])
            for ch in range(3):
                assert rgb[i, ch] == np.sum(w[i] * c[i, :, ch])


def lang_field():
    bounds = SceneBounds(np.full(3, -2.0), np.full(3, 2.0))
    return SparseVoxelField(bounds, voxel_edge=0.16, depth_dim=4, color_dim=4,
                            lang_dim=8)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def put_record(field, point, emb, weight=1.0):
    key = field.cell_at(point)
    cell = field.language_cell(key, create=True)
    cell.records.append(ObservationRecord(unit(emb), 1.0, weight))


class TestRenderLanguage:
    def batch_at(self, depths):
        d = np.asarray(depths, dtype=np.float64)[None, :]
        return RaySampleBatch(np.array([[0.0, 0.0, -1.0]]),
                              np.array([[0.0, 0.0, 1.0]]), d + 1.0,
                              np.array([True]))

    def test_single_record_returns_embedding(self):
        f = lang_field()
        e = unit(np.arange(1.0, 9.0))
        put_record(f, [0.0, 0.0, 0.5], e)
        batch = self.batch_at(np.array([0.5]))
        out, present = render_language(batch, np.array([[1.0]]),
                                       np.array([1.5]), f)
        assert present[0]
        assert np.allclose(out[0], e, atol=1e-12)

    def test_cancellation_gives_absent(self):
        f = lang_field()
        e = unit(np.arange(1.0, 9.0))
        put_record(f, [0.0, 0.0, 0.5], e)
        put_record(f, [0.0, 0.0, 1.0], -e)
        batch = self.batch_at(np.array([0.5, 1.0]))
        out, present = render_language(batch, np.array([[0.5, 0.5]]),
                                       np.array([1.75]), f)
        assert not present[0]
        assert np.allclose(out[0], 0.0)

    def test_empty_queues_absent(self):
        f = lang_field()
        batch = self.batch_at(np.array([0.5]))
        out, present = render_language(batch, np.array([[1.0]]),
                                       np.array([1.5]), f)
        assert not present[0]

    def test_window_excludes_far_samples(self):
        f = lang_field()
        e1 = unit([1, 0, 0, 0, 0, 0, 0, 0])
        e2 = unit([0, 1, 0, 0, 0, 0, 0, 0])
        put_record(f, [0.0, 0.0, 0.5], e1)
        put_record(f, [0.0, 0.0, -1.5], e2)  # 2 m away from rendered depth
        batch = self.batch_at(np.array([-1.5, 0.5]))
        out, present = render_language(batch, np.array([[0.5, 0.5]]),
                                       np.array([1.5]), f)
        assert present[0]
        assert np.allclose(out[0], e1, atol=1e-12)

    def test_weight_scaling_invariance(self):
        f = lang_field()
        put_record(f, [0.0, 0.0, 0.5], unit([1, 2, 0, 0, 0, 0, 0, 1]))
        put_record(f, [0.0, 0.0, 0.6], unit([1, 0, 0, 3, 0, 0, 0, 0]))
        batch = self.batch_at(np.array([0.5, 0.6]))
        w = np.array([[0.4, 0.3]])
        a, pa = render_language(batch, w, np.array([1.55]), f)
        b, pb = render_language(batch, 2.0 * w, np.array([1.55]), f)
        assert pa[0] and pb[0]
        assert np.allclose(a, b, atol=1e-12)

    def test_record_weight_dominates(self):
        # a heavily-confirmed record outweighs a lightly-weighted one
        f = lang_field()
        e1 = unit([1, 0, 0, 0, 0, 0, 0, 0])
        e2 = unit([0, 1, 0, 0, 0, 0, 0, 0])
        key = f.cell_at([0.0, 0.0, 0.5])
        cell = f.language_cell(key, create=True)
        cell.records.append(ObservationRecord(e1.copy(), 1.0, 50.0))
        cell.records.append(ObservationRecord(e2.copy(), 0.1, 0.1))
        batch = self.batch_at(np.array([0.5]))
        out, present = render_language(batch, np.array([[1.0]]),
                                       np.array([1.5]), f)
        assert present[0]
        assert float(out[0] @ e1) > 0.99


class TestComputeLosses:
    def test_perfect_prediction(self):
        r = compute_losses(np.array([1.0, 2.0]), np.array([1.0, 2.0]),
                           np.full((2, 3), 0.5), np.full((2, 3), 0.5))
        assert r.l_d == 0.0 and r.l_c == 0.0

    def test_single_pixel_depth(self):
        r = compute_losses(np.array([1.0]), np.array([2.0]),
                           np.zeros((1, 3)), np.zeros((1, 3)))
        assert np.isclose(r.l_d, 1.0)

    def test_total_weighting(self):
        r = compute_losses(np.array([1.0]), np.array([2.0]),
                           np.zeros((1, 3)), np.zeros((1, 3)), lambda_c=0.2)
        rr = compute_losses(np.array([0.0]), np.array([0.0]),
                            np.sqrt(np.array([[0.5, 0.0, 0.0]])), np.zeros((1, 3)),
                            lambda_c=0.2)
        assert np.isclose(r.l_d + rr.lambda_c * rr.l_c, 1.0 + 0.2 * 0.5)

    def test_invalid_depth_excluded(self):
        r = compute_losses(np.array([1.0, 5.0]), np.array([2.0, 0.0]),
                           np.zeros((2, 3)), np.zeros((2, 3)),
                           valid=np.array([True, False]))
        assert np.isclose(r.l_d, 1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_losses(np.empty(0), np.empty(0), np.empty((0, 3)),
                           np.empty((0, 3)))


def make_training_setup(seed=0, width=16, height=12):
    bounds = SceneBounds(np.array([-2.0, -2.0, -0.5]), np.array([2.0, 2.0, 3.0]))
    field = SparseVoxelField(bounds, voxel_edge=0.16)
    enc = PositionalEncoder(bands=4, bounds=bounds)
    occ = OccupancyDecoder(enc, feat_dim=16, seed=seed)
    col = ColorDecoder(enc, feat_dim=16, seed=seed + 1)
    k = CameraIntrinsics(fx=float(width), fy=float(width), cx=width / 2.0,
                         cy=height / 2.0, width=width, height=height)
    rgb = np.full((height, width, 3), 0.0, dtype=np.float32)
    rgb[..., 0] = 0.8
    depth = np.full((height, width), 2.0, dtype=np.float32)
    frame = RGBDFrame(0, rgb, depth, Pose.identity(), k)
    return field, occ, col, frame


class TestTrainStep:
    def test_zero_learning_rate_keeps_parameters(self):
        field, occ, col, frame = make_training_setup()
        # materialize every cell this pixel draw touches, then repeat the
        # identical draw with zero learning rates
        train_step(field, occ, col, frame, rng=np.random.default_rng(0),
                   n_pixels=32, n_strat=8, n_surf=2, lr_feat=0.0, lr_mlp=0.0)
        w_before = [w.copy() for w in occ.mlp.weights]
        f_before = field.feature_table().copy()
        report = train_step(field, occ, col, frame, rng=np.random.default_rng(0),
                            n_pixels=32, n_strat=8, n_surf=2,
                            lr_feat=0.0, lr_mlp=0.0)
        assert report.l_d >= 0
        assert all(np.array_equal(a, b) for a, b in zip(w_before, occ.mlp.weights))
        assert np.array_equal(f_before, field.feature_table())

    def test_loss_decreases_on_fixed_frame(self):
        # convergence smoke: windowed total loss decreases over 50 steps
        field, occ, col, frame = make_training_setup()
        rng = np.random.default_rng(1)
        totals = []
        for _ in range(50):
            r = train_step(field, occ, col, frame, rng=rng, n_pixels=128,
                           n_strat=16, n_surf=4, far=8.0)
            totals.append(r.total)
        assert np.mean(totals[-10:]) < np.mean(totals[:10])

    def test_end_to_end_gradient_check(self):
        field, occ, col, frame = make_training_setup()
        warm = np.random.default_rng(7)
        train_step(field, occ, col, frame, rng=warm, n_pixels=16,
                   n_strat=6, n_surf=2, far=8.0, update=False)
        # give features nonzero values so gradients flow everywhere
        gen = np.random.default_rng(3)
        field.feature_table()[:] = 0.1 * gen.normal(size=field.feature_table().shape)

        def run(update):
            return train_step(field, occ, col, frame,
                              rng=np.random.default_rng(7), n_pixels=16,
                              n_strat=6, n_surf=2, far=8.0, lr_feat=1.0,
                              lr_mlp=1.0, update=update)

        feats0 = field.feature_table().copy()
        ws0 = [w.copy() for w in occ.mlp.weights + col.mlp.weights]
        bs0 = [b.copy() for b in occ.mlp.biases + col.mlp.biases]
        run(True)
        grad_feats = feats0 - field.feature_table()
        grad_ws = [a - b for a, b in zip(ws0, occ.mlp.weights + col.mlp.weights)]
        field.feature_table()[:] = feats0
        for w, w0 in zip(occ.mlp.weights + col.mlp.weights, ws0):
            w[:] = w0
        for b, b0 in zip(occ.mlp.biases + col.mlp.biases, bs0):
            b[:] = b0

        h = 1e-4
        rng = np.random.default_rng(9)
        touched = np.flatnonzero(np.abs(grad_feats).sum(axis=1) > 1e-9)
        worst = 0.0
        for _ in range(10):
            r = int(rng.choice(touched))
            c = int(rng.integers(field.feat_dim))
            orig = field.feature_table()[r, c]
            field.feature_table()[r, c] = orig + h
            lp = run(False).total
            field.feature_table()[r, c] = orig - h
            lm = run(False).total
            field.feature_table()[r, c] = orig
            fd = (lp - lm) / (2 * h)
            an = grad_feats[r, c]
            if max(abs(fd), abs(an)) > 1e-8:
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
        for tensor, grad in [(occ.mlp.weights[0], grad_ws[0]),
                             (col.mlp.weights[0], grad_ws[len(occ.mlp.weights)])]:
            for _ in range(5):
                i = int(rng.integers(tensor.shape[0]))
                j = int(rng.integers(tensor.shape[1]))
                orig = tensor[i, j]
                tensor[i, j] = orig + h
                lp = run(False).total
                tensor[i, j] = orig - h
                lm = run(False).total
                tensor[i, j] = orig
                fd = (lp - lm) / (2 * h)
                an = grad[i, j]
                if max(abs(fd), abs(an)) > 1e-8:
                    worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
        assert worst < 1e-3, f"worst relative error {worst}"


class TestRenderRays:
    def test_pure_function(self):
        field, occ, col, frame = make_training_setup()
        rng = np.random.default_rng(2)
        for _ in range(5):
            train_step(field, occ, col, frame, rng=rng, n_pixels=64,
                       n_strat=8, n_surf=2, far=8.0)
        o = np.zeros((10, 3))
        d = np.tile([[0.0, 0.0, 1.0]], (10, 1))
        a = render_rays(field, occ, col, o, d, n_strat=8, far=8.0)
        b = render_rays(field, occ, col, o, d, n_strat=8, far=8.0)
        assert np.array_equal(a["depth"], b["depth"])
        assert np.array_equal(a["rgb"], b["rgb"])
