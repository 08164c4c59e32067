"""Tests for snapshot view rendering and text relevance maps."""

import numpy as np
import pytest

from o2v.config import MapConfig
from o2v.mapping import Mapper
from o2v.perception import FramePerception, InstanceMask
from o2v.scene import CameraIntrinsics, Pose, RGBDFrame, SceneBounds
from o2v.views import language_view, relevance_from_features, render_relevance, render_view

BOUNDS = SceneBounds(np.zeros(3), np.array([1.28, 1.28, 1.28]))
CAM = CameraIntrinsics(fx=10.0, fy=10.0, cx=7.5, cy=5.5, width=16, height=12)
POSE = Pose(np.eye(3), np.array([0.64, 0.64, 0.05]))

FAST = MapConfig(steps_per_frame=8, n_pixels=96, n_strat=8, n_surf=2,
                 near=0.05, far=1.5)


def make_frame(frame_id=0):
    depth = np.full((12, 16), 0.8, dtype=np.float32)
    rgb = np.full((12, 16, 3), 0.6, dtype=np.float32)
    return RGBDFrame(frame_id=frame_id, rgb=rgb, depth=depth, pose=POSE,
                     intrinsics=CAM)


def labeled_mapper():
    """Map with one trained wall and one labeled rectangle on it."""
    mapper = Mapper(BOUNDS, FAST)
    bitmap = np.zeros((12, 16), dtype=bool)
    bitmap[3:9, 4:12] = True
    emb = np.zeros(32, dtype=np.float32)
    emb[5] = 1.0
    perception = FramePerception(frame_id=0, lang_dim=32, masks=(
        InstanceMask(bitmap, emb, 0.9, scale_rank=0),))
    mapper.integrate(make_frame(0), perception)
    return mapper, bitmap, emb


class TestRenderView:
    def test_shapes_match_intrinsics(self):
        snap = Mapper(BOUNDS, FAST).snapshot()
        rgb, depth = render_view(snap, POSE, CAM)
        assert rgb.shape == (12, 16, 3)
        assert depth.shape == (12, 16)

    def test_untrained_map_renders_near_uniform_gray(self):
        # fresh decoders with empty features give sigmoid outputs close to
        # one value everywhere; nothing should stand out before training
        snap = Mapper(BOUNDS, FAST).snapshot()
        rgb, _ = render_view(snap, POSE, CAM)
        assert float(np.ptp(rgb)) < 0.2

    def test_pure_function_of_inputs(self):
        mapper, _, _ = labeled_mapper()
        snap = mapper.snapshot()
        a_rgb, a_depth = render_view(snap, POSE, CAM)
        b_rgb, b_depth = render_view(snap, POSE, CAM)
        assert np.array_equal(a_rgb, b_rgb)
        assert np.array_equal(a_depth, b_depth)

    def test_depth_comes_out_in_plane_units(self):
        mapper, _, _ = labeled_mapper()
        for _ in range(6):  # carve the free space in front of the wall
            mapper.integrate(make_frame(0), steps=40)
        _, depth = render_view(mapper.snapshot(), POSE, CAM, n_strat=64)
        # the wall sits at plane depth 0.8 from the camera; corner pixels
        # have longer rays, so equality in plane units proves the domain
        center = float(depth[5:7, 7:9].mean())
        corner = float(depth[0, 0])
        assert center == pytest.approx(0.8, abs=0.08)
        assert corner == pytest.approx(0.8, abs=0.15)


class TestRelevanceFromFeatures:
    def test_normalization_spans_unit_interval(self):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((6, 8, 4))
        feats /= np.linalg.norm(feats, axis=-1, keepdims=True)
        present = rng.random((6, 8)) < 0.7
        q = np.array([1.0, 0.0, 0.0, 0.0])
        rel = relevance_from_features(feats, present, q, 0.5)
        assert rel.scores.min() >= 0.0
        assert rel.scores.max() <= 1.0
        got = rel.scores[present]
        assert got.max() == pytest.approx(1.0)
        assert got.min() == pytest.approx(0.0)

    def test_normalization_is_monotone(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            feats = rng.standard_normal((5, 5, 6))
            present = rng.random((5, 5)) < 0.8
            if not present.any():
                continue
            q = rng.standard_normal(6)
            raw = np.maximum(feats @ (q / np.linalg.norm(q)), 0.0)
            rel = relevance_from_features(feats, present, q, 0.5)
            a, b = raw[present], rel.scores[present]
            order_a = np.argsort(a, kind="stable")
            order_b = np.argsort(b, kind="stable")
            assert np.array_equal(order_a, order_b)

    def test_orthogonal_query_yields_all_zero_map(self):
        feats = np.zeros((4, 4, 3))
        feats[..., 0] = 1.0
        present = np.ones((4, 4), dtype=bool)
        rel = relevance_from_features(feats, present, np.array([0.0, 1.0, 0.0]),
                                      0.5)
        assert not rel.scores.any()
        assert not rel.mask().any()

    def test_absent_pixels_score_zero_and_stay_unmasked(self):
        feats = np.zeros((2, 2, 3))
        feats[0, 0] = [1.0, 0.0, 0.0]
        feats[1, 1] = [1.0, 0.0, 0.0]  # same value but marked absent
        present = np.array([[True, False], [False, False]])
        rel = relevance_from_features(feats, present, np.array([1.0, 0.0, 0.0]),
                                      0.5)
        assert rel.scores[0, 0] == 1.0  # flat response keeps its raw cosine
        assert rel.scores[1, 1] == 0.0
        assert rel.mask().tolist() == [[True, False], [False, False]]

    def test_negative_cosines_clamp_to_zero_before_normalizing(self):
        feats = np.zeros((1, 2, 2))
        feats[0, 0] = [-1.0, 0.0]
        feats[0, 1] = [1.0, 0.0]
        present = np.ones((1, 2), dtype=bool)
        rel = relevance_from_features(feats, present, np.array([1.0, 0.0]), 0.5)
        # raw = [0, 1] after the clamp, so normalization keeps them
        assert rel.scores[0, 0] == 0.0
        assert rel.scores[0, 1] == 1.0


class TestRelevanceOnMap:
    def test_labeled_region_outscores_background(self):
        mapper, bitmap, emb = labeled_mapper()
        rel = render_relevance(mapper.snapshot(), POSE, CAM, emb)
        inside = rel.scores[bitmap]
        # erode the complement one pixel: rays at the boundary mix cells
        outside = rel.scores[2:10, :2]
        assert float(inside.mean()) > float(outside.mean()) + 0.3

    def test_threshold_defaults_to_config(self):
        mapper, _, emb = labeled_mapper()
        rel = render_relevance(mapper.snapshot(), POSE, CAM, emb)
        assert rel.threshold == mapper.config.tau_rel

    def test_language_view_unit_vectors_where_present(self):
        mapper, _, _ = labeled_mapper()
        feats, present = language_view(mapper.snapshot(), POSE, CAM)
        assert present.any()
        norms = np.linalg.norm(feats[present], axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-9)
        assert not feats[~present].any()
