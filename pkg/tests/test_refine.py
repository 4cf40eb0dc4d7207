"""Semantic point selection, region estimation, and cascade composition."""
import numpy as np
import torch

from pointrefine.losses import variance_loss, variance_target_map
from pointrefine.models import PointRefiner
from pointrefine.refine import (
    RefineSettings,
    SemanticPointSet,
    _initial_regions,
    _next_regions,
    _stage_inputs,
    cascade_loss,
    estimate_region,
    refine_image,
    refine_image_single,
    select_semantic_points,
    single_stage_loss,
    weighted_center,
)
from pointrefine.sampling import build_bag, make_region


def logit(p):
    return float(np.log(p / (1 - p)))


def identity_refiner(num_categories, num_stages=1):
    """Refiner whose stage-0 classification reads scores straight off the map."""
    model = PointRefiner(num_categories, num_stages=num_stages, channels=num_categories)
    model = model.double()
    with torch.no_grad():
        for heads in model.heads:
            heads.fc_cls.weight.copy_(torch.eye(num_categories, dtype=torch.float64))
            heads.fc_cls.bias.zero_()
            heads.fc_ins.weight.zero_()
            heads.fc_ins.bias.zero_()
    return model


class TestWeightedCenter:
    def test_singleton(self):
        np.testing.assert_allclose(
            weighted_center(np.array([[3.0, 4.0]]), np.array([0.7])), [3.0, 4.0]
        )

    def test_symmetric_pair(self):
        pts = np.array([[0.0, 0.0], [2.0, 0.0]])
        np.testing.assert_allclose(weighted_center(pts, np.array([1.0, 1.0])), [1.0, 0.0])

    def test_weighted_mean(self):
        pts = np.array([[0.0, 0.0], [3.0, 0.0]])
        np.testing.assert_allclose(weighted_center(pts, np.array([1.0, 2.0])), [2.0, 0.0])


class TestEstimateRegion:
    def test_singleton_clamps_radius(self):
        sps = SemanticPointSet(0, np.array([[2.0, 2.0]]), np.array([1.0]))
        reg = estimate_region(sps)
        assert reg.center == (2.0, 2.0)
        assert reg.radius == 1

    def test_bounding_box_arithmetic(self):
        pts = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 3.0], [4.0, 3.0]])
        sps = SemanticPointSet(1, pts, np.ones(4))
        reg = estimate_region(sps)
        np.testing.assert_allclose(reg.center, [2.0, 1.5])
        assert reg.radius == 3  # floor(sqrt(12))

    def test_collinear_degenerate(self):
        sps = SemanticPointSet(2, np.array([[0.0, 0.0], [5.0, 0.0]]), np.ones(2))
        assert estimate_region(sps).radius == 1


class TestSelectSemanticPoints:
    def make_scene(self):
        """6x6 map, d = K = 2, integer bag points via u0 = 4."""
        model = identity_refiner(2)
        feats = torch.full((6, 6, 2), logit(0.01), dtype=torch.float64)
        feats[3, 3, 0] = logit(0.8)  # annotated point score 0.8
        feats[3, 4, 0] = logit(0.9)  # passes every constraint
        feats[4, 3, 0] = logit(0.3)  # fails s > delta2 * 0.8
        feats[3, 2, 0] = logit(0.5)  # argmax goes to the other category
        feats[3, 2, 1] = logit(0.7)
        feats[2, 3, 0] = logit(0.05)  # below delta1
        return model, feats

    def test_constraints_filter_points(self):
        model, feats = self.make_scene()
        settings = RefineSettings(r_init=1, u0=4)
        ann = np.array([[3.0, 3.0]])
        sets = select_semantic_points(
            feats, model.heads[0], ann, np.array([0]), _initial_regions(ann, [0], settings), settings
        )
        pts = {tuple(p) for p in np.round(sets[0].points, 6)}
        assert pts == {(3.0, 3.0), (4.0, 3.0)}
        np.testing.assert_allclose(sorted(sets[0].scores), [0.8, 0.9], atol=1e-9)

    def test_delta1_one_keeps_only_annotation(self):
        model, feats = self.make_scene()
        settings = RefineSettings(r_init=2, u0=8, delta1=1.0)
        ann = np.array([[3.0, 3.0]])
        sets = select_semantic_points(
            feats, model.heads[0], ann, np.array([0]), _initial_regions(ann, [0], settings), settings
        )
        assert len(sets[0].points) == 1
        np.testing.assert_allclose(sets[0].points[0], [3.0, 3.0])

    def test_nearer_rival_annotation_drops_point(self):
        """A candidate one cell from another same-category annotation dies."""
        model = identity_refiner(1)
        feats = torch.full((7, 9, 1), logit(0.9), dtype=torch.float64)
        ann = np.array([[1.0, 3.0], [5.0, 3.0]])
        cats = np.array([0, 0])
        settings = RefineSettings(r_init=3, u0=4)
        sets = select_semantic_points(
            feats, model.heads[0], ann, cats, _initial_regions(ann, [0, 1], settings), settings
        )
        # ring-3 point (4, 3) of object 0 sits 1 cell from annotation 1
        pts0 = {tuple(p) for p in np.round(sets[0].points, 6)}
        assert (4.0, 3.0) not in pts0
        assert (2.0, 3.0) in pts0  # midpoint-ish point stays with its owner

    def test_same_category_scope_of_rival_check(self):
        """A different-category neighbor only matters in the literal variant."""
        model = identity_refiner(2)
        feats = torch.full((7, 9, 2), logit(0.9), dtype=torch.float64)
        feats[:, :, 1] = logit(0.05)  # category 1 never wins the argmax
        ann = np.array([[1.0, 3.0], [5.0, 3.0]])
        cats = np.array([0, 1])
        prose = RefineSettings(r_init=3, u0=4)
        literal = RefineSettings(r_init=3, u0=4, nearest_all_categories=True)
        sets = select_semantic_points(
            feats, model.heads[0], ann, cats, _initial_regions(ann, [0, 1], prose), prose
        )
        assert (4.0, 3.0) in {tuple(p) for p in np.round(sets[0].points, 6)}
        sets = select_semantic_points(
            feats, model.heads[0], ann, cats, _initial_regions(ann, [0, 1], literal), literal
        )
        assert (4.0, 3.0) not in {tuple(p) for p in np.round(sets[0].points, 6)}

    def test_all_points_within_region(self):
        """Bag-sourced selections stay inside the sampling radius."""
        torch.manual_seed(0)
        model = PointRefiner(3, num_stages=1, channels=8).double()
        feats = torch.randn(12, 14, 8, dtype=torch.float64)
        ann = np.array([[4.0, 5.0], [9.0, 6.0]])
        cats = np.array([1, 2])
        settings = RefineSettings(r_init=4, u0=8, delta1=0.0, delta2=0.0)
        regions = _initial_regions(ann, [0, 1], settings)
        sets = select_semantic_points(feats, model.heads[0], ann, cats, regions, settings)
        for s, reg in zip(sets, regions):
            d = np.hypot(
                s.points[1:, 0] - reg.center[0], s.points[1:, 1] - reg.center[1]
            )
            assert (d <= reg.radius + 1e-6).all()


def random_instance(seed, kc=2, stages=2, h=14, w=16):
    torch.manual_seed(seed)
    model = PointRefiner(kc, num_stages=stages, channels=6).double()
    rng = np.random.default_rng(seed)
    feats = torch.tensor(rng.normal(size=(h, w, 6)))
    m = 3
    ann = np.stack([rng.uniform(2, w - 3, m), rng.uniform(2, h - 3, m)], axis=1)
    cats = rng.integers(0, kc, m)
    return model, feats, ann, cats, list(range(m))


class TestCascade:
    def test_single_stage_identity(self):
        """One-stage cascade equals the standalone single-stage path, bitwise."""
        model, feats, ann, cats, ids = random_instance(0, stages=1)
        settings = RefineSettings(r_init=4, use_var_loss=True)
        total = cascade_loss(feats, model, ann, cats, ids, settings)["total"]
        single = single_stage_loss(feats, model, ann, cats, ids, settings)["total"]
        assert total.item() == single.item()
        refined_a, _ = refine_image(feats, model, ann, cats, ids, settings)
        refined_b = refine_image_single(feats, model, ann, cats, ids, settings)
        assert np.array_equal(refined_a, refined_b)

    def test_two_stage_composition(self):
        """K=2 total equals independently composed stage losses plus variance."""
        model, feats, ann, cats, ids = random_instance(1, stages=2)
        settings = RefineSettings(r_init=4, use_var_loss=True)
        got = cascade_loss(feats, model, ann, cats, ids, settings)

        l1 = single_stage_loss(feats, model, ann, cats, ids, settings)["total"]
        regions1 = _initial_regions(ann, ids, settings)
        sets = select_semantic_points(feats, model.heads[0], ann, cats, regions1, settings)
        regions2 = _next_regions(sets, regions1, settings)
        from pointrefine.losses import stage_refine_loss

        bag_pts, segments, neg = _stage_inputs(
            regions2, cats, (14, 16), 2, settings, feats.dtype
        )
        onehot = torch.zeros(3, 2, dtype=feats.dtype)
        onehot[torch.arange(3), torch.as_tensor(cats)] = 1.0
        l2 = stage_refine_loss(
            feats,
            model.heads[1],
            bag_pts,
            segments,
            torch.as_tensor(ann, dtype=feats.dtype),
            onehot,
            neg,
            settings.weights,
        )["total"]
        centers = torch.tensor([r.center for r in regions2], dtype=feats.dtype)
        sigmas = torch.tensor([float(r.radius) for r in regions2], dtype=feats.dtype)
        target = variance_target_map(centers, sigmas, torch.as_tensor(cats), (14, 16), 2)
        logits = model.var_head(feats.permute(2, 0, 1).unsqueeze(0))[0]
        lv = variance_loss(torch.sigmoid(logits.permute(1, 2, 0)), target)

        assert abs(got["total"].item() - (l1 + l2 + lv).item()) < 1e-6
        assert abs(got["var"].item() - lv.item()) < 1e-9

    def test_var_loss_skipped_for_single_stage(self):
        model, feats, ann, cats, ids = random_instance(2, stages=1)
        settings = RefineSettings(r_init=4, use_var_loss=True)
        losses = cascade_loss(feats, model, ann, cats, ids, settings)
        assert "var" not in losses

    def test_cascade_modes_differ_only_in_radius(self):
        model, feats, ann, cats, ids = random_instance(3, stages=2)
        fixed = RefineSettings(r_init=5, cascade_mode="cascade1", use_var_loss=False)
        dynamic = RefineSettings(r_init=5, cascade_mode="cascade2", use_var_loss=False)
        _, trace_fixed = refine_image(feats, model, ann, cats, ids, fixed)
        _, trace_dyn = refine_image(feats, model, ann, cats, ids, dynamic)
        for tf, td in zip(trace_fixed, trace_dyn):
            assert all(r == 5 for r in tf["radii"])
            np.testing.assert_allclose(tf["centers"][1], td["centers"][1], atol=1e-12)
        # at least one object gets a radius different from the fixed setting
        assert any(r != 5 for td in trace_dyn for r in td["radii"][1:])

    def test_refinement_determinism(self):
        model, feats, ann, cats, ids = random_instance(4, stages=3)
        settings = RefineSettings(r_init=4)
        a, trace_a = refine_image(feats, model, ann, cats, ids, settings)
        b, trace_b = refine_image(feats, model, ann, cats, ids, settings)
        assert np.array_equal(a, b)
        assert trace_a == trace_b

    def test_refined_point_in_final_hull(self):
        """The refined point is a convex combination of the final selection."""
        model, feats, ann, cats, ids = random_instance(5, stages=2)
        settings = RefineSettings(r_init=4)
        regions = _initial_regions(ann, ids, settings)
        sets = None
        for ks in range(model.num_stages):
            sets = select_semantic_points(
                feats, model.heads[ks], ann, cats, regions, settings
            )
            regions = _next_regions(sets, regions, settings)
        refined, _ = refine_image(feats, model, ann, cats, ids, settings)
        for s, r in zip(sets, refined):
            assert s.points[:, 0].min() - 1e-9 <= r[0] <= s.points[:, 0].max() + 1e-9
            assert s.points[:, 1].min() - 1e-9 <= r[1] <= s.points[:, 1].max() + 1e-9

    def test_next_center_within_reach(self):
        """Stage k+1 centers stay within the provable reach of stage k."""
        model, feats, ann, cats, ids = random_instance(6, stages=3)
        settings = RefineSettings(r_init=5)
        _, traces = refine_image(feats, model, ann, cats, ids, settings)
        for j, t in enumerate(traces):
            for k in range(len(t["centers"]) - 1):
                c0 = np.array(t["centers"][k])
                c1 = np.array(t["centers"][k + 1])
                reach = max(
                    t["radii"][k], float(np.hypot(*(ann[j] - c0)))
                )
                assert np.hypot(*(c1 - c0)) <= reach + 1e-9


class TestBagsForCascade:
    def test_stage_inputs_segments_align(self):
        settings = RefineSettings(r_init=2, u0=8)
        regions = [make_region(0, (5.0, 5.0), 2), make_region(1, (10.0, 8.0), 2)]
        cats = np.array([0, 1])
        pts, segments, neg = _stage_inputs(regions, cats, (20, 20), 2, settings, torch.float64)

        b0 = build_bag(regions[0], 8, (20, 20))
        b1 = build_bag(regions[1], 8, (20, 20))
        assert len(pts) == len(b0.points) + len(b1.points)
        assert (segments[: len(b0.points)] == 0).all()
        assert (segments[len(b0.points) :] == 1).all()
        assert neg.shape == (2, 400)
