"""Loss values against closed forms, a second implementation, and gradients."""
import math

import numpy as np
import torch

from pointrefine.losses import (
    LossWeights,
    bag_scores,
    focal_loss,
    focal_term,
    negative_loss,
    stage_refine_loss,
    variance_loss,
    variance_target_map,
)
from pointrefine.models import StageHeads, bilinear_features


def fd_check(loss_fn, params, rtol, atol=1e-6, h=1e-6):
    """Analytic (autograd) vs central finite-difference parameter gradients."""
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss_fn().backward()
    analytic = [p.grad.clone() for p in params]
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                plus = float(loss_fn())
                flat[i] = orig - h
                minus = float(loss_fn())
                flat[i] = orig
                fd = (plus - minus) / (2 * h)
                a = float(gflat[i])
                assert abs(a - fd) <= atol + rtol * max(abs(a), abs(fd)), (
                    f"grad mismatch: analytic {a} vs fd {fd}"
                )


class TestFocalTerm:
    def test_half_score_positive(self):
        v = focal_term(torch.tensor(0.5), True, 2.0)
        assert abs(v.item() - 0.25 * math.log(2)) < 1e-9

    def test_half_score_symmetry(self):
        p = focal_term(torch.tensor(0.5), True, 2.0)
        n = focal_term(torch.tensor(0.5), False, 2.0)
        assert abs(p.item() - n.item()) < 1e-12

    def test_perfect_prediction_clamped(self):
        assert focal_term(torch.tensor(1.0), True, 2.0).item() < 1e-9
        assert focal_term(torch.tensor(0.0), False, 2.0).item() < 1e-9

    def test_nonnegative_finite(self):
        s = torch.linspace(0, 1, 101)
        for positive in (True, False):
            v = focal_term(s, positive, 2.0)
            assert (v >= 0).all() and torch.isfinite(v).all()


class TestBagScores:
    def test_singleton_bag(self):
        torch.manual_seed(0)
        heads = StageHeads(4, 3).double()
        feats = torch.randn(1, 4, dtype=torch.float64)
        out = bag_scores(feats, torch.tensor([0]), 1, heads)
        assert torch.allclose(out.ins, torch.ones(1, 3, dtype=torch.float64))
        assert torch.allclose(out.bag[0], out.cls[0])

    def test_equal_features_uniform_selection(self):
        torch.manual_seed(0)
        heads = StageHeads(4, 2).double()
        feats = torch.ones(5, 4, dtype=torch.float64)
        out = bag_scores(feats, torch.zeros(5, dtype=torch.long), 1, heads)
        assert torch.allclose(out.ins, torch.full((5, 2), 0.2, dtype=torch.float64))

    def test_against_hand_computation(self):
        """Random 5-point bag vs an independent numpy recomputation."""
        rng = np.random.default_rng(1)
        heads = StageHeads(3, 2).double()
        with torch.no_grad():
            for p in heads.parameters():
                p.copy_(torch.tensor(rng.normal(size=p.shape)))
        feats_np = rng.normal(size=(5, 3))
        with torch.no_grad():
            out = bag_scores(
                torch.tensor(feats_np), torch.zeros(5, dtype=torch.long), 1, heads
            )
        w_cls = heads.fc_cls.weight.detach().numpy()
        b_cls = heads.fc_cls.bias.detach().numpy()
        w_ins = heads.fc_ins.weight.detach().numpy()
        b_ins = heads.fc_ins.bias.detach().numpy()
        s_cls = 1 / (1 + np.exp(-(feats_np @ w_cls.T + b_cls)))
        o_ins = feats_np @ w_ins.T + b_ins
        e = np.exp(o_ins)
        s_ins = e / e.sum(axis=0, keepdims=True)
        expected_bag = (s_cls * s_ins).sum(axis=0)
        np.testing.assert_allclose(out.bag[0].numpy(), expected_bag, atol=1e-6)

    def test_selection_normalization_and_range(self):
        """Selection scores sum to one per bag/category; bag scores in [0,1]."""
        rng = np.random.default_rng(2)
        for _ in range(20):
            d, kc = int(rng.integers(2, 6)), int(rng.integers(1, 5))
            m = int(rng.integers(1, 5))
            heads = StageHeads(d, kc).double()
            sizes = rng.integers(1, 9, m)
            segments = torch.tensor(np.repeat(np.arange(m), sizes))
            feats = torch.tensor(rng.normal(size=(int(sizes.sum()), d)))
            with torch.no_grad():
                out = bag_scores(feats, segments, m, heads)
            sums = torch.zeros(m, kc, dtype=torch.float64).index_add(
                0, segments, out.ins
            )
            np.testing.assert_allclose(sums.numpy(), 1.0, atol=1e-5)
            assert (out.bag >= 0).all() and (out.bag <= 1).all()


def make_micro_instance(seed=3, h=6, w=7, d=3, kc=2):
    """Small random refinement instance shared by value/gradient tests."""
    rng = np.random.default_rng(seed)
    features = torch.tensor(rng.normal(size=(h, w, d)))
    heads = StageHeads(d, kc).double()
    with torch.no_grad():
        for p in heads.parameters():
            p.copy_(torch.tensor(rng.normal(size=p.shape) * 0.7))
    bag_pts = torch.tensor(
        np.stack(
            [rng.uniform(0, w - 1, 12), rng.uniform(0, h - 1, 12)], axis=1
        )
    )
    segments = torch.tensor([0] * 6 + [1] * 6)
    ann = torch.tensor(np.stack([rng.uniform(0, w - 1, 2), rng.uniform(0, h - 1, 2)], axis=1))
    onehot = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    neg = torch.tensor(rng.random((kc, h * w)) < 0.3)
    return features, heads, bag_pts, segments, ann, onehot, neg


def reference_stage_loss(features, heads, bag_pts, segments, ann, onehot, neg, weights):
    """Independent plain-numpy evaluation of the combined stage loss."""
    eps = 1e-6
    f = features.numpy()
    h, w, d = f.shape
    w_cls = heads.fc_cls.weight.detach().numpy()
    b_cls = heads.fc_cls.bias.detach().numpy()
    w_ins = heads.fc_ins.weight.detach().numpy()
    b_ins = heads.fc_ins.bias.detach().numpy()

    def interp(p):
        x, y = p
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        tx, ty = x - x0, y - y0
        return (
            (1 - ty) * ((1 - tx) * f[y0, x0] + tx * f[y0, x1])
            + ty * ((1 - tx) * f[y1, x0] + tx * f[y1, x1])
        )

    def sigmoid(z):
        return 1 / (1 + np.exp(-z))

    def fl(s, c):
        s = np.clip(s, eps, 1 - eps)
        return float(
            (c * -((1 - s) ** 2) * np.log(s) + (1 - c) * -(s ** 2) * np.log(1 - s)).sum()
        )

    m, kc = onehot.shape
    pts = bag_pts.numpy()
    seg = segments.numpy()
    mil = 0.0
    for j in range(m):
        fj = np.stack([interp(p) for p in pts[seg == j]])
        s_cls = sigmoid(fj @ w_cls.T + b_cls)
        o_ins = fj @ w_ins.T + b_ins
        e = np.exp(o_ins - o_ins.max(axis=0))
        s_ins = e / e.sum(axis=0)
        mil += fl((s_cls * s_ins).sum(axis=0), onehot.numpy()[j])
    mil /= m

    ann_np = ann.numpy()
    ann_loss = sum(
        fl(sigmoid(interp(ann_np[j]) @ w_cls.T + b_cls), onehot.numpy()[j])
        for j in range(m)
    ) / m

    neg_np = neg.numpy()
    neg_loss = 0.0
    for k in range(kc):
        for idx in np.nonzero(neg_np[k])[0]:
            y, x = divmod(int(idx), w)
            s = np.clip(sigmoid(f[y, x] @ w_cls.T + b_cls)[k], eps, 1 - eps)
            neg_loss += -(s ** 2) * math.log(1 - s)
    neg_loss /= m

    return mil + weights.alpha_ann * ann_loss + weights.alpha_neg * neg_loss


class TestStageLoss:
    def test_matches_independent_implementation(self):
        for seed in range(5):
            inst = make_micro_instance(seed)
            weights = LossWeights()
            got = stage_refine_loss(*inst, weights)["total"].item()
            expected = reference_stage_loss(*inst, weights)
            assert abs(got - expected) < 1e-6

    def test_singleton_bag_equals_annotation_loss(self):
        """A one-point bag placed on the annotation collapses MIL onto it."""
        features, heads, _, _, _, _, neg = make_micro_instance(7, kc=2)
        ann = torch.tensor([[2.0, 3.0], [4.0, 1.0]], dtype=torch.float64)
        onehot = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        out = stage_refine_loss(
            features, heads, ann, torch.tensor([0, 1]), ann, onehot, neg
        )
        assert abs(out["mil"].item() - out["ann"].item()) < 1e-9

    def test_separable_scores_drive_loss_to_zero(self):
        """Saturated correct scores make every term vanish."""
        d, kc = 2, 2
        heads = StageHeads(d, kc).double()
        with torch.no_grad():
            heads.fc_cls.weight.copy_(torch.tensor([[40.0, 0.0], [0.0, 40.0]]))
            heads.fc_cls.bias.copy_(torch.tensor([-20.0, -20.0]))
            heads.fc_ins.weight.zero_()
            heads.fc_ins.bias.zero_()
        features = torch.zeros(4, 4, d, dtype=torch.float64)
        features[1, 1, 0] = 1.0  # object 0 blob
        features[2, 3, 1] = 1.0  # object 1 blob
        ann = torch.tensor([[1.0, 1.0], [3.0, 2.0]], dtype=torch.float64)
        onehot = torch.eye(2, dtype=torch.float64)
        neg = torch.zeros(kc, 16, dtype=torch.bool)
        neg[0, 0] = True
        neg[1, 15] = True
        out = stage_refine_loss(
            features, heads, ann, torch.tensor([0, 1]), ann, onehot, neg
        )
        assert out["total"].item() < 1e-6

    def test_negative_loss_normalization(self):
        scores = torch.full((6, 2), 0.5, dtype=torch.float64)
        masks = torch.ones(2, 6, dtype=torch.bool)
        per_object = negative_loss(scores, masks, num_objects=3)
        per_point = negative_loss(scores, masks, num_objects=3, per_point=True)
        term = 0.25 * math.log(2)
        assert abs(per_object.item() - 12 * term / 3) < 1e-9
        assert abs(per_point.item() - term) < 1e-9

    def test_gradients_match_finite_differences(self):
        """Combined stage loss gradients on a 16-parameter instance."""
        inst = make_micro_instance(11)
        heads = inst[1]

        def loss_fn():
            return stage_refine_loss(*inst, LossWeights())["total"]

        fd_check(loss_fn, list(heads.parameters()), rtol=1e-3)


class TestVarianceRegularization:
    def test_target_peak_and_decay(self):
        centers = torch.tensor([[2.0, 3.0]], dtype=torch.float64)
        sigmas = torch.tensor([2.0], dtype=torch.float64)
        cats = torch.tensor([0])
        g = variance_target_map(centers, sigmas, cats, (6, 6), 1)
        assert abs(g[3, 2, 0].item() - 1.0) < 1e-12
        assert abs(g[3, 4, 0].item() - math.exp(-1.0)) < 1e-12  # distance sigma

    def test_two_objects_pointwise_max(self):
        centers = torch.tensor([[1.0, 1.0], [4.0, 4.0]], dtype=torch.float64)
        sigmas = torch.tensor([1.5, 1.5], dtype=torch.float64)
        cats = torch.tensor([0, 0])
        both = variance_target_map(centers, sigmas, cats, (6, 6), 1)
        first = variance_target_map(centers[:1], sigmas[:1], cats[:1], (6, 6), 1)
        second = variance_target_map(centers[1:], sigmas[1:], cats[1:], (6, 6), 1)
        assert torch.equal(both, torch.maximum(first, second))

    def test_matching_hard_targets_zero_loss(self):
        target = torch.zeros(3, 3, 2, dtype=torch.float64)
        target[1, 1, 0] = 1.0
        assert variance_loss(target, target).item() < 1e-4

    def test_uniform_half_closed_form(self):
        target = torch.rand(5, 4, 3, dtype=torch.float64).round()
        scores = torch.full((5, 4, 3), 0.5, dtype=torch.float64)
        assert abs(variance_loss(scores, target).item() - 60 * math.log(2)) < 1e-9

    def test_conv_gradients_match_finite_differences(self):
        """Variance head gradients on a 4x4x2 map, tight tolerance."""
        rng = np.random.default_rng(13)
        conv = torch.nn.Conv2d(2, 2, 1).double()
        features = torch.tensor(rng.normal(size=(4, 4, 2)))
        centers = torch.tensor([[1.0, 2.0], [3.0, 0.5]], dtype=torch.float64)
        sigmas = torch.tensor([1.0, 2.0], dtype=torch.float64)
        cats = torch.tensor([0, 1])
        target = variance_target_map(centers, sigmas, cats, (4, 4), 2)

        def loss_fn():
            logits = conv(features.permute(2, 0, 1).unsqueeze(0))[0]
            return variance_loss(torch.sigmoid(logits.permute(1, 2, 0)), target)

        fd_check(loss_fn, list(conv.parameters()), rtol=1e-4)


class TestFocalLossAggregate:
    def test_mean_over_objects(self):
        scores = torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=torch.float64)
        onehot = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        expected = 2 * 0.25 * math.log(2)  # one pos + one neg term per object
        assert abs(focal_loss(scores, onehot).item() - expected) < 1e-9
