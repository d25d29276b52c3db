import math

import numpy as np
import pytest

from mvinspect import rng
from mvinspect.attention import ProjectionWeights, backward_batch, forward_batch
from mvinspect.errors import NoEligibleSupportToken, TooFewPoints
from mvinspect.features import load_manifest, load_rig
from mvinspect.geometry import EpipolarMaskSet, PatchGrid
from mvinspect.pretrain import (
    ClusterCenters,
    NegativeSet,
    TrainConfig,
    assign_nearest,
    kmeans_init,
    negative_loss,
    negative_loss_grad,
    positive_loss,
    positive_loss_grad,
    select_negative_tokens,
    synthesize_negatives,
    total_loss,
    train,
)
from mvinspect.synth import SceneConfig, synth_dataset


class TestKmeans:
    def test_single_center_is_mean(self):
        x = np.random.default_rng(0).standard_normal((50, 4))
        centers = kmeans_init(x, 1, seed=0)
        np.testing.assert_allclose(centers.centers[0], x.mean(axis=0), atol=1e-9)

    def test_recovers_separated_blobs(self):
        gen = np.random.default_rng(1)
        means = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        x = np.concatenate([m + 0.01 * gen.standard_normal((40, 2)) for m in means])
        centers = kmeans_init(x, 3, seed=3)
        # one recovered center within 0.1 of each blob mean, assignments pure
        matched = set()
        for m in means:
            d = np.linalg.norm(centers.centers - m, axis=1)
            assert d.min() < 0.1
            matched.add(int(d.argmin()))
        assert len(matched) == 3
        assign = np.array([assign_nearest(p, centers) for p in x])
        for blob in range(3):
            block = assign[blob * 40:(blob + 1) * 40]
            assert len(set(block.tolist())) == 1

    def test_too_few_points(self):
        x = np.random.default_rng(2).standard_normal((5, 3))
        with pytest.raises(TooFewPoints):
            kmeans_init(x, 10, seed=0)

    def test_deterministic(self):
        x = np.random.default_rng(3).standard_normal((200, 6))
        c1 = kmeans_init(x, 8, seed=9)
        c2 = kmeans_init(x, 8, seed=9)
        assert np.array_equal(c1.centers, c2.centers)

    def test_distinct_centers(self):
        x = np.random.default_rng(4).standard_normal((100, 5))
        centers = kmeans_init(x, 10, seed=1).centers
        for i in range(10):
            for j in range(i + 1, 10):
                assert np.linalg.norm(centers[i] - centers[j]) > 1e-12


class TestAssignNearest:
    def test_exact_center(self):
        centers = ClusterCenters(np.arange(20.0).reshape(5, 4))
        assert assign_nearest(centers.centers[3], centers) == 3

    def test_tie_breaks_low_index(self):
        centers = ClusterCenters(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        assert assign_nearest(np.array([0.0, 5.0]), centers) == 0

    def test_matches_linear_scan(self):
        gen = np.random.default_rng(5)
        centers = ClusterCenters(gen.standard_normal((12, 6)))
        for _ in range(50):
            z = gen.standard_normal(6)
            dists = [np.linalg.norm(z - c) for c in centers.centers]
            assert assign_nearest(z, centers) == int(np.argmin(dists))


class TestPositiveLoss:
    def test_tokens_at_centers_zero(self):
        centers = ClusterCenters(np.array([[0.0, 0.0], [3.0, 4.0]]))
        fused = np.array([[[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]]])
        assert positive_loss(fused, centers) == 0.0

    def test_two_token_arithmetic(self):
        centers = ClusterCenters(np.array([[0.0, 0.0]]))
        fused = np.array([[[1.0, 0.0], [0.0, 3.0]]])
        assert positive_loss(fused, centers) == pytest.approx(2.0, abs=1e-15)

    def test_matches_naive_recomputation(self):
        gen = np.random.default_rng(6)
        centers = ClusterCenters(gen.standard_normal((7, 5)))
        fused = gen.standard_normal((3, 2, 4, 5))
        expected = 0.0
        flat = fused.reshape(-1, 5)
        for z in flat:
            expected += min(np.linalg.norm(z - c) for c in centers.centers)
        expected /= len(flat)
        assert abs(positive_loss(fused, centers) - expected) < 1e-12

    def test_permutation_invariant(self):
        gen = np.random.default_rng(7)
        centers = ClusterCenters(gen.standard_normal((4, 3)))
        fused = gen.standard_normal((30, 3))
        perm = gen.permutation(30)
        assert positive_loss(fused, centers) == pytest.approx(
            positive_loss(fused[perm], centers), abs=1e-15)


def two_view_mask_set(t, entries):
    masks = {(0, 1): np.zeros((t, t), np.uint8), (1, 0): np.zeros((t, t), np.uint8)}
    for pair, j, k in entries:
        masks[pair][j, k] = 1
    return EpipolarMaskSet(masks=masks)


class TestNegativeSelection:
    def test_zero_delta_tie_breaks_low_index(self):
        gen = np.random.default_rng(8)
        fused = gen.standard_normal((2, 6, 3))
        ms = two_view_mask_set(6, [((0, 1), j, 2) for j in (1, 3, 5)])
        picks = select_negative_tokens(fused, fused.copy(), ms,
                                       support_view=1, support_token=2, n_k=2)
        assert picks == [(0, 1), (0, 3), (1, 2)]

    def test_single_candidate(self):
        gen = np.random.default_rng(9)
        z = gen.standard_normal((2, 4, 3))
        w = ProjectionWeights(*(gen.standard_normal((3, 3)) for _ in range(4)))
        ms = two_view_mask_set(4, [((0, 1), 2, 1), ((1, 0), 1, 2)])
        neg = synthesize_negatives(z, ms, w, n_k=1, rng_stream=rng.stream(0, "t"))
        got = {(v, j) for v, j, _ in neg.entries}
        assert got == {(0, 2), (1, 1)}

    def test_matches_brute_force_ranking(self):
        gen = np.random.default_rng(10)
        v, t, d = 3, 8, 4
        orig = gen.standard_normal((v, t, d))
        masked = gen.standard_normal((v, t, d))
        masks = {}
        for a in range(v):
            for b in range(v):
                if a != b:
                    masks[(a, b)] = (gen.random((t, t)) < 0.5).astype(np.uint8)
        ms = EpipolarMaskSet(masks=masks)
        b, k, n_k = 1, 5, 2
        picks = select_negative_tokens(orig, masked, ms, b, k, n_k)
        expected = []
        for a in range(v):
            if a == b:
                continue
            cand = [j for j in range(t) if ms.mask(a, b)[j, k]]
            deltas = [(-np.linalg.norm(masked[a, j] - orig[a, j]), j) for j in cand]
            deltas.sort()
            expected.extend((a, j) for _, j in deltas[:n_k])
        expected.append((b, k))
        assert picks == expected

    def test_no_eligible_support_token(self):
        gen = np.random.default_rng(11)
        z = gen.standard_normal((2, 4, 3))
        w = ProjectionWeights(*(gen.standard_normal((3, 3)) for _ in range(4)))
        ms = two_view_mask_set(4, [])
        with pytest.raises(NoEligibleSupportToken):
            synthesize_negatives(z, ms, w, 1, rng.stream(0, "t2"))

    def test_never_picks_unmasked_token(self):
        gen = np.random.default_rng(12)
        z = gen.standard_normal((2, 8, 4))
        w = ProjectionWeights(*(gen.standard_normal((4, 4)) / 2 for _ in range(4)))
        masks = {(0, 1): (gen.random((8, 8)) < 0.3).astype(np.uint8),
                 (1, 0): (gen.random((8, 8)) < 0.3).astype(np.uint8)}
        ms = EpipolarMaskSet(masks=masks)
        for trial in range(20):
            neg = synthesize_negatives(z, ms, w, 2, rng.stream(trial, "pick"))
            b, k = neg.support_view, neg.support_token
            for v, j, _ in neg.entries:
                if v == b and j == k:
                    continue
                assert ms.mask(v, b)[j, k] == 1


class TestNegativeLoss:
    def test_unit_average_distance(self):
        centers = ClusterCenters(np.array([[1.0, 0.0], [-1.0, 0.0]]), per_view=True)
        neg = NegativeSet(entries=[(0, 0, np.zeros(2))], support_view=0, support_token=0)
        assert negative_loss(neg, {0: centers}) == pytest.approx(0.0, abs=1e-15)

    def test_coincident_clamped(self):
        centers = ClusterCenters(np.array([[2.0, 2.0]]), per_view=True)
        neg = NegativeSet(entries=[(0, 0, np.array([2.0, 2.0]))],
                          support_view=0, support_token=0)
        assert negative_loss(neg, {0: centers}) == pytest.approx(-math.log(1e-12), rel=1e-12)

    def test_two_center_arithmetic(self):
        centers = ClusterCenters(np.array([[1.0, 0.0], [3.0, 0.0]]), per_view=True)
        neg = NegativeSet(entries=[(0, 5, np.array([0.0, 0.0]))],
                          support_view=0, support_token=5)
        assert negative_loss(neg, {0: centers}) == pytest.approx(-math.log(2.0), rel=1e-12)


class TestTotalLoss:
    def test_lambda_zero(self):
        assert total_loss(1.5, 99.0, 0.0) == 1.5

    def test_weighted_sum(self):
        assert total_loss(1.0, 2.0, 0.1) == pytest.approx(1.2, abs=1e-15)

    def test_matches_components(self):
        gen = np.random.default_rng(13)
        for _ in range(10):
            p, n, lam = gen.random(3)
            assert total_loss(p, n, lam) == p + lam * n


def end_to_end_loss(z, masked_z, ms, w, shared, view_centers, picks, lam):
    """Total objective with the negative token selection frozen."""
    cache = forward_batch(z[None], ms, w)
    pos = positive_loss(cache.fused, shared)
    masked_cache = forward_batch(masked_z[None], ms, w)
    neg = NegativeSet(entries=[(v, j, masked_cache.fused[0, v, j]) for v, j in picks],
                      support_view=picks[-1][0], support_token=picks[-1][1])
    return total_loss(pos, negative_loss(neg, view_centers), lam)


def analytic_total_grads(z, masked_z, ms, w, shared, view_centers, picks, lam):
    cache = forward_batch(z[None], ms, w)
    _, pos_grad = positive_loss_grad(cache.fused, shared)
    grads = backward_batch(cache, pos_grad)
    masked_cache = forward_batch(masked_z[None], ms, w)
    neg = NegativeSet(entries=[(v, j, masked_cache.fused[0, v, j]) for v, j in picks],
                      support_view=picks[-1][0], support_token=picks[-1][1])
    _, neg_grads = negative_loss_grad(neg, view_centers)
    upstream = np.zeros_like(masked_cache.fused)
    for v, j, g in neg_grads:
        upstream[0, v, j] += g
    grads.scaled_add(backward_batch(masked_cache, upstream), lam)
    return grads


class TestEndToEndGradient:
    @pytest.mark.parametrize("seed", range(3))
    def test_total_loss_gradcheck(self, seed):
        gen = np.random.default_rng(seed + 40)
        v, t, d = 2, 5, 3
        z = gen.standard_normal((v, t, d))
        w = ProjectionWeights(*(gen.standard_normal((d, d)) / math.sqrt(d)
                                for _ in range(4)))
        masks = {}
        for a in range(v):
            for b in range(v):
                if a != b:
                    masks[(a, b)] = (gen.random((t, t)) < 0.6).astype(np.uint8)
        ms = EpipolarMaskSet(masks=masks)
        shared = ClusterCenters(gen.standard_normal((3, d)))
        view_centers = {vi: ClusterCenters(gen.standard_normal((2, d)), per_view=True)
                        for vi in range(v)}
        b, k = 1, 2
        masked_z = z.copy()
        masked_z[b, k] = 0.0
        orig = forward_batch(z[None], ms, w)
        masked = forward_batch(masked_z[None], ms, w)
        picks = select_negative_tokens(orig.fused[0], masked.fused[0], ms, b, k, 1)
        lam = 0.1

        analytic = analytic_total_grads(z, masked_z, ms, w, shared, view_centers, picks, lam)
        h = 1e-5
        for name, a_grad in zip(("w_q", "w_k", "w_v", "w_o"), analytic.as_tuple()):
            num = np.zeros_like(a_grad)
            for idx in np.ndindex(a_grad.shape):
                for sign in (+1, -1):
                    mats = {n: getattr(w, n).copy() for n in ("w_q", "w_k", "w_v", "w_o")}
                    mats[name][idx] += sign * h
                    val = end_to_end_loss(z, masked_z, ms, ProjectionWeights(**mats),
                                          shared, view_centers, picks, lam)
                    num[idx] += sign * val / (2 * h)
            denom = max(np.abs(num).max(), np.abs(a_grad).max(), 1e-12)
            assert np.abs(num - a_grad).max() / denom < 1e-4


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinyset")
    cfg = SceneConfig(seed=3, views=2, grid=PatchGrid(64, 64, 16), feature_dims=8,
                      surface_points=150, anomaly_rate=0.5)
    synth_dataset(cfg, n_train=8, n_test=4, out_dir=out)
    manifest = load_manifest(out / "manifest.json")
    rig = load_rig(out / "rig.json")
    return manifest, rig


class TestTrainLoop:
    def test_smoke_and_traces(self, tiny_dataset):
        manifest, rig = tiny_dataset
        cfg = TrainConfig(epochs=2, batch_samples=4, k_centers=4, seed=1)
        result = train(manifest, rig, cfg)
        assert len(result.loss_trace) == 2
        assert len(result.collapse_trace) == 2
        assert all(np.isfinite(row["total"]) for row in result.loss_trace)
        assert all(c > 0 for c in result.collapse_trace)
        assert all(np.all(np.isfinite(m)) for m in result.weights.as_tuple())

    def test_bit_deterministic(self, tiny_dataset):
        manifest, rig = tiny_dataset
        cfg = TrainConfig(epochs=2, batch_samples=4, k_centers=4, seed=2)
        r1 = train(manifest, rig, cfg)
        r2 = train(manifest, rig, cfg)
        for a, b in zip(r1.weights.as_tuple(), r2.weights.as_tuple()):
            assert a.tobytes() == b.tobytes()
        assert r1.collapse_trace == r2.collapse_trace

    def test_empty_train_split(self, tiny_dataset):
        from dataclasses import replace
        from mvinspect.errors import EmptyTrainSplit
        manifest, rig = tiny_dataset
        empty = replace(manifest, samples=[s for s in manifest.samples if s.split == "test"])
        with pytest.raises(EmptyTrainSplit):
            train(empty, rig, TrainConfig(epochs=1, seed=0))

    def test_single_center_mode_constant_assignment(self):
        # K=1, lambda=0 reduces the objective to mean distance to one center
        gen = np.random.default_rng(20)
        fused = gen.standard_normal((2, 3, 4, 5))
        center = ClusterCenters(fused.reshape(-1, 5).mean(axis=0, keepdims=True))
        loss = positive_loss(fused, center)
        direct = np.linalg.norm(fused.reshape(-1, 5) - center.centers[0], axis=1).mean()
        assert loss == pytest.approx(direct, abs=1e-12)
        assert all(assign_nearest(tok, center) == 0 for tok in fused.reshape(-1, 5)[:16])
