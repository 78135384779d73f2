import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from helpers import random_samples, randomize
from outfitret import numgraph as ng
from outfitret.config import Hyperparams
from outfitret.dataio import OutfitSample, collate
from outfitret.encoders import init_transformer
from outfitret.outfit import total_loss
from outfitret.params import HeadParams
from outfitret.style import (cluster_count, cluster_tokens, extract_styles, greedy_init, kmeans,
                             random_init, sample_rng, style_tokens)


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestClusterCount:
    @pytest.mark.parametrize("n,k,c", [(4, 1 / 3, 1), (19, 1 / 3, 6), (7, 1 / 6, 1), (12, 1 / 6, 2),
                                       (12, 1 / 3, 4), (3, 1 / 3, 1), (1, 1 / 6, 1), (5, 1.0, 5)])
    def test_table(self, n, k, c):
        assert cluster_count(n, k) == c == oracles.cluster_count(n, k)

    @pytest.mark.parametrize("n,k", [(0, 0.5), (3, 0.0), (3, 1.5)])
    def test_bad_inputs(self, n, k):
        with pytest.raises(ValueError):
            cluster_count(n, k)

    @given(st.integers(1, 200), st.floats(0.01, 1.0))
    def test_bounds(self, n, k):
        assert 1 <= cluster_count(n, k) <= n


class TestGreedyInit:
    def test_opposite_ends(self):
        x = np.array([[0.0], [0.1], [10.0], [10.1]])
        _, idx = greedy_init(x, 2)
        assert {int(i) // 2 for i in idx} == {0, 1}

    def test_first_seed_maximizes_total_distance(self, rng):
        x = rng.normal(size=(9, 3))
        _, idx = greedy_init(x, 1)
        assert idx.tolist() == oracles.greedy_seeds(x.tolist(), 1)

    def test_matches_oracle(self, rng):
        for _ in range(10):
            x = rng.normal(size=(11, 4))
            _, idx = greedy_init(x, 4)
            assert idx.tolist() == oracles.greedy_seeds(x.tolist(), 4)

    def test_identical_points_tie_break(self, caplog):
        x = np.ones((3, 2))
        with caplog.at_level("WARNING"):
            _, idx = greedy_init(x, 2)
        assert idx.tolist() == [0, 1]
        assert "degenerate" in caplog.text

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            greedy_init(np.ones((2, 2)), 3)

    def test_one_seed_per_blob(self, rng):
        centers = np.array([[10.0, 0, 0], [0, 10.0, 0], [0, 0, 10.0]])
        x = np.concatenate([c + 0.1 * rng.normal(size=(5, 3)) for c in centers])
        for c in (2, 3):
            _, idx = greedy_init(x, c)
            blobs = [int(i) // 5 for i in idx]
            assert len(set(blobs)) == c

    def test_random_init_distinct(self, rng):
        _, idx = random_init(rng.normal(size=(6, 2)), 4, np.random.default_rng(3))
        assert len(set(idx.tolist())) == 4


def two_blobs(rng, sigma=0.05, n=12, d=3):
    a = np.zeros(d)
    b = np.zeros(d)
    b[0] = 10 * sigma
    x = np.concatenate([a + sigma * rng.normal(size=(n // 2, d)), b + sigma * rng.normal(size=(n // 2, d))])
    return x, a, b


class TestKmeans:
    def test_single_cluster_is_mean(self, rng):
        x = rng.normal(size=(7, 3))
        out = kmeans(x, x[:1])
        np.testing.assert_allclose(out.centroids[0], x.mean(axis=0), atol=1e-15)
        assert out.iterations <= 1

    def test_fixed_point(self):
        x = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0]])
        init = np.array([[0.0, 0.5], [5.0, 0.5]])
        out = kmeans(x, init)
        assert out.iterations == 0
        np.testing.assert_array_equal(out.centroids, init)

    def test_planted_blobs(self, rng):
        sigma = 0.05
        x, a, b = two_blobs(rng, sigma)
        seeds, idx = greedy_init(x, 2)
        assert {int(i) // 6 for i in idx} == {0, 1}
        out = kmeans(x, seeds)
        planted = np.repeat([0, 1], 6)
        if out.assignments[0] == 1:
            planted = 1 - planted
        np.testing.assert_array_equal(out.assignments, planted)
        bound = 3 * sigma / np.sqrt(6)
        for j, mean in ((planted[0], a), (planted[-1], b)):
            assert np.max(np.abs(out.centroids[j] - mean)) < bound

    def test_matches_oracle(self, rng):
        x = unit_rows(rng.normal(size=(13, 4)))
        seeds, idx = greedy_init(x, 3)
        out = kmeans(x, seeds)
        C, assign = oracles.kmeans(x.tolist(), idx.tolist())
        assert out.assignments.tolist() == assign
        np.testing.assert_allclose(out.centroids, C, atol=1e-12)

    def test_objective_non_increasing(self, rng):
        for _ in range(10):
            x = unit_rows(rng.normal(size=(19, 5)))
            seeds, _ = random_init(x, 6, rng)
            hist = kmeans(x, seeds).history
            assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_empty_cluster_repair(self):
        x = np.array([[0.0], [0.1], [0.2], [5.0]])
        out = kmeans(x, np.array([[0.1], [0.1], [5.0]]))
        assert (out.sizes() >= 1).all()
        assert out.sizes().sum() == 4

    def test_centroids_are_member_means(self, rng):
        x = unit_rows(rng.normal(size=(15, 3)))
        out = cluster_tokens(x, 1 / 3)
        for j in range(out.count):
            np.testing.assert_allclose(out.centroids[j], x[out.assignments == j].mean(axis=0), atol=1e-15)

    def test_deterministic(self, rng):
        x = unit_rows(rng.normal(size=(12, 4)))
        runs = [cluster_tokens(x, 1 / 3).centroids for _ in range(10)]
        assert all(np.array_equal(runs[0], r) for r in runs)

    def test_permutation_invariant_as_set(self, rng):
        x = unit_rows(rng.normal(size=(12, 4)))
        a = cluster_tokens(x, 1 / 3).centroids
        b = cluster_tokens(x[rng.permutation(12)], 1 / 3).centroids
        key = lambda m: m[np.lexsort(m.T[::-1])]
        np.testing.assert_allclose(key(a), key(b), atol=1e-12)

    def test_sample_rng_stable(self):
        a = sample_rng(3, "o001").integers(0, 1 << 30, 4)
        b = sample_rng(3, "o001").integers(0, 1 << 30, 4)
        c = sample_rng(3, "o002").integers(0, 1 << 30, 4)
        assert a.tolist() == b.tolist() != c.tolist()


def random_encoder(dim, rng, scale=0.3):
    p = init_transformer(dim, rng, dtype=np.float64)
    return {k: (1.0 if k.endswith("_g") else 0.0) + rng.uniform(-scale, scale, v.shape) for k, v in p.items()}


class TestStyleTokens:
    def test_singleton(self, rng):
        enc = random_encoder(4, rng)
        e = rng.normal(size=(1, 4))
        node, tok = style_tokens(e, {k: ng.const(v) for k, v in enc.items()}, 1 / 3, heads=2)
        expected = oracles.normalize(oracles.transformer(e, enc, 2)[0])
        assert tok.count == 1
        np.testing.assert_allclose(node.value[0], expected, atol=1e-12)

    def test_identity_encoder_clusters_normalized_input(self, rng):
        enc = init_transformer(4, rng, dtype=np.float64)
        e = rng.normal(size=(9, 4))
        _, tok = style_tokens(e, {k: ng.const(v) for k, v in enc.items()}, 1 / 3, heads=2)
        direct = cluster_tokens(unit_rows(e), 1 / 3)
        np.testing.assert_allclose(tok.centroids, direct.centroids, atol=1e-15)

    def test_matches_oracle_pipeline(self, rng):
        enc = random_encoder(4, rng)
        e = rng.normal(size=(12, 4))
        node, _ = style_tokens(e, {k: ng.const(v) for k, v in enc.items()}, 1 / 3, heads=2)
        np.testing.assert_allclose(node.value, oracles.styles(e, enc, 1 / 3, 2), atol=1e-10)

    def test_padding_is_ignored(self, rng):
        enc = {k: ng.const(v) for k, v in random_encoder(4, rng).items()}
        e = rng.normal(size=(2, 7, 4))
        mask = np.ones((2, 7), bool)
        mask[0, 5:] = False
        batch = extract_styles(ng.const(e), mask, enc, 1 / 3, heads=2)
        alone, _ = style_tokens(e[0, :5], enc, 1 / 3, heads=2)
        np.testing.assert_allclose(batch.centroids.value[0, :1], alone.value, atol=1e-12)
        assert batch.mask.tolist() == [[True, False], [True, True]]
        assert all(t.sizes().sum() == m.sum() for t, m in zip(batch.tokens, mask))

    def test_member_gradient_is_centroid_gradient_over_m(self, rng):
        enc = {k: ng.leaf(v) for k, v in random_encoder(4, rng).items()}
        e = rng.normal(size=(1, 12, 4))
        batch = extract_styles(ng.const(e), np.ones((1, 12), bool), enc, 1 / 3, heads=2)
        w = rng.normal(size=batch.centroids.shape)
        loss = ng.sum(ng.mul(batch.centroids, w))
        g = ng.gradients(loss, [batch.encoded, batch.centroids])
        tok = batch.tokens[0]
        sizes = tok.sizes()
        for i, j in enumerate(tok.assignments):
            np.testing.assert_allclose(g[batch.encoded][0, i], g[batch.centroids][0, j] / sizes[j], atol=1e-14)

    def test_fd_through_centroids(self, rng):
        raw = random_encoder(4, rng)
        e = rng.normal(size=(1, 9, 4))
        w = rng.normal(size=(1, 3, 4))
        mask = np.ones((1, 9), bool)

        def value(x):
            b = extract_styles(ng.const(x), mask, {k: ng.const(v) for k, v in raw.items()}, 1 / 3, heads=2)
            return float(np.sum(b.centroids.value * w))

        leaf = ng.leaf(e)
        b = extract_styles(leaf, mask, {k: ng.const(v) for k, v in raw.items()}, 1 / 3, heads=2)
        g = ng.gradients(ng.sum(ng.mul(b.centroids, w)), [leaf])[leaf]
        numeric = np.zeros_like(e)
        for idx in np.ndindex(e.shape):
            up, down = e.copy(), e.copy()
            up[idx] += 1e-5
            down[idx] -= 1e-5
            numeric[idx] = (value(up) - value(down)) / 2e-5
        np.testing.assert_allclose(g, numeric, atol=1e-7)


def style_loss_oracle(samples, params, hyper):
    P = {k: np.asarray(v, np.float64) for k, v in params.items()}

    def group(prefix):
        return {k.split(".", 1)[1]: v for k, v in P.items() if k.startswith(prefix + ".")}

    def adapt(x, side):
        return [oracles._affine(r, P[f"adapter_{side}.weight"], P[f"adapter_{side}.bias"]) for r in x]

    C_o = [oracles.styles(adapt(s.e_o, "o"), group("enc_style_o"), hyper.k_o, hyper.heads) for s in samples]
    C_t = [oracles.styles(adapt(s.e_t, "t"), group("enc_style_t"), hyper.k_t, hyper.heads) for s in samples]
    S = [[oracles.wti(C_o[n], C_t[m], P["wti_style_o.weight"][:, 0], P["wti_style_o.bias"][0],
                      P["wti_style_t.weight"][:, 0], P["wti_style_t.bias"][0], p=hyper.p)
          for m in range(len(samples))] for n in range(len(samples))]
    return oracles.info_nce(S, hyper.logit_scale)


class TestStyleLoss:
    def test_b2_matches_scripted_pipeline(self, rng):
        hyper = Hyperparams(dim=4, heads=2, logit_scale=5.0)
        params = randomize(HeadParams.init(hyper, np.float64), rng)
        samples = random_samples(rng, 2, 4, n_o=(6, 9), n_t=(6, 12))
        report = total_loss(collate(samples, np.float64), params.leaves(False), hyper, ("style",))
        assert report.style == pytest.approx(style_loss_oracle(samples, params, hyper), abs=1e-10)

    def test_single_centroid_reduces_to_item_form(self):
        hyper = Hyperparams(dim=2, heads=1, logit_scale=1.0)
        params = HeadParams.init(hyper, np.float64)
        vecs = [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]
        samples = [OutfitSample(f"o{i}", ["a"], v, ["w"], v.copy()) for i, v in enumerate(vecs)]
        report = total_loss(collate(samples, np.float64), params.leaves(False), hyper, ("item", "style"))
        assert report.style == pytest.approx(0.62652, abs=1e-4)
        assert report.style == pytest.approx(report.item, abs=1e-12)
