import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from outfitret import numgraph as ng
from outfitret.interaction import (batch_similarity, info_nce, info_nce_terms, wti_matrix,
                                   wti_similarity)


def zero_head(d):
    return {"weight": np.zeros((d, 1)), "bias": np.zeros(1)}


def random_head(d, rng):
    return {"weight": rng.normal(size=(d, 1)), "bias": rng.normal(size=1)}


def score(e_o, e_t, p=0.2, ho=None, ht=None, **kw):
    d = np.shape(e_o)[-1]
    ho = ho or zero_head(d)
    ht = ht or zero_head(d)
    return float(wti_similarity(np.asarray(e_o, float), np.asarray(e_t, float), ho, ht, p, **kw).value)


class TestWtiExamples:
    @pytest.mark.parametrize("p", [0.0, 0.2, 1.0])
    def test_identical_single_pair(self, p):
        assert score([[0.3, -1.2, 2.0]], [[0.3, -1.2, 2.0]], p) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal_single_pair(self):
        assert score([[1.0, 0.0]], [[0.0, 3.0]]) == 0.0

    def test_two_by_two_example(self):
        r = math.sqrt(2) / 2
        got = score([[1, 0], [0, 1]], [[1, 0], [r, r]], p=0.2)
        assert got == pytest.approx(0.85355, abs=1e-5)
        assert got == pytest.approx(oracles.wti([[1, 0], [0, 1]], [[1, 0], [r, r]], p=0.2), abs=1e-12)

    def test_random_heads_match_oracle(self, rng):
        for _ in range(10):
            e_o, e_t = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
            ho, ht = random_head(6, rng), random_head(6, rng)
            want = oracles.wti(e_o, e_t, ho["weight"][:, 0], ho["bias"][0], ht["weight"][:, 0],
                               ht["bias"][0], p=0.35)
            assert score(e_o, e_t, 0.35, ho, ht) == pytest.approx(want, abs=1e-12)

    def test_t2o_matches_first_term(self, rng):
        e_o, e_t = rng.normal(size=(5, 4)), rng.normal(size=(2, 4))
        ho = random_head(4, rng)
        want = oracles.wti(e_o, e_t, ho["weight"][:, 0], ho["bias"][0], terms="t2o")
        assert score(e_o, e_t, 0.2, ho, terms="t2o") == pytest.approx(want, abs=1e-12)

    def test_masked_tokens_are_ignored(self, rng):
        e_o, e_t = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
        ho, ht = random_head(5, rng), random_head(5, rng)
        mask_o, mask_t = np.array([1, 0, 1, 1], bool), np.array([0, 1, 1], bool)
        full = score(e_o, e_t, 0.2, ho, ht, mask_o=mask_o, mask_t=mask_t)
        assert full == pytest.approx(score(e_o[mask_o], e_t[mask_t], 0.2, ho, ht), abs=1e-12)

    def test_all_masked_side_is_error(self):
        with pytest.raises(ng.GraphError, match="masked"):
            score([[1.0, 0.0]], [[1.0, 0.0]], mask_o=np.array([False]))


class TestWtiProperties:
    def test_p_zero_is_first_term(self, rng):
        for _ in range(20):
            e_o, e_t = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
            ho, ht = random_head(4, rng), random_head(4, rng)
            assert score(e_o, e_t, 0.0, ho, ht) == score(e_o, e_t, 0.0, ho, ht, terms="t2o")

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 6), st.integers(1, 6))
    def test_permutation_invariance(self, seed, no, nt):
        rng = np.random.default_rng(seed)
        e_o, e_t = rng.normal(size=(no, 4)), rng.normal(size=(nt, 4))
        ho, ht = random_head(4, rng), random_head(4, rng)
        base = score(e_o, e_t, 0.2, ho, ht)
        shuffled = score(e_o[rng.permutation(no)], e_t[rng.permutation(nt)], 0.2, ho, ht)
        assert shuffled == pytest.approx(base, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0, 1))
    def test_bounded_by_one(self, seed, p):
        rng = np.random.default_rng(seed)
        s = score(rng.normal(size=(3, 4)), rng.normal(size=(4, 4)), p, random_head(4, rng), random_head(4, rng))
        assert -1 - 1e-12 <= s <= 1 + 1e-12

    def test_width_mismatch(self):
        with pytest.raises(ng.GraphError, match="widths"):
            wti_matrix(np.ones((1, 2, 3)), np.ones((1, 2, 4)), zero_head(3), zero_head(4), 0.2)

    def test_bad_terms(self):
        with pytest.raises(ValueError):
            wti_matrix(np.ones((1, 2, 3)), np.ones((1, 2, 3)), zero_head(3), zero_head(3), 0.2, terms="o2t")


def padded(sets, width):
    n = max(len(s) for s in sets)
    e = np.zeros((len(sets), n, width))
    m = np.zeros((len(sets), n), bool)
    for b, s in enumerate(sets):
        e[b, :len(s)] = s
        m[b, :len(s)] = True
    return e, m


class TestBatchSimilarity:
    def test_matches_per_pair_oracle(self, rng):
        outs = [rng.normal(size=(n, 6)) for n in (1, 3, 5, 2)]
        texts = [rng.normal(size=(n, 6)) for n in (4, 1, 2, 7)]
        ho, ht = random_head(6, rng), random_head(6, rng)
        e_o, m_o = padded(outs, 6)
        e_t, m_t = padded(texts, 6)
        S = batch_similarity(e_o, m_o, e_t, m_t, ho, ht, 0.2).value
        for n in range(4):
            for m in range(4):
                want = oracles.wti(outs[n], texts[m], ho["weight"][:, 0], ho["bias"][0],
                                   ht["weight"][:, 0], ht["bias"][0], p=0.2)
                assert abs(S[n, m] - want) < 1e-6

    def test_single_pair(self, rng):
        e_o, e_t = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        S = batch_similarity(e_o[None], None, e_t[None], None, zero_head(4), zero_head(4), 0.2).value
        assert S.shape == (1, 1)
        assert S[0, 0] == pytest.approx(score(e_o, e_t), abs=1e-15)

    def test_duplicated_pair(self, rng):
        e_o, e_t = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        S = batch_similarity(np.stack([e_o, e_o]), None, np.stack([e_t, e_t]), None,
                             zero_head(4), zero_head(4), 0.2).value
        assert np.all(S == S[0, 0])

    def test_relabelling_permutes_matrix(self, rng):
        outs = [rng.normal(size=(3, 4)) for _ in range(4)]
        texts = [rng.normal(size=(2, 4)) for _ in range(4)]
        perm = rng.permutation(4)
        e_o, e_t = np.stack(outs), np.stack(texts)
        S = batch_similarity(e_o, None, e_t, None, zero_head(4), zero_head(4), 0.2).value
        P = batch_similarity(e_o[perm], None, e_t[perm], None, zero_head(4), zero_head(4), 0.2).value
        np.testing.assert_allclose(P, S[np.ix_(perm, perm)], atol=1e-15)


class TestInfoNce:
    def test_identity_closed_form(self):
        got = float(info_nce(np.eye(2), 1.0).value)
        assert got == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-12)
        assert got == pytest.approx(0.62652, abs=1e-4)

    def test_constant_matrix(self):
        assert float(info_nce(np.full((2, 2), 0.3), 1.0).value) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_matches_oracle(self, rng):
        S = rng.uniform(-1, 1, (5, 5))
        assert float(info_nce(S, 7.0).value) == pytest.approx(oracles.info_nce(S, 7.0), abs=1e-10)

    def test_divide_mode(self, rng):
        S = rng.uniform(-1, 1, (3, 3))
        got = float(info_nce(S, 100.0, "divide").value)
        assert got == pytest.approx(oracles.info_nce(S, 100.0, divide=True), abs=1e-12)
        # the literal reading leaves the softmax almost uniform
        assert got == pytest.approx(2 * math.log(3), abs=0.05)

    def test_unknown_temperature_mode(self):
        with pytest.raises(ValueError):
            info_nce(np.eye(2), 1.0, "multiply")

    def test_monotone_limit(self):
        values = [float(info_nce(c * np.eye(3), 1.0).value) for c in (0.5, 1, 2, 5, 10, 20, 40)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] < 1e-6

    def test_nonnegative_when_diagonal_dominates(self, rng):
        for _ in range(20):
            S = rng.uniform(-1, 0.5, (4, 4))
            np.fill_diagonal(S, 0.9)
            assert float(info_nce(S, 3.0).value) >= 0

    def test_non_square(self):
        with pytest.raises(ng.GraphError, match="square"):
            info_nce(np.ones((2, 3)))

    def test_row_shift_changes_only_column_term(self, rng):
        S = rng.uniform(-1, 1, (4, 4))
        shifted = S.copy()
        shifted[1] += 0.7
        r0, c0 = (float(t.value) for t in info_nce_terms(S, 2.0))
        r1, c1 = (float(t.value) for t in info_nce_terms(shifted, 2.0))
        assert r1 == pytest.approx(r0, abs=1e-12)
        assert abs(c1 - c0) > 1e-3

    def test_gradient_of_loss(self, rng):
        S = rng.uniform(-1, 1, (3, 3))
        leaf = ng.leaf(S)
        g = ng.gradients(info_nce(leaf, 2.0), [leaf])[leaf]
        h = 1e-6
        numeric = np.zeros_like(S)
        for idx in np.ndindex(S.shape):
            up, down = S.copy(), S.copy()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = (oracles.info_nce(up, 2.0) - oracles.info_nce(down, 2.0)) / (2 * h)
        np.testing.assert_allclose(g, numeric, atol=1e-7)
