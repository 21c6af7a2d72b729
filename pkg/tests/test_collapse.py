import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hopattn.attention import attn_only_net, init_layer
from hopattn.collapse import (
    BoundConstants, assumption_check, attention_entropy_stats, centered_scores, collapse_report,
    constants_from_trace, cosine_similarity_stats, layer_constants, log_theorem1_bound,
    network_bound, network_bound_log_terms, residual_norm, residual_ratio, single_layer_bound,
    theorem1_bound,
)
from hopattn.errors import ContractError, DegenerateInputError
from hopattn.numcore import residual


def consts(depth=2, ap=0.5, c1=1.0, c2=1.0, n_heads=1, d_k=1):
    return BoundConstants(n_heads, d_k, depth, ap, c1, c2)


class TestResidualRatio:
    def test_rank_one(self):
        assert residual_ratio(np.ones((4, 1)) @ np.array([[2.0, -1.0, 3.0]])) == 0.0

    def test_identity(self):
        r, _ = residual(np.eye(2))
        np.testing.assert_array_equal(r, [[0.5, -0.5], [-0.5, 0.5]])
        assert residual_ratio(np.eye(2)) == 1.0

    def test_zero_input(self):
        with pytest.raises(DegenerateInputError):
            residual_ratio(np.zeros((3, 2)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
    def test_shift_invariance(self, seed, t, d):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(t, d))
        y = rng.normal(0, 10, size=d)
        np.testing.assert_allclose(residual(x + y)[0], residual(x)[0], atol=1e-12)


class TestTheorem1:
    def test_zero_residual(self):
        assert theorem1_bound(0.0, consts()) == 0.0

    def test_empty_network(self):
        assert theorem1_bound(0.37, consts(depth=0)) == pytest.approx(0.37, rel=1e-15)

    def test_exponent_arithmetic(self):
        # r = 8 with H = d_k = 1, so C = 1/16 gives rC = 0.5
        assert theorem1_bound(0.5, consts(depth=2), c=1 / 16) == pytest.approx(2.0**-13, rel=1e-12)

    def test_deep_networks_stay_finite_in_log_space(self):
        lb = log_theorem1_bound(0.5, consts(depth=60), c=1 / 16)
        assert math.isfinite(lb) and lb < -1e28
        assert theorem1_bound(0.5, consts(depth=60), c=1 / 16) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 3), st.floats(0, 3), st.integers(0, 6), st.floats(0, 2))
    def test_monotone_in_residual(self, a, b, depth, c):
        lo, hi = sorted((a, b))
        assert log_theorem1_bound(lo, consts(depth=depth), c=c) <= log_theorem1_bound(
            hi, consts(depth=depth), c=c)


class TestSingleLayer:
    def test_cubic_only(self):
        assert single_layer_bound(0.5, 2.0, 7.0, alpha_prime=0.0) == pytest.approx(4 * 2 * 0.125)

    def test_linear_only(self):
        assert single_layer_bound(0.5, 2.0, 7.0, alpha_prime=1.0) == pytest.approx(4 * 7 * 0.5)

    def test_substitution(self):
        assert single_layer_bound(0.1, 1.0, 1.0, 1, 1, 0.5) == pytest.approx(0.202, rel=1e-12)

    def test_head_scaling(self):
        one = single_layer_bound(0.3, 1.2, 0.7, 1, 4, 0.4)
        assert single_layer_bound(0.3, 1.2, 0.7, 3, 4, 0.4) == pytest.approx(3 * one)

    def test_holds_on_random_layers(self):
        checked = 0
        for seed in range(80):
            rng = np.random.default_rng(seed)
            layers = [init_layer(rng, 6, 2, 3, 0.4, alpha_prime=0.5) for _ in range(2)]
            _, trace = attn_only_net(rng.normal(size=(5, 6)), layers)
            t = trace[1]
            ok, _ = assumption_check(centered_scores(t.x_in, layers[1], t.h_prev))
            if not ok:
                continue
            checked += 1
            c1, c2 = layer_constants(layers[1], t.h_prev)
            bound = single_layer_bound(residual_norm(t.x_in), c1, c2, 2, 3, 0.5)
            assert residual_norm(t.x_out) <= bound
        assert checked >= 20


class TestNetworkBound:
    def test_zero_alpha_prime_keeps_last_term(self):
        c = consts(depth=3, ap=0.0, c1=0.3, c2=0.9)
        terms = network_bound_log_terms(0.7, c)
        assert all(t == -math.inf for t in terms[:-1])
        value, m = network_bound(0.7, c)
        assert m == 3
        assert math.log(value) == pytest.approx(log_theorem1_bound(0.7, c, variant="appendix"),
                                                rel=1e-12)

    def test_linear_term_dominates_small_factors(self):
        c = consts(depth=4, ap=0.5, c1=0.2, c2=0.2, n_heads=1, d_k=16)
        _, b = c.coefficients()
        value, m = network_bound(0.5, c)
        assert m == 0
        assert value == pytest.approx(b**4 * 0.5, rel=1e-12)

    def test_one_layer_enumeration(self):
        c = consts(depth=1, ap=0.3, c1=0.8, c2=1.7, n_heads=2, d_k=4)
        a, b = c.coefficients()
        res = 0.9
        value, m = network_bound(res, c)
        assert value == pytest.approx(max(b * res, a * res**3), rel=1e-12)
        assert a * res**3 + b * res == pytest.approx(single_layer_bound(res, 0.8, 1.7, 2, 4, 0.3))

    def test_coefficient_variants(self):
        c = consts(depth=1, ap=0.25, c1=1.0, c2=2.0, n_heads=3, d_k=9)
        main, app = c.coefficients("main"), c.coefficients("appendix")
        assert main[0] == pytest.approx(2 * app[0]) and main[1] == pytest.approx(2 * app[1])
        assert c.r == pytest.approx(8.0)
        with pytest.raises(ValueError):
            c.coefficients("other")

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            consts(c1=-1.0)
        with pytest.raises(ValueError):
            network_bound(-0.1, consts())


class TestAssumption:
    def test_constant_matrix(self):
        assert assumption_check(np.full((3, 3), 2.5)) == (True, 0.0)

    def test_threshold_crossing(self):
        ok, spread = assumption_check(np.array([[0.0, 0.0], [0.0, 1.3]]))
        assert not ok and spread == pytest.approx(1.3)

    def test_small_init_passes(self, rng):
        layer = init_layer(rng, 32, 2, 8, 0.02)
        x = rng.normal(size=(8, 32))
        ok, spread = assumption_check(centered_scores(x, layer, np.zeros((2, 8, 8))))
        assert ok and spread < 0.2


class TestCosine:
    def test_identical_tokens(self):
        s = cosine_similarity_stats(np.tile([1.0, 2.0, -1.0], (4, 1)))
        np.testing.assert_allclose(s.similarities, 1.0, atol=1e-15)
        assert s.mode > 0.99 and s.fraction_above(0.99) == 1.0

    def test_orthogonal(self):
        s = cosine_similarity_stats(np.eye(2))
        np.testing.assert_allclose(s.similarities, [0.0], atol=1e-15)

    def test_hand_example(self):
        x = np.vstack([np.eye(2), [1 / math.sqrt(2), 1 / math.sqrt(2)]])
        s = cosine_similarity_stats(x)
        np.testing.assert_allclose(sorted(s.similarities), [0, math.sqrt(2) / 2, math.sqrt(2) / 2],
                                   atol=1e-15)

    def test_histogram(self, rng):
        s = cosine_similarity_stats(rng.normal(size=(20, 5)))
        assert len(s.bin_centers) == 200 and len(s.similarities) == 190
        assert np.sum(s.density) * 2 / 200 == pytest.approx(1.0)

    def test_zero_rows(self):
        s = cosine_similarity_stats(np.array([[1.0, 0], [0, 0], [0, 2.0]]))
        assert s.n_zero_rows == 1 and len(s.similarities) == 1
        with pytest.raises(DegenerateInputError):
            cosine_similarity_stats(np.zeros((3, 2)))


class TestEntropy:
    def test_uniform(self):
        assert attention_entropy_stats(np.full((1, 4), 0.25)).row_entropy[0] == pytest.approx(
            math.log(4), abs=1e-15)

    def test_one_hot(self):
        assert attention_entropy_stats(np.eye(3)).row_entropy.tolist() == [0.0, 0.0, 0.0]

    def test_two_terms(self):
        e = attention_entropy_stats(np.array([[0.5, 0.5, 0.0, 0.0]])).row_entropy[0]
        assert e == pytest.approx(math.log(2), abs=1e-15)

    def test_malformed(self):
        with pytest.raises(ContractError):
            attention_entropy_stats(np.array([[0.5, 0.6]]))
        with pytest.raises(ContractError):
            attention_entropy_stats(np.array([[1.5, -0.5]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 12), st.floats(0.01, 20))
    def test_bounds(self, seed, t, scale):
        rng = np.random.default_rng(seed)
        s = rng.normal(0, scale, size=(2, t, t))
        p = np.exp(s - s.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        e = attention_entropy_stats(p)
        assert np.all(e.row_entropy >= -1e-12) and np.all(e.row_entropy <= math.log(t) + 1e-12)
        assert e.head_mean.shape == (2,)


def test_collapse_report(rng):
    layers = [init_layer(rng, 8, 2, 4, 0.3, alpha_prime=0.5) for _ in range(3)]
    x = rng.normal(size=(6, 8))
    _, trace = attn_only_net(x, layers)
    report = collapse_report(x, layers, trace, seed=1, model_kind="mha")
    assert report.depth == 3
    assert np.all(report.ratios() >= 0)
    rows = report.metric_rows()
    assert {r[0] for r in rows} == {1, 2, 3}
    assert {"ratio", "theorem1", "single_layer", "network", "assumption_ok"} <= {r[1] for r in rows}
    final = constants_from_trace(layers, trace)
    assert final.depth == 3 and final.c2 > 0
