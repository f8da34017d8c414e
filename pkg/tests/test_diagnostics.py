from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gram_singular_values
from rankshift.data import generate_synthetic
from rankshift.diagnostics import (
    compute_budget,
    effective_rank,
    format_value,
    head_reconstruction,
    lambda_timeseries,
    layer_spectrum,
    spectral_ratio,
    tail_reconstruction_heatmap,
)
from rankshift.errors import ConfigError, ParameterError
from rankshift.layers import conv, mlp
from rankshift.rank_adjust import reparameterize
from rankshift.schedule import LrSchedule, RankSchedule, TrainOptions, train


class TestSpectralRatio:
    def test_orthogonal(self):
        Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
        assert spectral_ratio(Q).lam == pytest.approx(1.0, abs=1e-12)

    def test_diagonal(self):
        assert spectral_ratio(np.diag([5.0, 0.5])).lam == pytest.approx(10.0, rel=1e-14)

    def test_matches_gram_oracle(self):
        W = np.random.default_rng(1).normal(size=(12, 12))
        s = gram_singular_values(W)
        assert abs(spectral_ratio(W).lam - s[0] / s[-1]) <= 1e-8 * s[0] / s[-1]

    def test_zero_matrix(self):
        spec = spectral_ratio(np.zeros((3, 4)))
        assert math.isinf(spec.lam) and spec.empty and spec.sigmas.size == 0

    def test_cutoff(self):
        assert math.isinf(spectral_ratio(np.diag([1.0, 1e-7])).lam)
        assert spectral_ratio(np.diag([1.0, 1e-5])).lam == pytest.approx(1e5)

    def test_kernel_unfolding(self):
        K = np.random.default_rng(2).normal(size=(3, 3, 4, 5))
        assert spectral_ratio(K).lam == pytest.approx(spectral_ratio(K.reshape(36, 5)).lam, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(m=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 2**31))
    def test_at_least_one(self, m, n, seed):
        lam = spectral_ratio(np.random.default_rng(seed).normal(size=(m, n))).lam
        assert math.isinf(lam) or lam >= 1.0


def test_layer_spectrum_and_effective_rank():
    rng = np.random.default_rng(3)
    layer = reparameterize(conv(3, 3, 4, 6, rng), 2, "svd")
    rep = layer_spectrum(layer)
    assert rep["effective_rank"] == 2 and math.isinf(rep["lambda"]) and rep["shape"] == [36, 6]
    assert effective_rank(np.array([]), (2, 2)) == 0
    assert layer_spectrum(layer, "hc_wf")["shape"] == [12, 18]


class TestBudget:
    def test_published_ratio(self):
        b = compute_budget(272762, 155170, 150, 60, 135)
        assert b.comp_ratio == pytest.approx(0.7844, abs=1e-4)
        assert b.T_F == 150 * 272762 and b.T_low == 150 * 155170

    def test_degenerate_window(self):
        b = compute_budget(1000, 400, 10, 5, 5)
        assert b.comp_ratio == pytest.approx(0.4)

    def test_full_window(self):
        assert compute_budget(1000, 400, 10, 1, 11).comp_ratio == 1.0

    def test_pure_modes(self):
        assert compute_budget(1000, 400, 10).comp_ratio == pytest.approx(0.4)
        assert compute_budget(1000, 400, 10, I=1).comp_ratio == 1.0
        assert compute_budget(1000, 400, 10, D=6).phi == 0.5

    def test_ordering_and_affine(self):
        ratios = []
        for w in range(0, 11):
            b = compute_budget(1000, 400, 10, 1, 1 + w)
            assert b.T_low <= b.T_DR <= b.T_F and 0 < b.comp_ratio <= 1
            ratios.append(b.comp_ratio)
        steps = np.diff(ratios)
        assert np.all(steps > 0) and np.allclose(steps, steps[0])

    def test_invalid(self):
        with pytest.raises(ConfigError) as exc:
            compute_budget(0, -1, 10, 6, 3)
        assert len(exc.value.problems) == 2
        with pytest.raises(ConfigError):
            compute_budget(10, 5, 4, 1, 8)

    def test_to_dict(self):
        d = compute_budget(100, 50, 10, 2, 7).to_dict()
        assert d["phi"] == 0.5 and d["comp_ratio"] == pytest.approx(0.75)


class TestHeatmap:
    def test_full_tail_is_identity(self):
        W = np.random.default_rng(4).normal(size=(6, 4))
        assert np.allclose(tail_reconstruction_heatmap(W, 4), W, atol=1e-10)

    def test_zero_tail(self):
        assert np.array_equal(tail_reconstruction_heatmap(np.ones((3, 3)), 0), np.zeros((3, 3)))

    def test_known_rank(self):
        rng = np.random.default_rng(5)
        W = rng.normal(size=(8, 3)) @ rng.normal(size=(3, 8))
        assert np.linalg.norm(tail_reconstruction_heatmap(W, 5)) <= 1e-8

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            tail_reconstruction_heatmap(np.ones((3, 4)), 4)

    def test_square_fold_of_conv_kernel(self):
        K = np.random.default_rng(6).normal(size=(3, 3, 64, 64))
        H = tail_reconstruction_heatmap(K, 50, "hc_wf")
        assert H.shape == (192, 192)

    @settings(max_examples=40, deadline=None)
    @given(m=st.integers(1, 9), n=st.integers(1, 9), seed=st.integers(0, 2**31), data=st.data())
    def test_tail_plus_head(self, m, n, seed, data):
        W = np.random.default_rng(seed).normal(size=(m, n))
        p = min(m, n)
        t = data.draw(st.integers(0, p))
        total = tail_reconstruction_heatmap(W, t) + head_reconstruction(W, p - t)
        assert np.allclose(total, W, rtol=0, atol=1e-10)


def test_format_value():
    assert format_value(math.inf) == "inf"
    assert format_value(-math.inf) == "-inf"
    assert format_value(math.nan) == "nan"
    assert float(format_value(0.1)) == 0.1


class TestLambdaTimeseries:
    def run(self, epochs, lr):
        ds = generate_synthetic("gaussian-mixture-2", 60, 0)
        net = mlp([2, 4, 2], np.random.default_rng(0))
        return train(net, ds, LrSchedule(lr), RankSchedule(epochs, rho=1.0), TrainOptions(batch_size=8))

    def test_single_epoch(self):
        header, rows = lambda_timeseries(self.run(1, 0.1))
        assert header == ["epoch", "lambda_0", "lambda_1"] and len(rows) == 1

    def test_constant_without_updates(self):
        _, rows = lambda_timeseries(self.run(3, 0.0))
        cols = np.array(rows)[:, 1:]
        assert np.all(cols == cols[0])
