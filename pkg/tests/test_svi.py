import math

import numpy as np
import pytest
from scipy import stats

from mmnlvb.batch import StopConfig, fit_batch
from mmnlvb.data_io import SimSpec, simulate_dataset
from mmnlvb.model import initial_global, Hyperpriors
from mmnlvb.svi import (RatioHistory, SviConfig, batch_controller_step, fit_svi, progress_ratio,
                        robbins_monro_schedule, sample_minibatch, schedule)


def test_schedule_values():
    assert schedule(25, 500) == pytest.approx(0.4)
    assert schedule(500, 500) == 1.0
    assert schedule(75, 125) == pytest.approx(0.7)
    assert schedule(10, 500) == pytest.approx(0.4)
    sizes = [25, 50, 100, 200, 400, 500]
    vals = [schedule(b, 500) for b in sizes]
    assert vals == sorted(vals) and 0.4 <= min(vals) and max(vals) == 1.0


def test_progress_ratio_values():
    assert progress_ratio([0, 1, 2, 5]) == 1.0
    assert progress_ratio([3, 1, 4, 3]) == 0.0
    assert progress_ratio([0, 1, 0.5]) == 1 / 3
    assert progress_ratio([2, 2, 2]) == 1.0
    # only the last M + 1 points count
    assert progress_ratio([0, 5, 0, 1, 2], M=2) == 1.0
    with pytest.raises(ValueError):
        progress_ratio([1.0])


def _history(series, M=20):
    pri = Hyperpriors.default(1)
    g = initial_global(10, pri)
    h = RatioHistory(M)
    for i, (u, m) in enumerate(series):
        g.Upsilon = np.array([[u]])
        g.mu_zeta = np.array([m])
        if i == 0:
            h.reset(g)
        else:
            h.push(g)
    return h


def test_controller_keeps_on_monotone_and_grows_on_oscillation():
    cfg = SviConfig(kappa=2.0)
    mono = _history([(1 + 0.1 * i, 0.05 * i) for i in range(10)])
    assert batch_controller_step(mono, cfg, 25, 500, 500) == (25, 1.0)
    osc = _history([(1 + 0.1 * i, (-1) ** i) for i in range(10)])
    new, r = batch_controller_step(osc, cfg, 25, 500, 500)
    assert new == 50 and r < 0.4
    short = _history([(1, (-1) ** i) for i in range(5)])
    assert batch_controller_step(short, cfg, 25, 500, 500) == (25, None)
    # growth is capped
    assert batch_controller_step(osc, SviConfig(kappa=4.0), 200, 500, 500)[0] == 500


def test_ratio_history_window_and_reset():
    h = _history([(i, i) for i in range(30)], M=5)
    assert len(h.buf) == 6 and h.l == 29
    pri = Hyperpriors.default(1)
    h.reset(initial_global(3, pri))
    assert len(h.buf) == 1 and h.l == 0


def test_minibatches_sample_agents_uniformly():
    rng = np.random.default_rng(0)
    H, B, n = 40, 7, 10_000
    counts = np.zeros(H)
    for _ in range(n):
        idx = sample_minibatch(rng, H, B)
        assert len(np.unique(idx)) == B
        counts[idx] += 1
    expected = n * B / H
    chi2 = np.sum((counts - expected) ** 2 / expected)
    assert stats.chi2.sf(chi2, H - 1) > 0.001


@pytest.fixture(scope="module")
def sim50():
    ds, _ = simulate_dataset(SimSpec(H=50, J=4, K=3, T=8, Omega_true=0.25 * np.eye(3), seed=21))
    return ds


@pytest.mark.parametrize("backend", ["laplace", "ncvmp", "slr"])
def test_full_batch_unit_step_reproduces_batch_fit(sim50, backend):
    a = fit_batch(sim50, backend=backend, seed=2)
    b = fit_svi(sim50, backend=backend, cfg=SviConfig(initial_batch=50, alpha_override=1.0), seed=2)
    assert len(a.trace) == len(b.trace)
    for ra, rb in zip(a.trace, b.trace):
        assert np.max(np.abs(np.subtract(ra["theta"], rb["theta"]))) < 1e-12
    np.testing.assert_array_equal(a.mu, b.mu)


def test_growth_factor_covering_everything_jumps_once(sim50):
    fit = fit_svi(sim50, backend="laplace", cfg=SviConfig(initial_batch=25, kappa=2.0), track_bound=False)
    growth = fit.diagnostics["batch_growth"]
    assert [(o, n) for _, o, n in growth] == [(25, 50)]


def test_batch_size_trace_nondecreasing_and_reaches_H(sim50):
    fit = fit_svi(sim50, backend="ncvmp", cfg=SviConfig(initial_batch=5, kappa=2.0), track_bound=False)
    sizes = [r["batch_size"] for r in fit.trace]
    assert sizes == sorted(sizes) and sizes[-1] == 50 and sizes[0] == 5
    assert fit.converged
    stoch = [r for r in fit.trace if r["phase"] == "stochastic"]
    for r in stoch:
        assert r["alpha"] == pytest.approx(schedule(r["batch_size"], 50, 0.4, 25))
    # constant step within a batch size
    by_size = {}
    for r in stoch:
        by_size.setdefault(r["batch_size"], set()).add(r["alpha"])
    assert all(len(v) == 1 for v in by_size.values())


def test_small_H_starts_in_batch_mode():
    ds, _ = simulate_dataset(SimSpec(H=12, J=3, K=2, T=6, seed=1))
    a = fit_batch(ds, backend="laplace")
    b = fit_svi(ds, backend="laplace")
    assert all(r["phase"] == "batch" for r in b.trace)
    np.testing.assert_array_equal(a.glob.theta(), b.glob.theta())


def test_batch_cap_stops_without_batch_phase(sim50):
    fit = fit_svi(sim50, backend="laplace", cfg=SviConfig(initial_batch=10, kappa=2.0, batch_cap=20),
                  stop=StopConfig(xi_threshold=0.02), track_bound=False)
    assert all(r["phase"] == "stochastic" for r in fit.trace)
    assert max(r["batch_size"] for r in fit.trace) <= 20


def test_svi_reaches_batch_solution(sim50):
    a = fit_batch(sim50, backend="ncvmp", track_bound=False, stop=StopConfig(xi_threshold=1e-5))
    b = fit_svi(sim50, backend="ncvmp", cfg=SviConfig(initial_batch=10, kappa=2.0), track_bound=False,
                stop=StopConfig(xi_threshold=1e-5))
    np.testing.assert_allclose(a.glob.mu_zeta, b.glob.mu_zeta, atol=1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        SviConfig(kappa=1.0).validate(100)
    with pytest.raises(ValueError):
        SviConfig(batch_cap=200).validate(100)
    with pytest.raises(ValueError):
        SviConfig(initial_alpha=0.0).validate(100)
    with pytest.raises(ValueError):
        robbins_monro_schedule(gamma=0.4)
    f = robbins_monro_schedule(d=1.0, D=1.0, gamma=1.0)
    assert f(1) == 0.5 and f(3) == 0.25
