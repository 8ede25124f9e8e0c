"""Coordinate-ascent variational inference over all agents (batch mode)."""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln

from ._linalg import spd_inverse
from .conjugate import conjugate_sweep
from .local import Backend, SlrConfig, agent_normals, laplace_block, ncvmp_block, slr_block
from .model import ChoiceDataset, GlobalVarParams, Hyperpriors, initial_global, stacked_expected_f_delta, stacked_f

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """The fixed-point iteration ran away."""


@dataclass
class StopConfig:
    xi_threshold: float = 0.005
    smoothing_window: int = 5
    max_sweeps: int = 500

    def __post_init__(self):
        if not self.xi_threshold > 0:
            raise ValueError("xi_threshold must be positive")
        if self.smoothing_window < 1 or self.max_sweeps < 1:
            raise ValueError("smoothing_window and max_sweeps must be >= 1")


@dataclass
class FitResult:
    glob: GlobalVarParams
    mu: np.ndarray  # (H, K)
    Sigma: np.ndarray  # (H, K, K)
    trace: list
    diagnostics: dict
    converged: bool
    backend: str
    agent_ids: list = field(default_factory=list)
    priors: Optional[Hyperpriors] = None
    config: dict = field(default_factory=dict)

    def local(self, h: int):
        from .model import LocalVarParams
        return LocalVarParams(self.mu[h], self.Sigma[h])

    @property
    def n_sweeps(self) -> int:
        return len(self.trace)


def stopping_statistic(prev, new) -> float:
    """Largest relative change between two monitored vectors.

    Components whose previous value is below 1e-12 in magnitude use the
    absolute change instead.
    """
    prev = np.asarray(prev, dtype=float)
    new = np.asarray(new, dtype=float)
    if prev.shape != new.shape:
        raise ValueError("vectors must have the same length")
    diff = np.abs(new - prev)
    den = np.abs(prev)
    small = den < 1e-12
    rel = np.where(small, diff, diff / np.where(small, 1.0, den))
    return float(np.max(rel)) if rel.size else 0.0


class ThetaMonitor:
    """Tracks xi on the monitored vector, optionally on trailing averages (used for SLR)."""

    def __init__(self, window: int = 1):
        self.window = window
        self.buf = deque(maxlen=window)
        self.prev = None

    def push(self, theta) -> float:
        self.buf.append(np.asarray(theta, dtype=float))
        cur = np.mean(np.stack(self.buf), axis=0) if self.window > 1 else self.buf[-1]
        xi = math.inf if self.prev is None else stopping_statistic(self.prev, cur)
        self.prev = cur
        return xi


# ---------------------------------------------------------------------------
# lower bound
# ---------------------------------------------------------------------------

def bound_from_expected_f(expected_f, glob: GlobalVarParams, priors: Hyperpriors, logdet_Sigma_h) -> float:
    """Simplified variational lower bound given sum_h E_q f(beta_h) and sum_h log|Sigma_h|."""
    K, nu, omega = priors.K, priors.nu, glob.omega
    H = omega - nu - K + 1
    b, c, A = glob.b, glob.c, priors.A
    Ui = glob.Upsilon_inv
    d = glob.mu_zeta - priors.mu0
    k = np.arange(1, K + 1)
    _, ld_U = np.linalg.slogdet(glob.Upsilon)
    _, ld_S0 = np.linalg.slogdet(priors.Sigma0)
    _, ld_Sz = np.linalg.slogdet(glob.Sigma_zeta)
    val = (expected_f
           - 0.5 * omega * H * np.sum(glob.Sigma_zeta * Ui)
           - 0.5 * omega * ld_U
           - 0.5 * d @ priors.Sigma0_inv @ d
           - 0.5 * np.sum(priors.Sigma0_inv * glob.Sigma_zeta)
           - np.sum((nu * omega * np.diag(Ui) + 1 / A ** 2) * b / c)
           - 0.5 * ld_S0
           + 0.5 * logdet_Sigma_h + 0.5 * ld_Sz
           - np.sum(b * np.log(c))
           + (H + 1 + omega + omega * math.log(2)) * K / 2
           + (nu + K - 1) * K / 2 * math.log(nu)
           + np.sum(gammaln((omega + 1 - k) / 2) - gammaln((nu + K - k) / 2) + gammaln(b) + b - np.log(A))
           - K * gammaln(0.5))
    return float(val)


def _logdets(Sigma):
    return float(np.sum(np.linalg.slogdet(Sigma)[1])) if len(Sigma) else 0.0


def lower_bound_laplace(dataset: ChoiceDataset, glob: GlobalVarParams, mu, Sigma, priors: Hyperpriors) -> float:
    """Bound with E_q f(beta_h) replaced by f(mu_h) - K/2."""
    Ef = 0.0
    if dataset.H:
        Ef = float(np.sum(stacked_f(mu, dataset.stack(), glob.mu_zeta, glob.E_Omega_inv))) - dataset.H * priors.K / 2
    return bound_from_expected_f(Ef, glob, priors, _logdets(Sigma))


def lower_bound_delta(dataset: ChoiceDataset, glob: GlobalVarParams, mu, Sigma, priors: Hyperpriors) -> float:
    """Bound with E_q f(beta_h) under the delta-method expansion of the log-sum-exp term."""
    Ef = 0.0
    if dataset.H:
        Ef = float(np.sum(stacked_expected_f_delta(mu, Sigma, dataset.stack(), glob.mu_zeta, glob.E_Omega_inv)))
    return bound_from_expected_f(Ef, glob, priors, _logdets(Sigma))


def approximate_bound(backend, dataset, glob, mu, Sigma, priors):
    if backend == Backend.LAPLACE:
        return lower_bound_laplace(dataset, glob, mu, Sigma, priors)
    if backend == Backend.NCVMP:
        return lower_bound_delta(dataset, glob, mu, Sigma, priors)
    return None


# ---------------------------------------------------------------------------
# local phase
# ---------------------------------------------------------------------------

class LocalUpdater:
    """Applies one backend to a subset of agents, holding the per-agent state."""

    def __init__(self, dataset: ChoiceDataset, backend, seed: int = 0, slr: SlrConfig = SlrConfig()):
        self.dataset = dataset
        self.backend = Backend(backend)
        self.seed = seed
        self.slr = slr
        H, K = dataset.H, dataset.K
        self.mu = np.zeros((H, K))
        self.Sigma = np.broadcast_to(0.01 * np.eye(K), (H, K, K)).copy()
        self.slr_rejections = 0
        self.laplace_iterations = 0

    def update(self, glob: GlobalVarParams, idx=None, tag=(0, 0), ncvmp_steps=1, ncvmp_rtol=None):
        """Update agents ``idx`` (all if None). ``tag`` keys the SLR random streams.

        With ``ncvmp_rtol`` set, NCVMP steps repeat until the relative change of the
        stacked means drops below it or ``ncvmp_steps`` steps have been taken.
        """
        full = idx is None
        st = self.dataset.stack() if full else self.dataset.stack().take(idx)
        empty = st.mask.sum(axis=1) == 0
        if empty.any():
            # no events: the local optimum is the population Gaussian under every backend
            sel = np.arange(self.dataset.H) if full else np.asarray(idx)
            self.mu[sel[empty]] = glob.mu_zeta
            self.Sigma[sel[empty]] = spd_inverse(glob.E_Omega_inv, "E(Omega^-1)")[0]
            if empty.all():
                return
            idx, full = sel[~empty], False
            st = st.take(np.flatnonzero(~empty))
        sl = slice(None) if full else idx
        mu, Sigma = self.mu[sl], self.Sigma[sl]
        if self.backend == Backend.LAPLACE:
            mu, Sigma, it = laplace_block(st, glob, mu)
            self.laplace_iterations += it
        elif self.backend == Backend.NCVMP:
            for _ in range(ncvmp_steps):
                new_mu, Sigma = ncvmp_block(st, glob, mu)
                change = np.linalg.norm(new_mu - mu) / max(np.linalg.norm(new_mu), 1e-300)
                mu = new_mu
                if not np.all(np.isfinite(mu)):
                    break
                if ncvmp_rtol is not None and change < ncvmp_rtol:
                    break
        else:
            ids = self.dataset.agents if full else [self.dataset.agents[i] for i in idx]
            z = agent_normals(self.seed, tag, [a.agent_id for a in ids], self.slr.N, self.dataset.K)
            mu, Sigma, rej = slr_block(st, glob, mu, Sigma, self.slr, z)
            self.slr_rejections += rej
        self.mu[sl], self.Sigma[sl] = mu, Sigma


def check_divergence(glob: GlobalVarParams, xi: float, bound, prev_bound, backend):
    bad = (not np.all(np.isfinite(glob.theta())) or np.linalg.norm(glob.mu_zeta) > DIVERGENCE_LIMIT
           or (math.isfinite(xi) and xi > DIVERGENCE_LIMIT)
           or (bound is not None and prev_bound is not None
               and (not math.isfinite(bound) or prev_bound - bound > DIVERGENCE_LIMIT)))
    if bad:
        hint = ("NCVMP with the delta-method approximation diverged; try different initialization values "
                "or switch to the slr or laplace backend") if Backend(backend) == Backend.NCVMP else \
            f"{Backend(backend).value} iteration diverged; try different initialization values or another backend"
        raise DivergenceError(hint)


def fit_batch(dataset: ChoiceDataset, priors: Optional[Hyperpriors] = None, backend="ncvmp",
              stop: StopConfig = StopConfig(), seed: int = 0, slr: SlrConfig = SlrConfig(),
              track_bound: bool = True) -> FitResult:
    """Cycle local updates, then zeta, Upsilon and c, until xi < threshold."""
    priors = priors or Hyperpriors.default(dataset.K)
    backend = Backend(backend)
    if priors.K != dataset.K:
        raise ValueError("hyperprior dimension does not match the data")
    glob = initial_global(dataset.H, priors)
    updater = LocalUpdater(dataset, backend, seed, slr)
    return run_batch_phase(dataset, priors, glob, updater, stop, track_bound=track_bound)


def run_batch_phase(dataset, priors, glob, updater: LocalUpdater, stop: StopConfig, trace=None,
                    monitor=None, first_ncvmp=None, track_bound=True, t0=None, extra=None) -> FitResult:
    backend = updater.backend
    trace = [] if trace is None else trace
    window = stop.smoothing_window if backend == Backend.SLR else 1
    if monitor is None:
        monitor = ThetaMonitor(window)
        monitor.push(glob.theta())
    t0 = time.perf_counter() if t0 is None else t0
    jitter = 0
    prev_bound = None
    converged = False
    for sweep in range(stop.max_sweeps):
        if sweep == 0 and first_ncvmp is not None and backend == Backend.NCVMP:
            updater.update(glob, tag=(0, sweep), ncvmp_steps=first_ncvmp[0], ncvmp_rtol=first_ncvmp[1])
        else:
            updater.update(glob, tag=(0, sweep))
        glob = conjugate_sweep(updater.mu, updater.Sigma, glob, priors)
        jitter += glob.jittered
        xi = monitor.push(glob.theta())
        bound = approximate_bound(backend, dataset, glob, updater.mu, updater.Sigma, priors) if track_bound else None
        check_divergence(glob, xi, bound, prev_bound, backend)
        prev_bound = bound
        trace.append({"phase": "batch", "iteration": len(trace) + 1, "xi": xi, "batch_size": dataset.H,
                      "alpha": 1.0, "min_ratio": None, "lower_bound": bound,
                      "wall_time": time.perf_counter() - t0, "theta": glob.theta().tolist()})
        if xi < stop.xi_threshold:
            converged = True
            break
    diagnostics = {"jitter_events": jitter, "slr_rejections": updater.slr_rejections,
                   "laplace_iterations": updater.laplace_iterations}
    if extra:
        for k, v in extra.items():
            diagnostics[k] = diagnostics.get(k, 0) + v if isinstance(v, (int, float)) else v
    return FitResult(glob, updater.mu.copy(), updater.Sigma.copy(), trace, diagnostics, converged,
                     backend.value, [a.agent_id for a in dataset.agents], priors)
