"""Stochastic variational inference with adaptively growing minibatches.

Global factors follow stochastic natural-gradient steps with a constant step
size per minibatch size. The minibatch grows by ``kappa`` whenever the
smallest "ratio of progress and path" over mu_zeta and diag(Upsilon) falls
below a threshold; once the minibatch covers every agent the run continues in
batch mode until the usual relative-change rule is met.
"""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .batch import (FitResult, LocalUpdater, StopConfig, ThetaMonitor, approximate_bound, check_divergence,
                    run_batch_phase)
from .conjugate import stochastic_global_update
from .local import Backend, SlrConfig
from .model import ChoiceDataset, GlobalVarParams, Hyperpriors, initial_global

SCHEDULE_BASE = 25


def schedule(batch_size: int, H: int, initial: float = 0.4, base: int = SCHEDULE_BASE) -> float:
    """Linear ramp from ``initial`` at ``base`` agents to 1 at ``H`` agents.

    Sizes below ``base`` get the initial value.
    """
    if batch_size >= H:
        return 1.0
    if batch_size <= base:
        return initial
    return initial + (1 - initial) * (batch_size - base) / (H - base)


def robbins_monro_schedule(d: float = 1.0, D: float = 1.0, gamma: float = 0.7) -> Callable[[int], float]:
    """Classic decaying step d / (l + D)^gamma, for comparison runs only."""
    if not 0.5 < gamma <= 1:
        raise ValueError("gamma must lie in (0.5, 1]")
    return lambda l: min(1.0, d / (l + D) ** gamma)


@dataclass
class SviConfig:
    initial_batch: int = 25
    initial_alpha: float = 0.4
    initial_phi: float = 0.4
    kappa: float = 2.0
    M: int = 20
    ratio_warmup: int = 5
    batch_cap: Optional[int] = None
    ncvmp_rtol: float = 0.1
    ncvmp_max_steps: int = 3
    max_iterations: int = 100_000
    alpha_override: Optional[float] = None
    step_schedule: Optional[Callable[[int], float]] = None

    def validate(self, H: int):
        cap = H if self.batch_cap is None else self.batch_cap
        if not 1 <= cap <= H:
            raise ValueError("batch_cap must lie in [1, H]")
        if not self.kappa > 1:
            raise ValueError("kappa must exceed 1")
        if not 0 < self.initial_alpha <= 1:
            raise ValueError("initial_alpha must lie in (0, 1]")
        if self.initial_batch < 1:
            raise ValueError("initial_batch must be >= 1")
        if self.alpha_override is not None and not 0 < self.alpha_override <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        return cap


def progress_ratio(history, M: Optional[int] = None) -> float:
    """Net displacement over the window divided by the path length travelled.

    Uses the last ``M + 1`` points (all of them if fewer). Returns 1 when the
    path length is zero.
    """
    h = np.asarray(history, dtype=float)
    if h.size < 2:
        raise ValueError("need at least two points")
    if M is not None:
        h = h[-(M + 1):]
    path = np.sum(np.abs(np.diff(h)))
    if path == 0:
        return 1.0
    return float(min(1.0, abs(h[-1] - h[0]) / path))


class RatioHistory:
    """Recent values of mu_zeta and diag(Upsilon) since the last batch-size change."""

    def __init__(self, M: int):
        self.M = M
        self.buf = deque(maxlen=M + 1)
        self.l = 0

    def reset(self, glob: GlobalVarParams):
        self.buf.clear()
        self.buf.append(self._vec(glob))
        self.l = 0

    def push(self, glob: GlobalVarParams):
        self.buf.append(self._vec(glob))
        self.l += 1

    @staticmethod
    def _vec(glob):
        return np.concatenate([np.diag(glob.Upsilon), glob.mu_zeta])

    def ratios(self) -> np.ndarray:
        arr = np.stack(self.buf)
        return np.array([progress_ratio(arr[:, i], self.M) for i in range(arr.shape[1])])


def sample_minibatch(rng: np.random.Generator, H: int, size: int) -> np.ndarray:
    """Sorted indices of ``size`` distinct agents drawn uniformly."""
    return np.sort(rng.choice(H, size=size, replace=False))


def batch_controller_step(history: RatioHistory, cfg: SviConfig, batch_size: int, H: int, cap: int):
    """Return (new batch size, smallest ratio or None)."""
    if history.l <= cfg.ratio_warmup:
        return batch_size, None
    r = float(np.min(history.ratios()))
    if r < schedule(batch_size, H, cfg.initial_phi):
        return min(int(math.ceil(cfg.kappa * batch_size - 1e-9)), cap), r
    return batch_size, r


def fit_svi(dataset: ChoiceDataset, priors: Optional[Hyperpriors] = None, backend="ncvmp",
            cfg: SviConfig = SviConfig(), stop: StopConfig = StopConfig(), seed: int = 0,
            slr: SlrConfig = SlrConfig(), track_bound: bool = True) -> FitResult:
    priors = priors or Hyperpriors.default(dataset.K)
    backend = Backend(backend)
    H = dataset.H
    cap = cfg.validate(H)
    t0 = time.perf_counter()
    glob = initial_global(H, priors)
    updater = LocalUpdater(dataset, backend, seed, slr)
    batch_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    B = min(cfg.initial_batch, cap)
    hist = RatioHistory(cfg.M)
    hist.reset(glob)
    trace = []
    window = stop.smoothing_window if backend == Backend.SLR else 1
    monitor = ThetaMonitor(window)
    monitor.push(glob.theta())
    jitter = 0
    growth = []
    it = 0
    stochastic = False
    converged = False
    prev_bound = None
    while B < H:
        if it >= cfg.max_iterations:
            break
        it += 1
        stochastic = True
        idx = sample_minibatch(batch_rng, H, B)
        updater.update(glob, idx, tag=(1, it), ncvmp_steps=cfg.ncvmp_max_steps, ncvmp_rtol=cfg.ncvmp_rtol)
        if cfg.step_schedule is not None:
            alpha = cfg.step_schedule(it)
        elif cfg.alpha_override is not None:
            alpha = cfg.alpha_override
        else:
            alpha = schedule(B, H, cfg.initial_alpha)
        glob = stochastic_global_update(glob, updater.mu[idx], updater.Sigma[idx], priors, alpha, H)
        jitter += glob.jittered
        xi = monitor.push(glob.theta())
        hist.push(glob)
        check_divergence(glob, 0.0, None, None, backend)
        new_B, rmin = batch_controller_step(hist, cfg, B, H, cap)
        trace.append({"phase": "stochastic", "iteration": it, "xi": xi, "batch_size": B, "alpha": alpha,
                      "min_ratio": rmin, "lower_bound": None, "wall_time": time.perf_counter() - t0,
                      "theta": glob.theta().tolist()})
        if new_B != B:
            growth.append((it, B, new_B))
            B = new_B
            hist.reset(glob)
        if cap < H and B == cap and math.isfinite(xi) and xi < stop.xi_threshold and hist.l > cfg.ratio_warmup:
            # batch mode infeasible: stop on the trailing relative-change rule
            converged = True
            break
    extra = {"batch_growth": growth, "stochastic_iterations": it}
    if cap < H:
        fit = FitResult(glob, updater.mu.copy(), updater.Sigma.copy(), trace,
                        {"jitter_events": jitter, "slr_rejections": updater.slr_rejections,
                         "laplace_iterations": updater.laplace_iterations, **extra},
                        converged, backend.value, [a.agent_id for a in dataset.agents], priors)
        return fit
    extra["jitter_events"] = jitter
    # after a stochastic phase many locals are stale: iterate NCVMP once more than usual
    first = (cfg.ncvmp_max_steps, cfg.ncvmp_rtol) if stochastic else None
    return run_batch_phase(dataset, priors, glob, updater, stop, trace=trace, monitor=monitor,
                           first_ncvmp=first, track_bound=track_bound, t0=t0, extra=extra)
