"""Predictive choice distributions, total variation and held-out log-likelihood.

A predictive choice distribution (PCD) at a new attribute matrix is the
choice-probability vector averaged over beta ~ N(zeta, Omega), and, for an
estimated PCD, additionally over the posterior of (zeta, Omega). Estimates are
nested Monte Carlo averages; the inner standard-normal draws are shared by all
outer draws and all alternatives (common random numbers).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .mcmc import PosteriorDraws, sample_invwishart
from .model import LOG_PROB_FLOOR, AgentData, ChoiceDataset, GlobalVarParams, softmax

SIMPLEX_TOL = 1e-8
DEFAULT_OUTER_VB = 500
DEFAULT_INNER = 10_000
CHUNK = 2_000_000  # max outer*inner*J entries held at once


@dataclass
class PredictiveQuery:
    x_new: np.ndarray  # (J, K)
    label: str = ""

    def __post_init__(self):
        self.x_new = np.asarray(self.x_new, dtype=float)
        if self.x_new.ndim != 2:
            raise ValueError("x_new must be a J x K matrix")
        if not np.all(np.isfinite(self.x_new)):
            raise ValueError("x_new must be finite")


@dataclass
class TrueParams:
    zeta: np.ndarray
    Omega: np.ndarray


@dataclass
class VariationalFit:
    glob: GlobalVarParams


@dataclass
class McmcDraws:
    draws: PosteriorDraws


PosteriorSource = Union[TrueParams, VariationalFit, McmcDraws]


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _chol(S, what="Omega"):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError(f"{what} must be positive definite") from None


def _check_simplex(p, name):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < -SIMPLEX_TOL) or abs(p.sum() - 1) > SIMPLEX_TOL:
        raise ValueError(f"{name} is not a probability vector")
    return p


def tv_distance(p, q) -> float:
    """Half the L1 distance between two probability vectors."""
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    if p.shape != q.shape:
        raise ValueError("p and q must have the same length")
    return float(min(1.0, 0.5 * np.sum(np.abs(p - q))))


def _mixture_mean(x, zetas, chols, z):
    """Average softmax(x beta) over beta = zeta_o + L_o z_i for all outer o and inner i.

    ``x`` may be (J, K) or a batch (E, J, K); returns (J,) or (E, J).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    xs = x[None] if single else x
    E, J, K = xs.shape
    n_out, n_in = len(zetas), len(z)
    total = np.zeros((E, J))
    step = max(1, CHUNK // max(1, n_in * J * E))
    for s in range(0, n_out, step):
        zc, Lc = zetas[s:s + step], chols[s:s + step]
        m = np.einsum("ejk,ok->oej", xs, zc)  # (o, E, J)
        xL = np.einsum("ejk,okl->oejl", xs, Lc)  # (o, E, J, K)
        v = m[:, :, None, :] + np.einsum("oejl,il->oeij", xL, z)  # (o, E, i, J)
        total += softmax(v).sum(axis=(0, 2))
    out = total / (n_out * n_in)
    out /= out.sum(axis=-1, keepdims=True)
    return out[0] if single else out


def true_pcd(x_new, zeta, Omega, R: int = 1_000_000, rng=None) -> np.ndarray:
    """Monte Carlo predictive choice distribution under beta ~ N(zeta, Omega)."""
    if R < 1:
        raise ValueError("R must be >= 1")
    x = np.asarray(x_new, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    if x.shape[-1] != zeta.size or Omega.shape != (zeta.size, zeta.size):
        raise ValueError("dimension mismatch between x_new and (zeta, Omega)")
    L = _chol(Omega)
    z = _rng(rng).standard_normal((R, zeta.size))
    return _mixture_mean(x, zeta[None], L[None], z)


class OuterDraws:
    """(zeta, chol(Omega)) pairs drawn from a posterior source."""

    def __init__(self, zetas, chols, resampled=0):
        self.zetas, self.chols, self.resampled = zetas, chols, resampled


def draw_outer(source: PosteriorSource, outer: Optional[int], rng) -> OuterDraws:
    rng = _rng(rng)
    if isinstance(source, TrueParams):
        zeta = np.asarray(source.zeta, dtype=float)
        return OuterDraws(zeta[None], _chol(np.atleast_2d(source.Omega))[None])
    if isinstance(source, VariationalFit):
        g = source.glob
        n = DEFAULT_OUTER_VB if outer is None else outer
        zetas = rng.multivariate_normal(g.mu_zeta, g.Sigma_zeta, size=n, method="cholesky")
        chols = np.empty((n, g.K, g.K))
        resampled = 0
        todo = np.arange(n)
        while todo.size:
            Om = sample_invwishart(g.omega, g.Upsilon, rng, size=todo.size)
            failed = []
            for i, O in zip(todo, Om):
                try:
                    chols[i] = np.linalg.cholesky(O)
                except np.linalg.LinAlgError:
                    failed.append(i)
            resampled += len(failed)
            if resampled > 100 * n:
                raise ValueError("could not draw a positive definite Omega")
            todo = np.array(failed, dtype=int)
        return OuterDraws(zetas, chols, resampled)
    if isinstance(source, McmcDraws):
        zs = source.draws.pooled("zeta")
        Os = source.draws.pooled("Omega")
        if outer is not None and outer < len(zs):
            idx = np.sort(rng.choice(len(zs), size=outer, replace=False))
            zs, Os = zs[idx], Os[idx]
        return OuterDraws(zs, np.linalg.cholesky(Os))
    raise TypeError(f"unknown posterior source {type(source).__name__}")


def estimated_pcd(x_new, source: PosteriorSource, outer: Optional[int] = None, inner: int = DEFAULT_INNER,
                  rng=None, return_info: bool = False):
    """Nested Monte Carlo estimate of the predictive choice distribution.

    ``outer`` defaults to 500 draws for a variational fit and to every stored
    draw for MCMC. With ``return_info`` the number of resampled non-positive-
    definite Omega draws is returned as well.
    """
    rng = _rng(rng)
    x = np.asarray(x_new, dtype=float)
    # inner normals first, so sources sharing a seed share them
    z = rng.standard_normal((inner, x.shape[-1]))
    od = draw_outer(source, outer, rng)
    if x.shape[-1] != od.zetas.shape[1]:
        raise ValueError("x_new has the wrong number of covariates")
    p = _mixture_mean(x, od.zetas, od.chols, z)
    return (p, {"resampled": od.resampled, "outer": len(od.zetas), "inner": inner}) if return_info else p


def predictive_loglik(source: Union[PosteriorSource, Callable], agents: Sequence[AgentData],
                      outer: Optional[int] = None, inner: int = 1000, rng=None) -> float:
    """Sum over held-out events of log p_hat(observed choice).

    ``source`` may also be a callable mapping a (J, K) matrix to a probability
    vector. Probabilities are floored at 1e-300 before taking logs. For a
    posterior source one set of (zeta, Omega, beta) draws serves every event.
    """
    agents = [a for a in agents if a.T]
    if not agents:
        return 0.0
    X = np.concatenate([a.X for a in agents])
    y = np.concatenate([a.y for a in agents])
    if callable(source) and not isinstance(source, (TrueParams, VariationalFit, McmcDraws)):
        P = np.stack([_check_simplex(source(x), "predictor output") for x in X])
    else:
        rng = _rng(rng)
        z = rng.standard_normal((inner, X.shape[-1]))
        od = draw_outer(source, outer, rng)
        if X.shape[-1] != od.zetas.shape[1]:
            raise ValueError("test data have the wrong number of covariates")
        P = _mixture_mean(X, od.zetas, od.chols, z)
    chosen = np.maximum(P[np.arange(len(y)), y], 0.0)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.maximum(np.log(chosen), LOG_PROB_FLOOR)))


def kfold_split(dataset_or_H, k: int, seed: int = 0):
    """Agent-level k-fold partition: list of (train indices, test indices)."""
    H = dataset_or_H.H if isinstance(dataset_or_H, ChoiceDataset) else int(dataset_or_H)
    if not 1 <= k <= H:
        raise ValueError("need 1 <= k <= H")
    perm = np.random.default_rng(seed).permutation(H)
    folds = [np.sort(f) for f in np.array_split(perm, k)]
    out = []
    for i, test in enumerate(folds):
        train = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i])) if k > 1 else np.array([], int)
        out.append((train, test))
    return out


def random_queries(n: int, J: int, K: int, seed: int = 0, sd: float = 0.5):
    """Query matrices drawn like the simulated covariates."""
    rng = np.random.default_rng(seed)
    return [PredictiveQuery(sd * rng.standard_normal((J, K)), label=f"q{i}") for i in range(n)]


def summarize_tv(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no TV values")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"min": float(v.min()), "q1": float(q1), "median": float(med), "mean": float(v.mean()),
            "q3": float(q3), "max": float(v.max()), "n": int(v.size)}


def compare_sources(queries: Sequence[PredictiveQuery], sources: dict, reference: str,
                    outer: Optional[dict] = None, inner: int = DEFAULT_INNER, seed: int = 0):
    """Evaluate every source on every query and compute TV against ``reference``.

    Returns (rows, summary): one row per (query, source) and a TV summary per
    non-reference source. Every source sees the same random stream for a given
    query, so identical sources give identical estimates.
    """
    outer = outer or {}
    names = list(sources)
    if reference not in sources:
        raise ValueError(f"reference {reference!r} is not among the sources")
    rows, tvs = [], {n: [] for n in names if n != reference}
    resampled = {n: 0 for n in names}
    for qi, q in enumerate(queries):
        pcds = {}
        for name in names:
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(qi,)))
            src = sources[name]
            if isinstance(src, TrueParams):
                p = true_pcd(q.x_new, src.zeta, src.Omega, R=outer.get(name, inner), rng=rng)
            else:
                p, info = estimated_pcd(q.x_new, src, outer.get(name), inner, rng, return_info=True)
                resampled[name] += info["resampled"]
            pcds[name] = p
        for name in names:
            tv = None if name == reference else tv_distance(pcds[name], pcds[reference])
            if tv is not None:
                tvs[name].append(tv)
            rows.append({"query": q.label or f"q{qi}", "source": name, "probs": pcds[name].tolist(), "tv": tv})
    summary = {n: summarize_tv(v) for n, v in tvs.items()}
    for n in summary:
        summary[n]["resampled_omega"] = resampled[n]
    return rows, summary


def save_report_csv(rows, path, comment=None):
    J = max(len(r["probs"]) for r in rows)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query", "source"] + [f"p{j + 1}" for j in range(J)] + ["tv"])
        for r in rows:
            w.writerow([r["query"], r["source"]] + [repr(float(p)) for p in r["probs"]]
                       + ["" if r["tv"] is None else repr(float(r["tv"]))])


def save_summary_json(summary: dict, path, extra: Optional[dict] = None):
    with open(path, "w") as fh:
        json.dump({"tv_summary": summary, **(extra or {})}, fh, indent=2)

