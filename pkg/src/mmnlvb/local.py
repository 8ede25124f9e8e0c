"""Updates of the per-agent Gaussian factors q(beta_h) = N(mu_h, Sigma_h).

Three interchangeable strategies: Laplace (quasi-Newton ascent of f plus the
negative inverse Hessian), NCVMP fixed-point steps under the delta-method
surrogate, and stochastic linear regression (SLR). Every routine works on a
block of agents at once; the single-agent entry points wrap a block of one.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._linalg import NumericalError, batched_spd_inverse, is_pd
from .model import (AgentData, AgentStack, GlobalVarParams, LocalVarParams, softmax,
                    stack_agents, stacked_curvature, stacked_f, stacked_grad)


class Backend(str, Enum):
    LAPLACE = "laplace"
    NCVMP = "ncvmp"
    SLR = "slr"


@dataclass(frozen=True)
class SlrConfig:
    N: int = 40
    w: float = 0.25

    def __post_init__(self):
        if self.N < 2 or self.N % 2:
            raise ValueError("SLR iteration count N must be even and >= 2")
        if not 0 < self.w <= 1:
            raise ValueError("SLR weight w must lie in (0, 1]")


class LaplaceConvergenceError(RuntimeError):
    def __init__(self, msg, best, grad_norm):
        super().__init__(msg)
        self.best = best
        self.grad_norm = grad_norm


# ---------------------------------------------------------------------------
# Laplace
# ---------------------------------------------------------------------------

def laplace_block(st: AgentStack, glob: GlobalVarParams, init, gtol=1e-6, max_iter=200,
                  c1=1e-4, shrink=0.5):
    """BFGS ascent of f for every agent in the block; returns (mu, Sigma, iterations).

    The inverse-Hessian approximation starts from the exact negative inverse
    Hessian at ``init`` and is then maintained with BFGS updates.
    """
    P, mz = glob.E_Omega_inv, glob.mu_zeta
    beta = np.array(init, dtype=float, copy=True)
    n, K = beta.shape
    f = stacked_f(beta, st, mz, P)
    g, Hs = stacked_grad(beta, st, mz, P, with_hess=True)
    B = batched_spd_inverse(-Hs, what="negative Hessian")
    active = np.linalg.norm(g, axis=1) > gtol * (1 + np.abs(f))
    it = 0
    while active.any():
        if it == max_iter:
            i = int(np.flatnonzero(active)[0])
            raise LaplaceConvergenceError(
                f"Laplace ascent did not converge in {max_iter} iterations (agent {i}, |grad| = {np.linalg.norm(g[i]):.3g})",
                beta[i].copy(), float(np.linalg.norm(g[i])))
        it += 1
        idx = np.flatnonzero(active)
        sub = st.take(idx)
        d = np.einsum("nkl,nl->nk", B[idx], g[idx])
        slope = np.einsum("nk,nk->n", g[idx], d)
        t = np.ones(idx.size)
        f0 = f[idx]
        pending = np.ones(idx.size, dtype=bool)
        f_new = f0.copy()
        for _ in range(60):
            p = np.flatnonzero(pending)
            trial = beta[idx[p]] + t[p, None] * d[p]
            ft = stacked_f(trial, sub.take(p), mz, P)
            ok = ft >= f0[p] + c1 * t[p] * slope[p]
            f_new[p[ok]] = ft[ok]
            pending[p[ok]] = False
            t[p[~ok]] *= shrink
            if not pending.any():
                break
        # a failed line search leaves the iterate unchanged; the gradient test decides
        t[pending] = 0.0
        f_new[pending] = f0[pending]
        s = t[:, None] * d
        new_beta = beta[idx] + s
        g_new = stacked_grad(new_beta, sub, mz, P)
        yv = g[idx] - g_new  # gradient change of -f
        sy = np.einsum("nk,nk->n", s, yv)
        upd = sy > 1e-12 * np.linalg.norm(s, axis=1) * np.linalg.norm(yv, axis=1)
        if upd.any():
            Bi = B[idx][upd]
            si, yi, rho = s[upd], yv[upd], 1.0 / sy[upd]
            I = np.eye(K)
            V = I - rho[:, None, None] * np.einsum("nk,nl->nkl", si, yi)
            Bi = V @ Bi @ np.swapaxes(V, -1, -2) + rho[:, None, None] * np.einsum("nk,nl->nkl", si, si)
            Bsub = B[idx]
            Bsub[upd] = Bi
            B[idx] = Bsub
        beta[idx], f[idx], g[idx] = new_beta, f_new, g_new
        stalled = pending & (np.linalg.norm(g_new, axis=1) > gtol * (1 + np.abs(f_new)))
        if stalled.any():
            # restart curvature from the exact Hessian where the line search failed
            _, Hst = stacked_grad(new_beta[stalled], sub.take(np.flatnonzero(stalled)), mz, P, with_hess=True)
            Bsub = B[idx]
            Bsub[stalled] = batched_spd_inverse(-Hst, what="negative Hessian")
            B[idx] = Bsub
        active[idx] = np.linalg.norm(g_new, axis=1) > gtol * (1 + np.abs(f_new))
    # one Newton step with the exact Hessian polishes the mode to machine precision
    g, Hs = stacked_grad(beta, st, mz, P, with_hess=True)
    Sigma = batched_spd_inverse(-Hs, what="negative Hessian")
    trial = beta + np.einsum("nkl,nl->nk", Sigma, g)
    ok = stacked_f(trial, st, mz, P) >= f - 1e-12 * (1 + np.abs(f))
    if ok.any():
        beta[ok] = trial[ok]
        _, Hs_ok = stacked_grad(beta[ok], st.take(np.flatnonzero(ok)), mz, P, with_hess=True)
        Sigma[ok] = batched_spd_inverse(-Hs_ok, what="negative Hessian")
    return beta, Sigma, it


def laplace_local(agent: AgentData, glob: GlobalVarParams, init=None) -> LocalVarParams:
    K = glob.K
    init = np.zeros(K) if init is None else np.asarray(init, dtype=float)
    st = stack_agents([agent], agent.X.shape[1], K)
    mu, Sigma, _ = laplace_block(st, glob, init[None])
    return LocalVarParams(mu[0], Sigma[0])


# ---------------------------------------------------------------------------
# NCVMP with the delta method
# ---------------------------------------------------------------------------

def ncvmp_block(st: AgentStack, glob: GlobalVarParams, mu, Sigma=None):
    """One fixed-point step for every agent: Sigma first (softmax at the incoming mu),
    then mu using the new Sigma."""
    P, mz = glob.E_Omega_inv, glob.mu_zeta
    rho, C = stacked_curvature(mu, st)
    prec = C + P
    try:
        Sig = batched_spd_inverse(prec, what="NCVMP precision")
    except NumericalError as e:
        raise NumericalError(f"{e}; non-finite or indefinite intermediate in NCVMP step") from None
    xSx = np.einsum("ntjk,nkl,ntml->ntjm", st.X, Sig, st.X)
    v = np.einsum("ntjm,ntm->ntj", xSx, rho) - 0.5 * np.einsum("ntjj->ntj", xSx)
    w = rho * v - rho * np.sum(rho * v, axis=-1, keepdims=True)
    r = w - rho
    np.put_along_axis(r, st.y[..., None], np.take_along_axis(r, st.y[..., None], axis=-1) + 1.0, axis=-1)
    r *= st.mask[..., None]
    grad = np.einsum("ntjk,ntj->nk", st.X, r) - (mu - mz) @ P
    new_mu = mu + np.einsum("nkl,nl->nk", Sig, grad)
    return new_mu, Sig


def ncvmp_local_step(agent: AgentData, glob: GlobalVarParams, current: LocalVarParams) -> LocalVarParams:
    st = stack_agents([agent], agent.X.shape[1], glob.K)
    mu, Sig = ncvmp_block(st, glob, np.asarray(current.mu, dtype=float)[None])
    return LocalVarParams(mu[0], Sig[0])


def ncvmp_gradients(st: AgentStack, glob: GlobalVarParams, mu, Sigma):
    """Gradients of the delta-method objective in mu and Sigma (per agent)."""
    P, mz = glob.E_Omega_inv, glob.mu_zeta
    rho, C = stacked_curvature(mu, st)
    dSigma = -0.5 * (C + P)
    xSx = np.einsum("ntjk,nkl,ntml->ntjm", st.X, Sigma, st.X)
    v = np.einsum("ntjm,ntm->ntj", xSx, rho) - 0.5 * np.einsum("ntjj->ntj", xSx)
    r = rho * v - rho * np.sum(rho * v, axis=-1, keepdims=True) - rho
    np.put_along_axis(r, st.y[..., None], np.take_along_axis(r, st.y[..., None], axis=-1) + 1.0, axis=-1)
    r *= st.mask[..., None]
    dmu = np.einsum("ntjk,ntj->nk", st.X, r) - (mu - mz) @ P
    return dmu, dSigma


# ---------------------------------------------------------------------------
# stochastic linear regression
# ---------------------------------------------------------------------------

def agent_stream_key(agent_id) -> int:
    return zlib.crc32(repr(agent_id).encode())


def agent_normals(seed: int, tag: tuple, agent_ids, N: int, K: int) -> np.ndarray:
    """Standard normal draws (n, N, K), one counter-based stream per agent."""
    out = np.empty((len(agent_ids), N, K))
    for i, aid in enumerate(agent_ids):
        ss = np.random.SeedSequence(seed, spawn_key=(*tag, agent_stream_key(aid)))
        out[i] = np.random.Generator(np.random.Philox(ss)).standard_normal((N, K))
    return out


def slr_block(st: AgentStack, glob: GlobalVarParams, mu, Sigma, cfg: SlrConfig, z):
    """Run SLR for a block of agents given pre-drawn standard normals ``z`` (n, N, K).

    Returns (mu, Sigma, rejected) where ``rejected`` counts Hessian samples that
    would have made P indefinite and were skipped.
    """
    P_om, mz = glob.E_Omega_inv, glob.mu_zeta
    N, w = cfg.N, cfg.w
    n, K = mu.shape
    m = np.array(mu, dtype=float, copy=True)
    Pm = np.linalg.inv(Sigma)
    Pm = 0.5 * (Pm + np.swapaxes(Pm, -1, -2))
    L = np.linalg.cholesky(Pm)
    cur_mu = m.copy()
    g = np.zeros((n, K))
    Pbar = np.zeros((n, K, K))
    gbar = np.zeros((n, K))
    mbar = np.zeros((n, K))
    rejected = 0
    for it in range(1, N + 1):
        # beta = mu + L^{-T} z has covariance P^{-1}
        draw = cur_mu + np.linalg.solve(np.swapaxes(L, -1, -2), z[:, it - 1, :, None])[..., 0]
        gh, Hh = stacked_grad(draw, st, mz, P_om, with_hess=True)
        P_new = (1 - w) * Pm - w * Hh
        ok = is_pd(P_new)
        if not ok.all():
            rejected += int(np.sum(~ok))
            P_new[~ok] = Pm[~ok]
        Pm = P_new
        g = (1 - w) * g + w * gh
        m = (1 - w) * m + w * draw
        L = np.linalg.cholesky(Pm)
        cur_mu = m + _chol_solve(L, g)
        if it > N // 2:
            Pbar -= (2.0 / N) * Hh
            gbar += (2.0 / N) * gh
            mbar += (2.0 / N) * draw
    Pbar = 0.5 * (Pbar + np.swapaxes(Pbar, -1, -2))
    Lbar = np.linalg.cholesky(Pbar)
    out_mu = _chol_solve(Lbar, gbar) + mbar
    out_Sigma = batched_spd_inverse(Pbar, what="averaged SLR precision")
    return out_mu, out_Sigma, rejected


def _chol_solve(L, b):
    y = np.linalg.solve(L, b[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]


def slr_local(agent: AgentData, glob: GlobalVarParams, init: LocalVarParams, cfg: SlrConfig = SlrConfig(),
              rng=None) -> LocalVarParams:
    """SLR for one agent. ``rng`` is a numpy Generator or an integer seed."""
    rng = np.random.default_rng(rng)
    z = rng.standard_normal((1, cfg.N, glob.K))
    st = stack_agents([agent], agent.X.shape[1], glob.K)
    mu, Sig, _ = slr_block(st, glob, np.asarray(init.mu, dtype=float)[None],
                           np.asarray(init.Sigma, dtype=float)[None], cfg, z)
    return LocalVarParams(mu[0], Sig[0])


# ---------------------------------------------------------------------------
# Gaussian expectation identities behind SLR
# ---------------------------------------------------------------------------

def slr_identity_check(A, a, mu, Sigma, draws=100_000, rng=None, X=None):
    """Check grad_mu E[V] = E[grad V] and grad_vec(Sigma) E[V] = vec(E[hess V]) / 2.

    The quadratic V(theta) = a'theta + theta'A theta / 2 is checked in closed form.
    If ``X`` (J, K) is given, V(theta) = logsumexp(X theta) is also checked by Monte
    Carlo: the left-hand sides use the score-function forms
    E[Sigma^{-1}(theta-mu) V] and E[(Sigma^{-1} D D' Sigma^{-1} - Sigma^{-1}) V] / 2,
    the right-hand sides average the analytic gradient and Hessian.
    """
    A = np.asarray(A, dtype=float)
    if not np.allclose(A, A.T):
        raise ValueError("quadratic coefficient matrix must be symmetric")
    a = np.asarray(a, dtype=float)
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    K = mu.size

    def expect_quad(m, S):
        return a @ m + 0.5 * (m @ A @ m + np.trace(A @ S))

    # left sides: central differences of the closed-form expectation (exact for quadratics)
    h = 1e-3
    mu_lhs = np.empty(K)
    sig_lhs = np.empty((K, K))
    for k in range(K):
        e = np.zeros(K)
        e[k] = h
        mu_lhs[k] = (expect_quad(mu + e, Sigma) - expect_quad(mu - e, Sigma)) / (2 * h)
        for j in range(K):
            E = np.zeros((K, K))
            E[k, j] = h
            sig_lhs[k, j] = (expect_quad(mu, Sigma + E) - expect_quad(mu, Sigma - E)) / (2 * h)
    report = {
        "quad_mu_lhs": mu_lhs,
        "quad_mu_rhs": a + A @ mu,  # E[grad V]
        "quad_sigma_lhs": sig_lhs.reshape(-1, order="F"),
        "quad_sigma_rhs": 0.5 * A.reshape(-1, order="F"),  # vec(E[hess V]) / 2
    }
    if X is None:
        return report
    rng = np.random.default_rng(rng)
    L = np.linalg.cholesky(Sigma)
    Si = np.linalg.inv(Sigma)
    eps = rng.standard_normal((draws, K))
    th = mu + eps @ L.T
    v = th @ X.T
    V = np.logaddexp.reduce(v, axis=1) if X.shape[0] > 1 else v[:, 0]
    p = softmax(v)
    grad = p @ X
    xb = grad
    hess = np.einsum("nj,jk,jl->nkl", p, X, X) - np.einsum("nk,nl->nkl", xb, xb)
    D = th - mu
    Vc = V - V.mean()  # centring leaves the score expectations unchanged and cuts variance
    mu_lhs = (D @ Si) * Vc[:, None]
    sig_lhs = 0.5 * (np.einsum("kl,nl,nm,mj->nkj", Si, D, D, Si) - Si) * Vc[:, None, None]

    def mean_se(s):
        return s.mean(axis=0), s.std(axis=0, ddof=1) / np.sqrt(draws)

    report["mc_mu_lhs"], report["mc_mu_lhs_se"] = mean_se(mu_lhs)
    report["mc_mu_rhs"], report["mc_mu_rhs_se"] = mean_se(grad)
    report["mc_sigma_lhs"], report["mc_sigma_lhs_se"] = mean_se(sig_lhs)
    report["mc_sigma_rhs"], report["mc_sigma_rhs_se"] = mean_se(0.5 * hess)
    return report
