"""Closed-form coordinate-ascent updates for q(zeta), q(Omega) and q(a).

The local factors enter as stacked arrays ``mu`` (n, K) and ``Sigma`` (n, K, K).
When ``n`` is smaller than the number of agents ``H`` the sums over agents are
rescaled by ``H / n``, which turns the same formulas into the unbiased
minibatch estimates used by stochastic variational inference.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from ._linalg import spd_inverse
from .model import GlobalVarParams, Hyperpriors


def _scale(n, H):
    H = n if H is None else H
    return H, (1.0 if H == n else H / n)


def zeta_target(mu, glob: GlobalVarParams, priors: Hyperpriors, H=None):
    """Return (mu_zeta, Sigma_zeta) maximising the bound given the current q(Omega)."""
    mu = np.asarray(mu, dtype=float).reshape(-1, priors.K)
    H, s = _scale(mu.shape[0], H)
    P = glob.E_Omega_inv
    Sigma_zeta, _ = spd_inverse(priors.Sigma0_inv + H * P, what="Sigma_zeta precision")
    total = np.sum(mu, axis=0)
    if s != 1.0:
        total = s * total
    mu_zeta = Sigma_zeta @ (priors.Sigma0_inv @ priors.mu0 + P @ total)
    return mu_zeta, Sigma_zeta


def update_zeta(mu, glob: GlobalVarParams, priors: Hyperpriors, H=None):
    return zeta_target(mu, glob, priors, H)


def upsilon_target(mu, Sigma, mu_zeta, Sigma_zeta, glob: GlobalVarParams, priors: Hyperpriors, H=None):
    mu = np.asarray(mu, dtype=float).reshape(-1, priors.K)
    Sigma = np.asarray(Sigma, dtype=float).reshape(-1, priors.K, priors.K)
    H, s = _scale(mu.shape[0], H)
    d = mu - mu_zeta
    spread = d.T @ d + np.sum(Sigma, axis=0)
    if s != 1.0:
        spread = s * spread
    U = 2 * priors.nu * np.diag(glob.b / glob.c) + spread + H * Sigma_zeta
    return 0.5 * (U + U.T)


def update_omega_scale(mu, Sigma, glob: GlobalVarParams, priors: Hyperpriors, H=None):
    """Upsilon from the current q(zeta), q(a) and local factors."""
    return upsilon_target(mu, Sigma, glob.mu_zeta, glob.Sigma_zeta, glob, priors, H)


def update_a(glob: GlobalVarParams, priors: Hyperpriors):
    return priors.nu * glob.omega * np.diag(glob.Upsilon_inv) + 1.0 / priors.A ** 2


def conjugate_sweep(mu, Sigma, glob: GlobalVarParams, priors: Hyperpriors, H=None) -> GlobalVarParams:
    """zeta -> Upsilon -> c, each using the freshly updated factors before it."""
    mu_zeta, Sigma_zeta = update_zeta(mu, glob, priors, H)
    g = replace(glob, mu_zeta=mu_zeta, Sigma_zeta=Sigma_zeta)
    g = replace(g, Upsilon=update_omega_scale(mu, Sigma, g, priors, H))
    return replace(g, c=update_a(g, priors))


def stochastic_global_update(glob: GlobalVarParams, mu_B, Sigma_B, priors: Hyperpriors,
                             alpha: float, H: int) -> GlobalVarParams:
    """One stochastic natural-gradient step on q(zeta) and q(Omega) from a minibatch.

    Sigma_zeta and c are recomputed deterministically; mu_zeta and Upsilon are
    blended with step ``alpha`` towards their minibatch estimates.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    mu_hat, Sigma_zeta = zeta_target(mu_B, glob, priors, H)
    mu_zeta = (1 - alpha) * glob.mu_zeta + alpha * mu_hat
    U_hat = upsilon_target(mu_B, Sigma_B, mu_zeta, Sigma_zeta, glob, priors, H)
    Upsilon = (1 - alpha) * glob.Upsilon + alpha * U_hat
    g = replace(glob, mu_zeta=mu_zeta, Sigma_zeta=Sigma_zeta, Upsilon=Upsilon)
    return replace(g, c=update_a(g, priors))
