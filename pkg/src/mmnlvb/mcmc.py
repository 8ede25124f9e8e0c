"""Metropolis-within-Gibbs sampler for the mixed logit posterior.

zeta, Omega and a have conjugate full conditionals. Each beta_h is updated
by a Gaussian random-walk Metropolis step whose scale is tuned towards a 0.234
acceptance rate during burn-in and frozen afterwards. The sampler is the
accuracy yardstick for the variational fits, not a production sampler.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .model import AgentData, ChoiceDataset, Hyperpriors, log_likelihood_agent, stacked_f

TARGET_ACCEPT = 0.234


@dataclass
class McmcConfig:
    chains: int = 4
    iterations: int = 10_000
    thin: int = 2
    burn_in: float = 0.5
    rw_scale: float = 0.3
    adapt: bool = True
    seed: int = 0
    store_beta: bool = False

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 <= self.burn_in < 1:
            raise ValueError("burn_in must lie in [0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.rw_scale > 0:
            raise ValueError("rw_scale must be positive")

    @property
    def n_burn(self) -> int:
        return int(math.floor(self.iterations * self.burn_in))

    @property
    def kept_per_chain(self) -> int:
        return int(math.floor(self.iterations * (1 - self.burn_in) / self.thin))


@dataclass
class PosteriorDraws:
    """Retained draws, indexed (chain, draw, ...)."""

    zeta: np.ndarray  # (m, n, K)
    Omega: np.ndarray  # (m, n, K, K)
    a: np.ndarray  # (m, n, K)
    beta: Optional[np.ndarray] = None  # (m, n, H, K)
    acceptance: Optional[np.ndarray] = None  # (m, H) post burn-in acceptance rates
    scales: Optional[np.ndarray] = None  # (m, H) frozen proposal scales
    config: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.zeta.shape[0]

    @property
    def n_draws(self) -> int:
        return self.zeta.shape[0] * self.zeta.shape[1]

    @property
    def K(self) -> int:
        return self.zeta.shape[-1]

    def pooled(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape((-1,) + arr.shape[2:])

    def psrf(self) -> dict:
        """Potential scale reduction for zeta, vech(Omega) and a."""
        return {"zeta": gelman_rubin(self.zeta), "Omega": gelman_rubin(vech(self.Omega)),
                "a": gelman_rubin(self.a)}


def vech(M) -> np.ndarray:
    """Lower triangle (column-major order) along the last two axes."""
    M = np.asarray(M)
    K = M.shape[-1]
    c, r = np.triu_indices(K)
    return M[..., r, c]


def vech_labels(K: int):
    c, r = np.triu_indices(K)
    return [f"Omega_{i + 1}{j + 1}" for i, j in zip(r, c)]


# ---------------------------------------------------------------------------
# full conditionals
# ---------------------------------------------------------------------------

def zeta_conditional(betas, Omega, priors: Hyperpriors):
    """Mean and covariance of zeta given the betas and Omega."""
    betas = np.asarray(betas, dtype=float).reshape(-1, priors.K)
    Oi = np.linalg.inv(Omega)
    prec = priors.Sigma0_inv + betas.shape[0] * Oi
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (priors.Sigma0_inv @ priors.mu0 + Oi @ betas.sum(axis=0))
    return mean, cov


def omega_conditional(betas, zeta, a, priors: Hyperpriors):
    """Inverse-Wishart (df, scale) of Omega given the betas, zeta and a."""
    betas = np.asarray(betas, dtype=float).reshape(-1, priors.K)
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("a must be positive")
    d = betas - zeta
    df = betas.shape[0] + priors.nu + priors.K - 1
    S = d.T @ d + 2 * priors.nu * np.diag(1 / a)
    return df, 0.5 * (S + S.T)


def a_conditional(Omega, priors: Hyperpriors):
    """Inverse-gamma (shape, rate) per coordinate of a given Omega."""
    Oi = np.linalg.inv(Omega)
    shape = np.full(priors.K, (priors.nu + priors.K) / 2)
    return shape, priors.nu * np.diag(Oi) + 1 / priors.A ** 2


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def gibbs_zeta(betas, Omega, priors: Hyperpriors, rng) -> np.ndarray:
    mean, cov = zeta_conditional(betas, Omega, priors)
    L = np.linalg.cholesky(cov)
    return mean + L @ _rng(rng).standard_normal(priors.K)


def sample_invwishart(df: float, scale, rng, size=None) -> np.ndarray:
    """Inverse-Wishart draws with E(Omega^{-1}) = df * scale^{-1} (Bartlett construction)."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    out = stats.invwishart.rvs(df=df, scale=scale, size=1 if size is None else size, random_state=_rng(rng))
    out = np.asarray(out, dtype=float)
    K = scale.shape[0]
    if size is None:
        return out.reshape(K, K)
    return out.reshape((size, K, K))


def gibbs_omega(betas, zeta, a, priors: Hyperpriors, rng) -> np.ndarray:
    df, S = omega_conditional(betas, zeta, a, priors)
    return sample_invwishart(df, S, rng)


def gibbs_a(Omega, priors: Hyperpriors, rng) -> np.ndarray:
    shape, rate = a_conditional(Omega, priors)
    return rate / _rng(rng).gamma(shape)


def beta_log_target(agent: AgentData, beta, zeta, Omega) -> float:
    """log p(y_h | beta_h) + log N(beta_h | zeta, Omega), dropping constants."""
    d = np.asarray(beta, dtype=float) - zeta
    return log_likelihood_agent(agent, beta) - 0.5 * d @ np.linalg.solve(Omega, d)


def rw_metropolis_beta(agent: AgentData, beta, zeta, Omega, scale: float, rng):
    """One random-walk Metropolis step for a single agent; returns (beta, accepted)."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    rng = _rng(rng)
    beta = np.asarray(beta, dtype=float)
    prop = beta + scale * rng.standard_normal(beta.shape)
    log_r = beta_log_target(agent, prop, zeta, Omega) - beta_log_target(agent, beta, zeta, Omega)
    if math.log(rng.uniform()) < log_r:
        return prop, True
    return beta, False


def rw_metropolis_block(st, betas, zeta, Omega_inv, scales, rng, current=None):
    """Vectorised random-walk step for every agent in a stack.

    Returns (betas, accepted flags, log target at the returned betas).
    """
    if current is None:
        current = stacked_f(betas, st, zeta, Omega_inv)
    prop = betas + scales[:, None] * rng.standard_normal(betas.shape)
    new = stacked_f(prop, st, zeta, Omega_inv)
    acc = np.log(rng.uniform(size=len(betas))) < new - current
    betas = np.where(acc[:, None], prop, betas)
    return betas, acc, np.where(acc, new, current)


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

def _run_chain(dataset: ChoiceDataset, priors: Hyperpriors, cfg: McmcConfig, rng: np.random.Generator):
    H, K = dataset.H, dataset.K
    st = dataset.stack()
    n_burn, kept = cfg.n_burn, cfg.kept_per_chain
    # overdispersed start around the prior location
    zeta = priors.mu0 + rng.standard_normal(K)
    Omega = np.eye(K)
    a = np.ones(K)
    betas = zeta + rng.standard_normal((H, K))
    scales = np.full(H, cfg.rw_scale)
    acc_count = np.zeros(H)
    out_z = np.empty((kept, K))
    out_O = np.empty((kept, K, K))
    out_a = np.empty((kept, K))
    out_b = np.empty((kept, H, K)) if cfg.store_beta else None
    j = 0
    first_kept = cfg.iterations - kept * cfg.thin
    for it in range(cfg.iterations):
        if H:
            Oi = np.linalg.inv(Omega)
            betas, acc, _ = rw_metropolis_block(st, betas, zeta, Oi, scales, rng)
            if it < n_burn and cfg.adapt:
                # Robbins-Monro on log scale, frozen once burn-in ends
                scales *= np.exp((acc - TARGET_ACCEPT) / (it + 1) ** 0.6)
            elif it >= n_burn:
                acc_count += acc
        zeta = gibbs_zeta(betas, Omega, priors, rng)
        Omega = gibbs_omega(betas, zeta, a, priors, rng)
        a = gibbs_a(Omega, priors, rng)
        if it >= first_kept and (it - first_kept + 1) % cfg.thin == 0 and j < kept:
            out_z[j], out_O[j], out_a[j] = zeta, Omega, a
            if out_b is not None:
                out_b[j] = betas
            j += 1
    n_post = cfg.iterations - n_burn
    rate = acc_count / n_post if n_post else np.full(H, np.nan)
    return out_z, out_O, out_a, out_b, rate, scales


def run_chains(dataset: ChoiceDataset, priors: Optional[Hyperpriors] = None,
               cfg: McmcConfig = McmcConfig()) -> PosteriorDraws:
    """Run ``cfg.chains`` independent chains and keep thinned post-burn-in draws."""
    priors = priors or Hyperpriors.default(dataset.K)
    if priors.K != dataset.K:
        raise ValueError("hyperprior dimension does not match the data")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    res = [_run_chain(dataset, priors, cfg, np.random.default_rng(s)) for s in seeds]
    z, O, a, b, rate, sc = zip(*res)
    return PosteriorDraws(np.stack(z), np.stack(O), np.stack(a), np.stack(b) if cfg.store_beta else None,
                          np.stack(rate), np.stack(sc), config=dict(vars(cfg)))


def gelman_rubin(chains) -> np.ndarray:
    """Potential scale reduction factor for series shaped (chains, length, ...)."""
    x = np.asarray(chains, dtype=float)
    if x.ndim < 2:
        raise ValueError("need an array shaped (chains, length, ...)")
    m, n = x.shape[:2]
    if m < 2:
        raise ValueError("need at least two chains")
    if n < 4:
        raise ValueError("chains must have length >= 4")
    means = x.mean(axis=1)
    B = n * means.var(axis=0, ddof=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        R = np.sqrt(var_plus / W)
    R = np.where(W > 0, R, np.where(B > 0, np.inf, 1.0))
    return R


def save_draws_csv(draws: PosteriorDraws, path, comment=None):
    K = draws.K
    header = ["chain", "draw"] + [f"zeta_{k + 1}" for k in range(K)] + vech_labels(K) + \
        [f"a_{k + 1}" for k in range(K)]
    vO = vech(draws.Omega)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for c in range(draws.n_chains):
            for i in range(draws.zeta.shape[1]):
                w.writerow([c, i] + [repr(float(v)) for v in (*draws.zeta[c, i], *vO[c, i], *draws.a[c, i])])


def load_draws_csv(path) -> PosteriorDraws:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    K = sum(h.startswith("zeta_") for h in header)
    m = int(body[:, 0].max()) + 1 if len(body) else 0
    n = len(body) // m if m else 0
    z = body[:, 2:2 + K]
    v = body[:, 2 + K:2 + K + K * (K + 1) // 2]
    a = body[:, 2 + K + K * (K + 1) // 2:]
    O = np.zeros((len(body), K, K))
    c, r = np.triu_indices(K)
    O[:, r, c] = v
    O[:, c, r] = v
    return PosteriorDraws(z.reshape(m, n, K), O.reshape(m, n, K, K), a.reshape(m, n, K))
