"""Mixed multinomial logit data model, likelihood and local objective.

Choices are stored as chosen-alternative indices. Covariates for an agent are
held as a ``(T, J, K)`` array so that every routine here can be vectorised
over events, and the ``stacked_*`` helpers additionally vectorise over agents
using a zero-padded ``(n, T_max, J, K)`` layout with an event mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import gammaln

from ._linalg import NumericalError, spd_inverse

LOG_PROB_FLOOR = math.log(1e-300)


@dataclass
class AgentData:
    """Observed choice events of a single decision maker."""

    agent_id: Any
    X: np.ndarray  # (T, J, K)
    y: np.ndarray  # (T,) chosen alternative indices

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.X.ndim != 3:
            raise ValueError(f"agent {self.agent_id!r}: covariates must be (T, J, K), got shape {self.X.shape}")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"agent {self.agent_id!r}: {self.X.shape[0]} covariate matrices but {self.y.shape[0]} choices")
        J = self.X.shape[1]
        if self.y.size and (self.y.min() < 0 or self.y.max() >= J):
            raise ValueError(f"agent {self.agent_id!r}: chosen index out of range 0..{J - 1}")

    @classmethod
    def empty(cls, agent_id, J: int, K: int) -> "AgentData":
        return cls(agent_id, np.zeros((0, J, K)), np.zeros(0, dtype=np.int64))

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def events(self):
        return [(self.X[t], int(self.y[t])) for t in range(self.T)]


@dataclass
class AgentStack:
    """Zero-padded block of agents used by the vectorised routines."""

    X: np.ndarray  # (n, T_max, J, K)
    y: np.ndarray  # (n, T_max)
    mask: np.ndarray  # (n, T_max) 1.0 for real events

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def take(self, idx) -> "AgentStack":
        idx = np.asarray(idx)
        return AgentStack(self.X[idx], self.y[idx], self.mask[idx])


def stack_agents(agents: Sequence[AgentData], J: int, K: int) -> AgentStack:
    n = len(agents)
    T_max = max([a.T for a in agents], default=0)
    X = np.zeros((n, T_max, J, K))
    y = np.zeros((n, T_max), dtype=np.int64)
    mask = np.zeros((n, T_max))
    for i, a in enumerate(agents):
        X[i, : a.T] = a.X
        y[i, : a.T] = a.y
        mask[i, : a.T] = 1.0
    return AgentStack(X, y, mask)


@dataclass
class ChoiceDataset:
    agents: list
    J: int
    K: int
    _stack: AgentStack | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.J < 2:
            raise ValueError("need at least two alternatives")
        if self.K < 1:
            raise ValueError("need at least one covariate")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        for a in self.agents:
            if a.X.shape[1:] != (self.J, self.K):
                raise ValueError(f"agent {a.agent_id!r}: covariate matrices are {a.X.shape[1:]}, expected {(self.J, self.K)}")

    @property
    def H(self) -> int:
        return len(self.agents)

    @property
    def n_events(self) -> int:
        return sum(a.T for a in self.agents)

    def stack(self) -> AgentStack:
        if self._stack is None:
            self._stack = stack_agents(self.agents, self.J, self.K)
        return self._stack

    def subset(self, idx) -> "ChoiceDataset":
        return ChoiceDataset([self.agents[i] for i in idx], self.J, self.K)


@dataclass
class Hyperpriors:
    mu0: np.ndarray
    Sigma0: np.ndarray
    nu: float = 2.0
    A: np.ndarray = None

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float).reshape(-1)
        K = self.mu0.size
        self.Sigma0 = np.asarray(self.Sigma0, dtype=float).reshape(K, K)
        self.A = np.full(K, 1e3) if self.A is None else np.broadcast_to(np.asarray(self.A, dtype=float), (K,)).copy()
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if np.any(self.A <= 0):
            raise ValueError("A_k must be positive")
        try:
            np.linalg.cholesky(self.Sigma0)
        except np.linalg.LinAlgError:
            raise ValueError("Sigma0 must be symmetric positive definite") from None
        self.Sigma0_inv = np.linalg.inv(self.Sigma0)

    @classmethod
    def default(cls, K: int) -> "Hyperpriors":
        return cls(np.zeros(K), 1e6 * np.eye(K), 2.0, np.full(K, 1e3))

    @property
    def K(self) -> int:
        return self.mu0.size


@dataclass
class LocalVarParams:
    mu: np.ndarray
    Sigma: np.ndarray


@dataclass
class GlobalVarParams:
    """q(zeta) = N(mu_zeta, Sigma_zeta), q(Omega) = IW(omega, Upsilon), q(a_k) = IG(b_k, c_k).

    ``Upsilon_inv`` is a cached Cholesky inverse; ``jittered`` records whether a
    diagonal jitter was needed to factorise ``Upsilon``.
    """

    mu_zeta: np.ndarray
    Sigma_zeta: np.ndarray
    omega: float
    Upsilon: np.ndarray
    b: np.ndarray
    c: np.ndarray
    Upsilon_inv: np.ndarray = field(init=False, repr=False)
    jittered: bool = field(init=False, default=False, repr=False)

    def __post_init__(self):
        self.Upsilon = 0.5 * (self.Upsilon + self.Upsilon.T)
        self.Upsilon_inv, self.jittered = spd_inverse(self.Upsilon, what="Upsilon")

    @property
    def K(self) -> int:
        return self.mu_zeta.size

    @property
    def E_Omega_inv(self) -> np.ndarray:
        # IW(omega, Upsilon) with density ~ |Omega|^{-(omega+K+1)/2} exp(-tr(Upsilon Omega^{-1})/2)
        return self.omega * self.Upsilon_inv

    def theta(self) -> np.ndarray:
        """Monitored vector [mu_zeta, diag(Upsilon), c] for the stopping rule."""
        return np.concatenate([self.mu_zeta, np.diag(self.Upsilon), self.c])

    def copy(self) -> "GlobalVarParams":
        return GlobalVarParams(self.mu_zeta.copy(), self.Sigma_zeta.copy(), self.omega,
                               self.Upsilon.copy(), self.b.copy(), self.c.copy())


def initial_global(H: int, priors: Hyperpriors) -> GlobalVarParams:
    K, nu = priors.K, priors.nu
    omega = H + nu + K - 1
    b = np.full(K, (nu + K) / 2)
    return GlobalVarParams(np.zeros(K), 0.01 * np.eye(K), omega, (omega - K + 1) * np.eye(K), b, b.copy())


# ---------------------------------------------------------------------------
# softmax / likelihood
# ---------------------------------------------------------------------------

def logsumexp(v, axis=-1):
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(v - m), axis=axis))


def softmax(v, axis=-1):
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def choice_probabilities(x, beta) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(beta))):
        raise ValueError("choice_probabilities: non-finite input")
    return softmax(x @ beta)


def log_likelihood_agent(agent: AgentData, beta) -> float:
    if agent.T == 0:
        return 0.0
    v = agent.X @ np.asarray(beta, dtype=float)  # (T, J)
    return float(np.sum(v[np.arange(agent.T), agent.y] - logsumexp(v)))


def f_beta(beta, agent: AgentData, glob: GlobalVarParams) -> float:
    """Local objective: log-likelihood minus the expected log-prior quadratic."""
    d = np.asarray(beta, dtype=float) - glob.mu_zeta
    return log_likelihood_agent(agent, beta) - 0.5 * glob.omega * d @ glob.Upsilon_inv @ d


def _curvature(X, p):
    """sum_t x_t^T (diag(p_t) - p_t p_t^T) x_t over the event axis (second from last axes)."""
    xbar = np.einsum("...tjk,...tj->...tk", X, p)
    return np.einsum("...tjk,...tj,...tjl->...kl", X, p, X) - np.einsum("...tk,...tl->...kl", xbar, xbar)


def grad_hess_f(beta, agent: AgentData, glob: GlobalVarParams):
    beta = np.asarray(beta, dtype=float)
    P = glob.E_Omega_inv
    g = -P @ (beta - glob.mu_zeta)
    Hs = -P.copy()
    if agent.T:
        p = softmax(agent.X @ beta)
        r = -p
        r[np.arange(agent.T), agent.y] += 1.0
        g = g + np.einsum("tjk,tj->k", agent.X, r)
        Hs = Hs - _curvature(agent.X, p)
    return g, 0.5 * (Hs + Hs.T)


def delta_expectation(local: LocalVarParams, x) -> float:
    """Second-order (delta method) approximation of E_q[logsumexp(x beta)] under beta ~ N(mu, Sigma)."""
    x = np.asarray(x, dtype=float)
    v = x @ local.mu
    rho = softmax(v)
    C = x.T @ (rho[:, None] * x) - np.outer(x.T @ rho, x.T @ rho)
    return float(logsumexp(v) + 0.5 * np.sum(C * local.Sigma))


# ---------------------------------------------------------------------------
# vectorised over agents
# ---------------------------------------------------------------------------

def stacked_f(beta, st: AgentStack, mu_zeta, P) -> np.ndarray:
    """f for n agents at once; ``P`` is E(Omega^{-1}) = omega * Upsilon^{-1}."""
    v = np.einsum("ntjk,nk->ntj", st.X, beta)
    chosen = np.take_along_axis(v, st.y[..., None], axis=-1)[..., 0]
    ll = np.sum(st.mask * (chosen - logsumexp(v)), axis=1)
    d = beta - mu_zeta
    return ll - 0.5 * np.einsum("nk,kl,nl->n", d, P, d)


def stacked_grad(beta, st: AgentStack, mu_zeta, P, with_hess=False):
    v = np.einsum("ntjk,nk->ntj", st.X, beta)
    p = softmax(v)
    r = -p
    np.put_along_axis(r, st.y[..., None], np.take_along_axis(r, st.y[..., None], axis=-1) + 1.0, axis=-1)
    g = np.einsum("ntjk,ntj->nk", st.X, r) - (beta - mu_zeta) @ P
    if not with_hess:
        return g
    Hs = -_curvature(st.X, p) - P
    return g, 0.5 * (Hs + np.swapaxes(Hs, -1, -2))


def stacked_curvature(mu, st: AgentStack):
    """(softmax probabilities at mu, summed softmax curvature) for each agent."""
    rho = softmax(np.einsum("ntjk,nk->ntj", st.X, mu))
    return rho, _curvature(st.X, rho)


def stacked_expected_f_delta(mu, Sigma, st: AgentStack, mu_zeta, P) -> np.ndarray:
    """Delta-method approximation of E_q f(beta_h) for each agent."""
    v = np.einsum("ntjk,nk->ntj", st.X, mu)
    rho = softmax(v)
    chosen = np.take_along_axis(v, st.y[..., None], axis=-1)[..., 0]
    C = _curvature(st.X, rho)
    ll = np.sum(st.mask * (chosen - logsumexp(v)), axis=1) - 0.5 * np.einsum("nkl,nkl->n", C, Sigma)
    d = mu - mu_zeta
    return ll - 0.5 * np.einsum("nk,kl,nl->n", d, P, d) - 0.5 * np.einsum("nkl,kl->n", Sigma, P)


# ---------------------------------------------------------------------------
# joint density
# ---------------------------------------------------------------------------

def _mvn_logpdf(x, mean, cov) -> float:
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, np.atleast_2d(x - mean).T)
    K = cov.shape[0]
    return float(-0.5 * np.sum(z * z) - z.shape[1] * (np.sum(np.log(np.diag(L))) + 0.5 * K * math.log(2 * math.pi)))


def log_multigamma(x: float, K: int) -> float:
    return K * (K - 1) / 4 * math.log(math.pi) + float(np.sum(gammaln(x + (1 - np.arange(1, K + 1)) / 2)))


def iw_logpdf(Omega, df: float, scale) -> float:
    """Inverse-Wishart log density with E(Omega^{-1}) = df * scale^{-1}."""
    K = scale.shape[0]
    _, logdet_s = np.linalg.slogdet(scale)
    sign, logdet_o = np.linalg.slogdet(Omega)
    if sign <= 0:
        raise ValueError("Omega must be positive definite")
    return (0.5 * df * logdet_s - 0.5 * df * K * math.log(2) - log_multigamma(df / 2, K)
            - 0.5 * (df + K + 1) * logdet_o - 0.5 * np.trace(scale @ np.linalg.inv(Omega)))


def ig_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    return shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x


def log_joint(dataset: ChoiceDataset, theta: dict, priors: Hyperpriors) -> float:
    """log p(y, beta, zeta, Omega, a) with all normalising constants.

    ``theta`` holds ``beta`` (H, K), ``zeta`` (K,), ``Omega`` (K, K) and ``a`` (K,).
    """
    K, nu = priors.K, priors.nu
    betas = np.asarray(theta["beta"], dtype=float).reshape(-1, K)
    zeta = np.asarray(theta["zeta"], dtype=float)
    Omega = np.asarray(theta["Omega"], dtype=float)
    a = np.asarray(theta["a"], dtype=float)
    if np.any(a <= 0):
        raise ValueError("a must be positive")
    try:
        np.linalg.cholesky(Omega)
    except np.linalg.LinAlgError:
        raise ValueError("Omega must be positive definite") from None
    out = sum(log_likelihood_agent(ag, b) for ag, b in zip(dataset.agents, betas))
    if len(betas):
        out += _mvn_logpdf(betas, zeta, Omega)
    out += _mvn_logpdf(zeta, priors.mu0, priors.Sigma0)
    out += iw_logpdf(Omega, nu + K - 1, 2 * nu * np.diag(1 / a))
    out += float(np.sum(ig_logpdf(a, 0.5, 1 / priors.A ** 2)))
    return float(out)


__all__ = [
    "AgentData", "AgentStack", "ChoiceDataset", "GlobalVarParams", "Hyperpriors", "LocalVarParams",
    "NumericalError", "choice_probabilities", "delta_expectation", "f_beta", "grad_hess_f",
    "initial_global", "log_joint", "log_likelihood_agent", "logsumexp", "softmax",
]
