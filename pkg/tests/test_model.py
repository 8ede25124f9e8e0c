import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mmnlvb.model import (AgentData, ChoiceDataset, Hyperpriors, LocalVarParams, choice_probabilities,
                          delta_expectation, f_beta, grad_hess_f, ig_logpdf, initial_global, iw_logpdf, log_joint,
                          log_likelihood_agent, softmax, stack_agents, stacked_expected_f_delta, stacked_f,
                          stacked_grad)

from conftest import random_agent, random_global


def fd_grad_hess(fun, x, h=1e-5):
    K = x.size
    g = np.zeros(K)
    Hm = np.zeros((K, K))
    for i in range(K):
        e = np.zeros(K)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    hh = 1e-4
    for i in range(K):
        for j in range(K):
            ei = np.zeros(K)
            ej = np.zeros(K)
            ei[i] = hh
            ej[j] = hh
            Hm[i, j] = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * hh * hh)
    return g, Hm


def test_grad_hess_matches_finite_differences(rng):
    for _ in range(20):
        K, J, T = rng.integers(1, 5), rng.integers(2, 6), rng.integers(0, 10)
        ag = random_agent(rng, T, J, K, scale=0.7)
        glob = random_global(rng, 10, Hyperpriors.default(K))
        beta = rng.standard_normal(K)
        g, Hs = grad_hess_f(beta, ag, glob)
        g_fd, H_fd = fd_grad_hess(lambda b: f_beta(b, ag, glob), beta)
        np.testing.assert_allclose(g, g_fd, rtol=1e-6, atol=1e-6 * (1 + np.abs(g).max()))
        np.testing.assert_allclose(Hs, H_fd, rtol=1e-4, atol=1e-4 * (1 + np.abs(Hs).max()))


def test_softmax_is_stable_for_huge_utilities():
    p = softmax(np.array([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0])
    assert np.isfinite(log_likelihood_agent(AgentData(0, np.array([[[800.0], [-800.0]]]), [1]), [1.0]))


def test_choice_probabilities_rejects_nan():
    with pytest.raises(ValueError):
        choice_probabilities(np.array([[np.nan], [0.0]]), np.array([1.0]))


@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_choice_probabilities_on_simplex(J, K, seed):
    r = np.random.default_rng(seed)
    p = choice_probabilities(3 * r.standard_normal((J, K)), r.standard_normal(K))
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)


def test_permuting_alternatives_permutes_probabilities(rng):
    x = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    perm = rng.permutation(5)
    np.testing.assert_allclose(choice_probabilities(x[perm], b), choice_probabilities(x, b)[perm])


def test_stacked_routines_match_single_agent(rng):
    K, J = 3, 4
    agents = [random_agent(rng, T, J, K, agent_id=i) for i, T in enumerate([0, 3, 7, 1])]
    glob = random_global(rng, 4, Hyperpriors.default(K))
    st_ = stack_agents(agents, J, K)
    beta = rng.standard_normal((4, K))
    fs = stacked_f(beta, st_, glob.mu_zeta, glob.E_Omega_inv)
    gs, Hs = stacked_grad(beta, st_, glob.mu_zeta, glob.E_Omega_inv, with_hess=True)
    for i, ag in enumerate(agents):
        assert fs[i] == pytest.approx(f_beta(beta[i], ag, glob), rel=1e-12, abs=1e-12)
        g1, H1 = grad_hess_f(beta[i], ag, glob)
        np.testing.assert_allclose(gs[i], g1, atol=1e-12)
        np.testing.assert_allclose(Hs[i], H1, atol=1e-12)


def test_delta_expectation_close_to_monte_carlo_for_small_covariance(rng):
    x = 0.5 * rng.standard_normal((4, 2))
    mu = np.array([0.3, -0.2])
    Sigma = 0.01 * np.array([[1.0, 0.3], [0.3, 1.0]])
    draws = rng.multivariate_normal(mu, Sigma, size=200_000)
    v = draws @ x.T
    mc = np.mean(np.log(np.exp(v).sum(axis=1)))
    assert delta_expectation(LocalVarParams(mu, Sigma), x) == pytest.approx(mc, abs=2e-4)


def test_stacked_expected_f_delta_matches_single(rng):
    K, J = 2, 3
    ag = random_agent(rng, 4, J, K)
    glob = random_global(rng, 3, Hyperpriors.default(K))
    mu = rng.standard_normal(K)
    S = np.array([[0.2, 0.05], [0.05, 0.1]])
    direct = log_likelihood_agent(ag, mu)
    for t in range(ag.T):
        v = ag.X[t] @ mu
        direct -= delta_expectation(LocalVarParams(mu, S), ag.X[t]) - np.log(np.exp(v).sum())
    d = mu - glob.mu_zeta
    P = glob.E_Omega_inv
    direct -= 0.5 * d @ P @ d + 0.5 * np.sum(S * P)
    got = stacked_expected_f_delta(mu[None], S[None], stack_agents([ag], J, K), glob.mu_zeta, P)[0]
    assert got == pytest.approx(direct, rel=1e-12)


def test_iw_and_ig_densities_match_scipy(rng):
    K = 3
    M = rng.standard_normal((K, K))
    S = M @ M.T + np.eye(K)
    Om = stats.invwishart.rvs(df=6, scale=S, random_state=1)
    assert iw_logpdf(Om, 6, S) == pytest.approx(stats.invwishart.logpdf(Om, df=6, scale=S), rel=1e-10)
    assert ig_logpdf(0.7, 1.5, 2.0) == pytest.approx(stats.invgamma.logpdf(0.7, 1.5, scale=2.0), rel=1e-12)


def test_log_joint_against_scipy_terms(small_sim, rng):
    ds, truth = small_sim
    pri = Hyperpriors(np.zeros(3), 4 * np.eye(3), nu=2.0, A=np.array([1.0, 2.0, 3.0]))
    theta = {"beta": truth["beta"], "zeta": truth["zeta"], "Omega": 0.3 * np.eye(3) + 0.05,
             "a": np.array([0.5, 1.0, 2.0])}
    ref = sum(log_likelihood_agent(a, b) for a, b in zip(ds.agents, truth["beta"]))
    ref += stats.multivariate_normal(theta["zeta"], theta["Omega"]).logpdf(truth["beta"]).sum()
    ref += stats.multivariate_normal(pri.mu0, pri.Sigma0).logpdf(theta["zeta"])
    ref += stats.invwishart.logpdf(theta["Omega"], df=4, scale=4 * np.diag(1 / theta["a"]))
    ref += stats.invgamma.logpdf(theta["a"], 0.5, scale=1 / pri.A ** 2).sum()
    assert log_joint(ds, theta, pri) == pytest.approx(ref, rel=1e-10)


def test_log_joint_rejects_invalid_parameters(small_sim):
    ds, truth = small_sim
    pri = Hyperpriors.default(3)
    base = {"beta": truth["beta"], "zeta": truth["zeta"], "Omega": np.eye(3), "a": np.ones(3)}
    with pytest.raises(ValueError):
        log_joint(ds, {**base, "Omega": -np.eye(3)}, pri)
    with pytest.raises(ValueError):
        log_joint(ds, {**base, "a": np.array([1.0, 0.0, 1.0])}, pri)


def test_initial_global_values():
    pri = Hyperpriors.default(3)
    g = initial_global(10, pri)
    assert g.omega == 10 + 2 + 3 - 1
    np.testing.assert_allclose(g.b, np.full(3, 2.5))
    np.testing.assert_allclose(g.c, g.b)
    np.testing.assert_allclose(g.Upsilon, (g.omega - 2) * np.eye(3))
    np.testing.assert_allclose(g.Sigma_zeta, 0.01 * np.eye(3))
    np.testing.assert_allclose(pri.Sigma0, 1e6 * np.eye(3))
    np.testing.assert_allclose(pri.A, 1e3)


def test_dataset_validation():
    with pytest.raises(ValueError):
        AgentData(0, np.zeros((2, 3, 1)), [0])
    with pytest.raises(ValueError):
        AgentData(0, np.zeros((1, 3, 1)), [3])
    a = AgentData(0, np.zeros((1, 3, 1)), [0])
    with pytest.raises(ValueError):
        ChoiceDataset([a, a], 3, 1)
    with pytest.raises(ValueError):
        ChoiceDataset([a], 1, 1)
    with pytest.raises(ValueError):
        ChoiceDataset([a], 3, 2)


def test_hyperprior_validation():
    with pytest.raises(ValueError):
        Hyperpriors(np.zeros(2), -np.eye(2))
    with pytest.raises(ValueError):
        Hyperpriors(np.zeros(2), np.eye(2), nu=0.0)
    with pytest.raises(ValueError):
        Hyperpriors(np.zeros(2), np.eye(2), A=np.array([1.0, -1.0]))
