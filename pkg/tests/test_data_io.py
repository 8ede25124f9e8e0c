import json

import numpy as np
import pytest

from mmnlvb.batch import fit_batch
from mmnlvb.data_io import (
    FIT_FORMAT, DataFormatError, SimSpec, fit_to_dict, load_dataset, load_fit, load_truth, preset_spec,
    save_dataset, save_fit, save_trace_csv, save_truth, simulate_dataset,
)
from mmnlvb.model import AgentData, ChoiceDataset, GlobalVarParams, choice_probabilities
from mmnlvb.local import laplace_block


def _datasets_equal(a: ChoiceDataset, b: ChoiceDataset):
    assert (a.H, a.J, a.K) == (b.H, b.J, b.K)
    for x, y in zip(a.agents, b.agents):
        assert x.agent_id == y.agent_id
        np.testing.assert_array_equal(x.X, y.X)
        np.testing.assert_array_equal(x.y, y.y)


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


HEADER = "agent_id,event_id,alt_id,chosen,x1,x2"


def test_simulate_is_deterministic_and_prefix_stable():
    a, ta = simulate_dataset(SimSpec(H=20, J=3, K=2, T=5, seed=4))
    b, tb = simulate_dataset(SimSpec(H=20, J=3, K=2, T=5, seed=4))
    c, _ = simulate_dataset(SimSpec(H=10, J=3, K=2, T=5, seed=4))
    _datasets_equal(a, b)
    np.testing.assert_array_equal(ta["beta"], tb["beta"])
    for x, y in zip(a.agents[:10], c.agents):
        np.testing.assert_array_equal(x.X, y.X)
    d, _ = simulate_dataset(SimSpec(H=20, J=3, K=2, T=5, seed=5))
    assert not np.allclose(a.agents[0].X, d.agents[0].X)


def test_simulate_design_and_truth_record():
    ds, truth = simulate_dataset(SimSpec(H=400, J=4, K=3, T=(2, 6), covariate_sd=0.5, seed=1))
    np.testing.assert_allclose(truth["zeta"], [-2, 0, 2])
    assert truth["beta"].shape == (400, 3)
    Ts = [a.T for a in ds.agents]
    assert min(Ts) >= 2 and max(Ts) <= 6 and len(set(Ts)) > 1
    X = np.concatenate([a.X.ravel() for a in ds.agents])
    assert abs(X.std() - 0.5) < 0.01 and abs(X.mean()) < 0.01
    dev = truth["beta"] - truth["zeta"]
    np.testing.assert_allclose(np.cov(dev.T), np.eye(3), atol=0.2)


def test_presets():
    hi = preset_spec("paper-high-het")
    assert (hi.H, hi.J, hi.K, hi.T) == (10_000, 12, 10, 25)
    np.testing.assert_array_equal(hi.Omega_true, np.eye(10))
    np.testing.assert_allclose(hi.zeta_true, np.linspace(-2, 2, 10))
    lo = preset_spec("paper-low-het", seed=3)
    np.testing.assert_array_equal(lo.Omega_true, 0.25 * np.eye(10))
    desk = preset_spec("desk", H=100)
    assert (desk.H, desk.J, desk.K, desk.T) == (100, 5, 3, 10)
    with pytest.raises(ValueError):
        preset_spec("nope")
    with pytest.raises(ValueError):
        SimSpec(H=1, J=2, K=2, Omega_true=-np.eye(2))


def test_uniform_limit_gives_uniform_choices():
    J = 4
    ds, _ = simulate_dataset(SimSpec(H=500, J=J, K=2, T=10, zeta_true=np.zeros(2), Omega_true=np.zeros((2, 2)),
                                     seed=2))
    y = np.concatenate([a.y for a in ds.agents])
    freq = np.bincount(y, minlength=J) / y.size
    se = np.sqrt(0.25 * 0.75 / y.size)
    assert np.all(np.abs(freq - 1 / J) < 3 * se)


def test_choice_frequencies_match_model_probabilities():
    ds, truth = simulate_dataset(SimSpec(H=300, J=3, K=2, T=10, seed=3))
    p = np.concatenate([choice_probabilities(a.X, b) for a, b in zip(ds.agents, truth["beta"])])
    y = np.concatenate([a.y for a in ds.agents])
    onehot = np.eye(3)[y]
    # sum of (indicator - probability) has variance sum p(1-p)
    z = (onehot - p).sum(axis=0) / np.sqrt((p * (1 - p)).sum(axis=0))
    assert np.all(np.abs(z) < 4)


def test_pooled_estimate_is_consistent_with_small_heterogeneity():
    zeta = np.array([1.0, -0.5])
    ds, _ = simulate_dataset(SimSpec(H=10, J=3, K=2, T=500, zeta_true=zeta, Omega_true=1e-8 * np.eye(2), seed=8))
    pooled = ChoiceDataset([AgentData(0, np.concatenate([a.X for a in ds.agents]),
                                      np.concatenate([a.y for a in ds.agents]))], 3, 2)
    # maximum likelihood under an essentially flat prior
    flat = GlobalVarParams(np.zeros(2), np.eye(2), 2.0, 2e12 * np.eye(2), np.ones(2), np.ones(2))
    beta, _, _ = laplace_block(pooled.stack(), flat, np.zeros((1, 2)))
    np.testing.assert_allclose(beta[0], zeta, atol=0.1)


def test_dataset_round_trip(tmp_path, small_sim):
    ds, _ = small_sim
    p = tmp_path / "d.csv"
    save_dataset(ds, p, comment="seed 7\nsecond line")
    _datasets_equal(ds, load_dataset(p))


def test_string_agent_ids_round_trip(tmp_path, rng):
    ds = ChoiceDataset([AgentData("anna", rng.standard_normal((2, 3, 2)), [0, 2]),
                        AgentData("bo", rng.standard_normal((1, 3, 2)), [1])], 3, 2)
    p = tmp_path / "d.csv"
    save_dataset(ds, p)
    _datasets_equal(ds, load_dataset(p))


def test_out_of_order_events_are_sorted(tmp_path):
    p = _write(tmp_path / "d.csv", [
        HEADER,
        "1,5,0,0,0.1,0.2", "1,5,1,1,0.3,0.4",
        "1,2,1,0,0.7,0.8", "1,2,0,1,0.5,0.6",
    ])
    ds = load_dataset(p)
    a = ds.agents[0]
    np.testing.assert_array_equal(a.y, [0, 1])
    np.testing.assert_array_equal(a.X[0], [[0.5, 0.6], [0.7, 0.8]])
    np.testing.assert_array_equal(a.X[1], [[0.1, 0.2], [0.3, 0.4]])


@pytest.mark.parametrize("lines, match", [
    ([HEADER, "1,0,0,0,0.1,0.2", "1,0,1,0,0.3,0.4"], "exactly one chosen"),
    ([HEADER, "1,0,0,1,0.1,0.2", "1,0,1,1,0.3,0.4"], "exactly one chosen"),
    ([HEADER, "1,0,0,1,0.1", "1,0,1,0,0.3,0.4"], "row 2"),
    ([HEADER, "1,0,0,1,0.1,abc", "1,0,1,0,0.3,0.4"], "row 2"),
    ([HEADER, "1,0,0,1,0.1,nan", "1,0,1,0,0.3,0.4"], "non-finite"),
    ([HEADER, "1,0,0,2,0.1,0.2", "1,0,1,0,0.3,0.4"], "0 or 1"),
    ([HEADER, "1,0,0,1,0.1,0.2", "1,0,2,0,0.3,0.4"], "enumerate"),
    ([HEADER, "1,0,0,1,0.1,0.2", "1,0,1,0,0.3,0.4", "1,1,0,1,0.1,0.2", "1,1,1,0,0.3,0.4", "1,1,2,0,0,0"],
     "enumerate"),
    (["agent,event,alt,chosen,x1", "1,0,0,1,0.1"], "header"),
    ([HEADER], "no data"),
])
def test_malformed_csv_rejected(tmp_path, lines, match):
    p = _write(tmp_path / "bad.csv", lines)
    with pytest.raises(DataFormatError, match=match):
        load_dataset(p)


def test_empty_file_and_unknown_format(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(DataFormatError):
        load_dataset(p)
    with pytest.raises(ValueError):
        load_dataset(p, format="parquet")


@pytest.fixture(scope="module")
def small_fit(small_sim):
    ds, _ = small_sim
    fit = fit_batch(ds, backend="ncvmp")
    fit.config = {"seed": 1}
    return fit


def test_fit_round_trip(tmp_path, small_fit):
    p = tmp_path / "fit.json"
    save_fit(small_fit, p)
    back = load_fit(p)
    g, h = small_fit.glob, back.glob
    for name in ("mu_zeta", "Sigma_zeta", "Upsilon", "b", "c"):
        np.testing.assert_array_equal(getattr(g, name), getattr(h, name))
    assert h.omega == g.omega
    np.testing.assert_array_equal(back.mu, small_fit.mu)
    np.testing.assert_array_equal(back.Sigma, small_fit.Sigma)
    assert back.trace == small_fit.trace
    assert back.diagnostics == small_fit.diagnostics
    assert back.agent_ids == small_fit.agent_ids
    assert back.backend == "ncvmp" and back.converged == small_fit.converged
    np.testing.assert_array_equal(back.priors.Sigma0, small_fit.priors.Sigma0)
    assert back.config == {"seed": 1}


def test_fit_matrices_are_row_major_with_shapes(small_fit):
    d = fit_to_dict(small_fit)
    U = d["global"]["Upsilon"]
    assert U["shape"] == [3, 3]
    np.testing.assert_array_equal(np.array(U["data"]).reshape(3, 3), small_fit.glob.Upsilon)
    assert d["spd"] == {"Sigma_zeta": True, "Upsilon": True}
    assert d["format"] == FIT_FORMAT


def test_fit_version_and_schema_errors(tmp_path, small_fit):
    d = fit_to_dict(small_fit)
    p = tmp_path / "fit.json"
    p.write_text(json.dumps({**d, "format": "mmnlvb-fit/0"}))
    with pytest.raises(DataFormatError, match="incompatible"):
        load_fit(p)
    p.write_text(json.dumps({k: v for k, v in d.items() if k != "global"}))
    with pytest.raises(DataFormatError, match="missing"):
        load_fit(p)
    p.write_text(json.dumps({**d, "spd": {"Sigma_zeta": False, "Upsilon": True}}))
    with pytest.raises(DataFormatError, match="flag"):
        load_fit(p)
    p.write_text("{not json")
    with pytest.raises(DataFormatError):
        load_fit(p)


def test_truth_and_trace_files(tmp_path, small_sim, small_fit):
    _, truth = small_sim
    save_truth(truth, tmp_path / "t.json", extra={"config": {"seed": 7}})
    back = load_truth(tmp_path / "t.json")
    np.testing.assert_array_equal(back["beta"], truth["beta"])
    assert back["spec"]["H"] == 50
    save_trace_csv(small_fit, tmp_path / "trace.csv", comment="cfg")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "# cfg"
    assert lines[1].startswith("phase,iteration,xi")
    assert len(lines) == 2 + len(small_fit.trace)
