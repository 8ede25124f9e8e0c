"""Simulated data, CSV datasets and JSON fit files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .batch import FitResult
from .model import AgentData, ChoiceDataset, GlobalVarParams, Hyperpriors

FIT_FORMAT = "mmnlvb-fit/1"


class DataFormatError(ValueError):
    """A dataset or fit file does not follow the expected schema."""


@dataclass
class SimSpec:
    H: int
    J: int
    K: int
    T: object = 10  # int, or (low, high) inclusive range drawn per agent
    zeta_true: np.ndarray = None
    Omega_true: np.ndarray = None
    covariate_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.zeta_true is None:
            self.zeta_true = np.linspace(-2, 2, self.K)
        if self.Omega_true is None:
            self.Omega_true = np.eye(self.K)
        self.zeta_true = np.asarray(self.zeta_true, dtype=float).reshape(self.K)
        self.Omega_true = np.asarray(self.Omega_true, dtype=float).reshape(self.K, self.K)
        w = np.linalg.eigvalsh(self.Omega_true)
        if w.min() < -1e-12 or not np.allclose(self.Omega_true, self.Omega_true.T):
            raise ValueError("Omega_true must be symmetric positive semi-definite")


PRESETS = {
    "paper-high-het": dict(H=10_000, J=12, K=10, T=25, omega_scale=1.0),
    "paper-low-het": dict(H=10_000, J=12, K=10, T=25, omega_scale=0.25),
    "desk": dict(H=500, J=5, K=3, T=10, omega_scale=0.25),
}


def preset_spec(name: str, seed: int = 0, **overrides) -> SimSpec:
    try:
        p = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    p.update({k: v for k, v in overrides.items() if v is not None})
    K = p["K"]
    return SimSpec(p["H"], p["J"], K, p["T"], np.linspace(-2, 2, K), p["omega_scale"] * np.eye(K), seed=seed)


def psd_sqrt(S):
    """Lower-triangular factor when possible, symmetric square root for singular PSD matrices."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        return V * np.sqrt(np.clip(w, 0, None))


def simulate_dataset(spec: SimSpec):
    """Draw beta_h ~ N(zeta, Omega), covariates iid N(0, sd^2) and choices from the logit probabilities.

    Each agent uses its own random stream, so agent h's data does not depend on H.
    """
    L = psd_sqrt(spec.Omega_true)
    agents, betas = [], []
    for h in range(spec.H):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(h,)))
        T = spec.T if np.isscalar(spec.T) else int(rng.integers(spec.T[0], spec.T[1] + 1))
        beta = spec.zeta_true + L @ rng.standard_normal(spec.K)
        X = rng.normal(0.0, spec.covariate_sd, size=(T, spec.J, spec.K))
        v = X @ beta
        p = np.exp(v - v.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(T)
        y = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), spec.J - 1)
        agents.append(AgentData(h, X, y))
        betas.append(beta)
    truth = {"zeta": spec.zeta_true, "Omega": spec.Omega_true,
             "beta": np.array(betas).reshape(spec.H, spec.K), "spec": spec_to_dict(spec)}
    return ChoiceDataset(agents, spec.J, spec.K), truth


def spec_to_dict(spec: SimSpec) -> dict:
    return {"H": spec.H, "J": spec.J, "K": spec.K,
            "T": spec.T if np.isscalar(spec.T) else list(spec.T),
            "zeta_true": spec.zeta_true.tolist(), "Omega_true": spec.Omega_true.tolist(),
            "covariate_sd": spec.covariate_sd, "seed": spec.seed}


def save_truth(truth: dict, path, extra=None):
    out = {"zeta": np.asarray(truth["zeta"]).tolist(), "Omega": np.asarray(truth["Omega"]).tolist(),
           "beta": np.asarray(truth["beta"]).tolist(), "spec": truth.get("spec")}
    if extra:
        out.update(extra)
    Path(path).write_text(json.dumps(out, indent=1))


def load_truth(path) -> dict:
    d = json.loads(Path(path).read_text())
    return {"zeta": np.array(d["zeta"], dtype=float), "Omega": np.array(d["Omega"], dtype=float),
            "beta": np.array(d["beta"], dtype=float), "spec": d.get("spec")}


# ---------------------------------------------------------------------------
# CSV datasets: agent_id,event_id,alt_id,chosen,x1..xK (one row per alternative)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: ChoiceDataset, path, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent_id", "event_id", "alt_id", "chosen"] + [f"x{k + 1}" for k in range(dataset.K)])
        for a in dataset.agents:
            for t in range(a.T):
                for j in range(dataset.J):
                    w.writerow([a.agent_id, t, j, int(a.y[t] == j)] + [_fmt(x) for x in a.X[t, j]])


def _parse_id(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def _sort_key(e):
    return (0, e, "") if isinstance(e, int) else (1, 0, str(e))


def load_dataset(path, format="csv") -> ChoiceDataset:
    """Read a long-format choice CSV. Lines starting with '#' are skipped.

    Events of an agent are sorted by event id (stably); alternatives must
    enumerate 0..J-1 with exactly one chosen per event.
    """
    if format != "csv":
        raise ValueError(f"unsupported dataset format {format!r}")
    rows = {}
    order = []
    n_rows = 0
    K = None
    with open(path, newline="") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(lines)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:4] != ["agent_id", "event_id", "alt_id", "chosen"] or len(header) < 5:
            raise DataFormatError(f"{path}: header must be agent_id,event_id,alt_id,chosen,x1..xK")
        K = len(header) - 4
        for row in reader:
            if not row:
                continue
            n_rows += 1
            lineno = reader.line_num
            if len(row) != K + 4:
                raise DataFormatError(f"{path}: row {lineno} has {len(row)} fields, expected {K + 4}")
            try:
                alt = int(row[2])
                chosen = int(row[3])
                x = [float(v) for v in row[4:]]
            except ValueError as e:
                raise DataFormatError(f"{path}: row {lineno}: {e}") from None
            if chosen not in (0, 1):
                raise DataFormatError(f"{path}: row {lineno}: chosen must be 0 or 1")
            if not all(math.isfinite(v) for v in x):
                raise DataFormatError(f"{path}: row {lineno}: non-finite covariate")
            aid, eid = _parse_id(row[0]), _parse_id(row[1])
            if aid not in rows:
                rows[aid] = {}
                order.append(aid)
            rows[aid].setdefault(eid, []).append((alt, chosen, x, lineno))
    J = None
    agents = []
    n_used = 0
    for aid in order:
        events = rows[aid]
        Xs, ys = [], []
        for eid in sorted(events, key=_sort_key):
            alts = sorted(events[eid], key=lambda r: r[0])
            first_line = alts[0][3]
            if J is None:
                J = len(alts)
            if len(alts) != J or [r[0] for r in alts] != list(range(J)):
                raise DataFormatError(f"{path}: agent {aid!r} event {eid!r} (row {first_line}): alternatives must enumerate 0..{J - 1}")
            chosen = [r[0] for r in alts if r[1] == 1]
            if len(chosen) != 1:
                raise DataFormatError(f"{path}: agent {aid!r} event {eid!r} (row {first_line}): expected exactly one chosen alternative, found {len(chosen)}")
            Xs.append([r[2] for r in alts])
            ys.append(chosen[0])
            n_used += len(alts)
        agents.append(AgentData(aid, np.array(Xs, dtype=float).reshape(len(Xs), J, K), np.array(ys)))
    if n_used != n_rows:
        raise DataFormatError(f"{path}: {n_rows} rows read but {n_used} used")
    if J is None:
        raise DataFormatError(f"{path}: no data rows")
    return ChoiceDataset(agents, J, K)


# ---------------------------------------------------------------------------
# fit JSON
# ---------------------------------------------------------------------------

def _mat(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _unmat(d):
    try:
        return np.array(d["data"], dtype=float).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"malformed matrix entry: {e}") from None


def _is_spd(a) -> bool:
    try:
        np.linalg.cholesky(a)
        return True
    except np.linalg.LinAlgError:
        return False


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (np.floating, np.integer)):
        return _json_safe(v.item())
    return v


def fit_to_dict(fit: FitResult) -> dict:
    g = fit.glob
    pri = fit.priors
    return {
        "format": FIT_FORMAT,
        "backend": fit.backend,
        "converged": fit.converged,
        "agent_ids": list(fit.agent_ids),
        "global": {"mu_zeta": _mat(g.mu_zeta), "Sigma_zeta": _mat(g.Sigma_zeta), "omega": g.omega,
                   "Upsilon": _mat(g.Upsilon), "b": _mat(g.b), "c": _mat(g.c)},
        "spd": {"Sigma_zeta": _is_spd(g.Sigma_zeta), "Upsilon": _is_spd(g.Upsilon)},
        "locals": {"mu": _mat(fit.mu), "Sigma": _mat(fit.Sigma)},
        "priors": None if pri is None else {"mu0": _mat(pri.mu0), "Sigma0": _mat(pri.Sigma0), "nu": pri.nu,
                                            "A": _mat(pri.A)},
        "trace": [{k: _json_safe(v) for k, v in rec.items()} for rec in fit.trace],
        "diagnostics": {k: _json_safe(v) for k, v in fit.diagnostics.items()},
        "config": fit.config,
    }


def _unsafe(v):
    if isinstance(v, str) and v in ("inf", "-inf", "nan"):
        return float(v)
    return v


def fit_from_dict(d: dict) -> FitResult:
    if not isinstance(d, dict) or "format" not in d:
        raise DataFormatError("fit file lacks a format field")
    if d["format"] != FIT_FORMAT:
        raise DataFormatError(f"incompatible fit format {d['format']!r}; this version reads {FIT_FORMAT!r}")
    try:
        g = d["global"]
        glob = GlobalVarParams(_unmat(g["mu_zeta"]), _unmat(g["Sigma_zeta"]), float(g["omega"]),
                               _unmat(g["Upsilon"]), _unmat(g["b"]), _unmat(g["c"]))
        for name, flag in d.get("spd", {}).items():
            mat = glob.Sigma_zeta if name == "Sigma_zeta" else glob.Upsilon
            if flag != _is_spd(mat):
                raise DataFormatError(f"{name} positive-definiteness flag does not match the stored matrix")
        p = d.get("priors")
        priors = None if p is None else Hyperpriors(_unmat(p["mu0"]), _unmat(p["Sigma0"]), float(p["nu"]), _unmat(p["A"]))
        ids = [tuple(i) if isinstance(i, list) else i for i in d["agent_ids"]]
        return FitResult(glob, _unmat(d["locals"]["mu"]), _unmat(d["locals"]["Sigma"]),
                         [{k: _unsafe(v) for k, v in r.items()} for r in d["trace"]],
                         {k: _unsafe(v) for k, v in d["diagnostics"].items()},
                         bool(d["converged"]), d["backend"], ids, priors, d.get("config", {}))
    except KeyError as e:
        raise DataFormatError(f"fit file missing field {e}") from None


def save_fit(fit: FitResult, path):
    Path(path).write_text(json.dumps(fit_to_dict(fit), indent=1))


def load_fit(path) -> FitResult:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: not valid JSON ({e})") from None
    return fit_from_dict(d)


def save_trace_csv(fit: FitResult, path, comment=None):
    cols = ["phase", "iteration", "xi", "batch_size", "alpha", "min_ratio", "lower_bound", "wall_time"]
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in fit.trace:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in cols])
