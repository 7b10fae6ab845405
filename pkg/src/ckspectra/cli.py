"""Config-driven batch front-end.

    ckspectra run --config exp.json [--output DIR] [--workers N] [--seed-override S]

A config is a JSON object with a ``mode`` key and exactly one block named
after that mode. Everything is validated and computed in memory before the
first file is written, so a rejected or failed run leaves no artifacts.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ckspectra import __version__
from ckspectra.activation import ActivationError, get_activation, get_raw
from ckspectra.measures import DiscreteMeasure, MeasureError
from ckspectra.mp_solver import SolverError, deformed_mp, density_at, support_grid
from ckspectra.simulator import (
    DeepSimConfig,
    GdSimConfig,
    gd_spec,
    run_deep_experiment,
    run_gd_experiment,
)
from ckspectra.spikes import DEFAULT_ETA, DEFAULT_M, NetworkSpec, SpecError, predict_deep, standard_mp
from ckspectra.trained import TrainedCkSpec, feature_law, predict_trained_ck

log = logging.getLogger("ckspectra")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3

MODES = ("density", "predict-deep", "simulate-deep", "predict-trained", "simulate-trained")
TOP_LEVEL = {"mode", "output", "workers"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str
    params: dict
    output: str = "ckspectra-out"
    workers: int = 1
    raw: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.params.get("seed")

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------------------
# validation


def _require(block: dict, key: str, mode: str):
    if key not in block:
        raise ConfigError(f"{mode}: missing required key {key!r}")
    return block[key]


def _check_keys(block: dict, allowed: set, mode: str) -> None:
    extra = set(block) - allowed
    if extra:
        raise ConfigError(f"{mode}: unknown keys {sorted(extra)}")


def _pos_int(v, name: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    return v


def _real(v, name: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{name} must be a finite number, got {v!r}")
    return float(v)


def _reals(v, name: str) -> list[float]:
    if not isinstance(v, list):
        raise ConfigError(f"{name} must be a list of numbers")
    return [_real(x, name) for x in v]


def _measure(v, name: str) -> DiscreteMeasure:
    atoms = v.get("atoms") if isinstance(v, dict) else v
    if not isinstance(atoms, list) or not atoms or not all(isinstance(a, list) and len(a) == 2 for a in atoms):
        raise ConfigError(f"{name} must be a list of [value, weight] pairs")
    vals = [_real(a[0], name) for a in atoms]
    wts = [_real(a[1], name) for a in atoms]
    return DiscreteMeasure(vals, wts)


def _activation(block: dict, key: str, default: str):
    name = block.get(key, default)
    if not isinstance(name, str):
        raise ConfigError(f"{key} must be a string")
    get_raw(name)  # raises with the catalog listing
    return name


def load_config(path: str | os.PathLike, output=None, workers=None, seed_override=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(raw, output, workers, seed_override)


def parse_config(raw: Any, output=None, workers=None, seed_override=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    mode = raw.get("mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
    blocks = [k for k in raw if k not in TOP_LEVEL]
    if blocks != [mode]:
        raise ConfigError(f"expected exactly one parameter block named {mode!r}, found {blocks}")
    params = raw[mode]
    if not isinstance(params, dict):
        raise ConfigError(f"block {mode!r} must be an object")
    params = dict(params)
    if seed_override is not None:
        if mode not in ("simulate-deep", "simulate-trained"):
            log.warning("--seed-override ignored for deterministic mode %s", mode)
        else:
            params["seed"] = int(seed_override)
    out = output if output is not None else raw.get("output", "ckspectra-out")
    w = workers if workers is not None else raw.get("workers", 1)
    cfg = ExperimentConfig(mode, params, str(out), _pos_int(w, "workers"))
    cfg.raw = {"mode": mode, mode: params}
    VALIDATORS[mode](params)
    return cfg


def _common_numerics(p: dict, mode: str) -> None:
    M = p.get("M", DEFAULT_M)
    if _pos_int(M, "M") < 16:
        raise ConfigError("M must be at least 16")
    eta = _real(p.get("eta", DEFAULT_ETA), "eta")
    if not 0 < eta <= 1e-2:
        raise ConfigError("eta must lie in (0, 1e-2]")


def _v_density(p: dict) -> None:
    _check_keys(p, {"gamma", "nu", "points", "eta"}, "density")
    g = _real(_require(p, "gamma", "density"), "gamma")
    if g <= 0:
        raise ConfigError("gamma must be positive")
    _measure(_require(p, "nu", "density"), "nu")
    _pos_int(p.get("points", 801), "points")
    eta = _real(p.get("eta", DEFAULT_ETA), "eta")
    if not 0 < eta <= 1e-2:
        raise ConfigError("eta must lie in (0, 1e-2]")


def _v_predict_deep(p: dict) -> None:
    _check_keys(p, {"gammas", "activation", "thetas", "mu0", "spikes", "M", "eta"}, "predict-deep")
    gammas = _reals(_require(p, "gammas", "predict-deep"), "gammas")
    NetworkSpec(gammas, get_activation(_activation(p, "activation", "tanh")))
    if ("thetas" in p) == ("mu0" in p):
        raise ConfigError("predict-deep: give exactly one of 'thetas' or 'mu0'")
    if "thetas" in p:
        ths = _reals(p["thetas"], "thetas")
        if any(t <= 0 for t in ths):
            raise ConfigError("thetas must be positive")
    else:
        _measure(p["mu0"], "mu0")
        for sp in p.get("spikes", []):
            _reals(sp if isinstance(sp, list) else [sp], "spikes")
    _common_numerics(p, "predict-deep")


def _v_simulate_deep(p: dict) -> None:
    _check_keys(
        p, {"n", "dims", "thetas", "activation", "seed", "trials", "epsilon", "bins", "M", "eta"}, "simulate-deep"
    )
    _deep_sim_config(p)
    _common_numerics(p, "simulate-deep")


def _deep_sim_config(p: dict) -> DeepSimConfig:
    n = _pos_int(_require(p, "n", "simulate-deep"), "n")
    dims = [_pos_int(d, "dims") for d in _require(p, "dims", "simulate-deep")]
    cfg = DeepSimConfig(
        n=n,
        dims=tuple(dims),
        thetas=tuple(_reals(p.get("thetas", []), "thetas")),
        activation=_activation(p, "activation", "arctan"),
        seed=int(p.get("seed", 0)),
        trials=_pos_int(p.get("trials", 1), "trials"),
        epsilon=_real(p.get("epsilon", 0.1), "epsilon"),
        bins=_pos_int(p.get("bins", 60), "bins"),
    )
    NetworkSpec(cfg.gammas, get_activation(cfg.activation))
    return cfg


def _trained_spec(p: dict, mode: str) -> TrainedCkSpec:
    eta_total = p.get("eta_total", 0.0)
    return TrainedCkSpec(
        gamma0=_real(_require(p, "gamma0", mode), "gamma0"),
        gamma1=_real(_require(p, "gamma1", mode), "gamma1"),
        eta_total=_real(eta_total, "eta_total"),
        sigma_eps=_real(p.get("sigma_eps", 0.0), "sigma_eps"),
        act=get_activation(_activation(p, "activation", "erf")),
        label_act=get_activation(_activation(p, "label_activation", "erf")),
    )


def _v_predict_trained(p: dict) -> None:
    _check_keys(
        p,
        {"gamma0", "gamma1", "eta_total", "eta_sweep", "sigma_eps", "activation", "label_activation", "M", "eta"},
        "predict-trained",
    )
    if "eta_total" not in p and "eta_sweep" not in p:
        raise ConfigError("predict-trained: give 'eta_total' and/or 'eta_sweep'")
    _trained_spec(p, "predict-trained")
    for e in _reals(p.get("eta_sweep", []), "eta_sweep"):
        if e < 0:
            raise ConfigError("eta_sweep values must be non-negative")
    _common_numerics(p, "predict-trained")


def _gd_sim_config(p: dict, schedule=None) -> GdSimConfig:
    mode = "simulate-trained"
    sched = schedule if schedule is not None else _reals(_require(p, "eta_schedule", mode), "eta_schedule")
    return GdSimConfig(
        n=_pos_int(_require(p, "n", mode), "n"),
        d=_pos_int(_require(p, "d", mode), "d"),
        N=_pos_int(_require(p, "N", mode), "N"),
        eta_schedule=tuple(sched),
        sigma_eps=_real(p.get("sigma_eps", 0.0), "sigma_eps"),
        activation=_activation(p, "activation", "erf"),
        label_activation=_activation(p, "label_activation", "erf"),
        seed=int(p.get("seed", 0)),
        trials=_pos_int(p.get("trials", 1), "trials"),
        epsilon=_real(p.get("epsilon", 0.1), "epsilon"),
    )


def _v_simulate_trained(p: dict) -> None:
    _check_keys(
        p,
        {"n", "d", "N", "eta_schedule", "eta_sweep", "sigma_eps", "activation", "label_activation",
         "seed", "trials", "epsilon", "M", "eta"},
        "simulate-trained",
    )
    _gd_sim_config(p)
    _reals(p.get("eta_sweep", []), "eta_sweep")
    _common_numerics(p, "simulate-trained")


VALIDATORS: dict[str, Callable[[dict], None]] = {
    "density": _v_density,
    "predict-deep": _v_predict_deep,
    "simulate-deep": _v_simulate_deep,
    "predict-trained": _v_predict_trained,
    "simulate-trained": _v_simulate_trained,
}


# --------------------------------------------------------------------------
# runners: each returns (report, {filename: text})


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in r])
    return buf.getvalue()


def _run_density(cfg: ExperimentConfig):
    p = cfg.params
    law = deformed_mp(float(p["gamma"]), _measure(p["nu"], "nu"))
    xs = support_grid(law, p.get("points", 801))
    f = density_at(law, xs, p.get("eta", DEFAULT_ETA))
    mass = float(np.trapezoid(f, xs)) + law.zero_mass
    report = {"law": law.to_json(), "continuous_mass": mass - law.zero_mass, "total_mass": mass}
    return report, {"density.csv": _csv(["x", "density"], zip(xs, f))}


def _run_predict_deep(cfg: ExperimentConfig):
    p = cfg.params
    net = NetworkSpec(p["gammas"], get_activation(p.get("activation", "tanh")))
    M, eta = p.get("M", DEFAULT_M), p.get("eta", DEFAULT_ETA)
    if "thetas" in p:
        pred = predict_deep(net, thetas=p["thetas"], M=M, eta=eta)
    else:
        spikes = [(i, *(sp if isinstance(sp, list) else [sp])) for i, sp in enumerate(p.get("spikes", []))]
        pred = predict_deep(net, mu0=_measure(p["mu0"], "mu0"), spikes=spikes, M=M, eta=eta)
    files = {}
    for ell, bl in enumerate(pred.bulk_laws, start=1):
        files[f"density_layer{ell}.csv"] = _csv(["x", "density"], zip(bl.x, bl.density))
    rows = []
    for t in pred.trajectories:
        for ell in range(net.L + 1):
            rows.append((t.index, ell, int(t.survived(ell)), t.eigenvalue(ell), t.alignment(ell)))
    files["spikes.csv"] = _csv(["index", "layer", "survived", "eigenvalue", "alignment"], rows)
    return pred.to_json(), files


def _layer_density(pred, layer: int, xs):
    if layer == 0:
        _, law = standard_mp(pred.net.gammas[0])
    else:
        law = pred.mp_laws[layer - 1]
    return density_at(law, xs)


def _histogram_csv(edges, counts, predicted) -> str:
    centers = 0.5 * (edges[1:] + edges[:-1])
    return _csv(["bin_center", "count", "predicted_density"], zip(centers, counts, predicted))


def _run_simulate_deep(cfg: ExperimentConfig):
    p = cfg.params
    sim = _deep_sim_config(p)
    net = NetworkSpec(sim.gammas, get_activation(sim.activation))
    pred = predict_deep(net, thetas=sim.thetas, M=p.get("M", DEFAULT_M), eta=p.get("eta", DEFAULT_ETA))
    res = run_deep_experiment(sim, pred, workers=cfg.workers)
    if not res.trials:
        raise SolverError("every trial failed")
    files = {}
    for k, trial in enumerate(res.trials):
        files[f"trials/trial_{k:03d}.json"] = json.dumps([r.to_json() for r in trial], indent=2, sort_keys=True)
    for ell in range(sim.L + 1):
        edges = res.trials[0][ell].bulk_histogram[0]
        counts = np.mean([t[ell].bulk_histogram[1] for t in res.trials], axis=0)
        files[f"histogram_layer{ell}.csv"] = _histogram_csv(
            edges, counts, _layer_density(pred, ell, 0.5 * (edges[1:] + edges[:-1]))
        )
    cols = ["layer", "index", "theta", "predicted_eigenvalue", "empirical_eigenvalue", "eigenvalue_stderr",
            "predicted_alignment", "empirical_alignment", "alignment_stderr", "found"]
    table = res.comparison_table()
    files["aggregate.csv"] = _csv(cols, ([row[c] for c in cols] for row in table))
    report = {"prediction": pred.to_json(), "simulation": res.to_json()}
    return report, files


def _run_predict_trained(cfg: ExperimentConfig):
    p = cfg.params
    spec = _trained_spec(p, "predict-trained")
    law = feature_law(spec, p.get("M", DEFAULT_M), p.get("eta", DEFAULT_ETA))
    report, files = {}, {}
    if "eta_total" in p:
        report["prediction"] = predict_trained_ck(spec, law=law).to_json()
    xs = support_grid(law)
    f = density_at(law, xs, p.get("eta", DEFAULT_ETA))
    g1 = spec.gamma1
    # K = F F^T / N holds n of the N feature eigenvalues, each divided by gamma1
    files["ck_density.csv"] = _csv(["x", "density"], zip(xs / g1, f * g1 * g1))
    report["ck_zero_mass"] = max(0.0, 1.0 - g1)
    if "eta_sweep" in p:
        rows, preds = [], []
        for e in p["eta_sweep"]:
            pr = predict_trained_ck(TrainedCkSpec(**{**spec.__dict__, "eta_total": float(e)}), law=law)
            preds.append({"eta_total": float(e), **pr.to_json()})
            rows.append((float(e), pr.theta1, int(pr.spike_exists), pr.lambda_max, pr.label_alignment))
        report["sweep"] = preds
        files["sweep.csv"] = _csv(["eta_total", "theta1", "spike_exists", "lambda_max", "alignment"], rows)
    return report, files


def _run_simulate_trained(cfg: ExperimentConfig):
    p = cfg.params
    sim = _gd_sim_config(p)
    M, eta = p.get("M", DEFAULT_M), p.get("eta", DEFAULT_ETA)
    law = feature_law(gd_spec(sim), M, eta)
    runs = [sim] + [_gd_sim_config(p, schedule=[float(e)]) for e in p.get("eta_sweep", [])]
    summaries, files, report = [], {}, {}
    for k, run in enumerate(runs):
        res = run_gd_experiment(run, predict_trained_ck(gd_spec(run), law=law), workers=cfg.workers)
        if not res.trials:
            raise SolverError("every trial failed")
        summaries.append(res.summary())
        if k == 0:
            report["main"] = res.to_json()
            edges = res.trials[0].bulk_histogram[0]
            counts = np.mean([t.bulk_histogram[1] for t in res.trials], axis=0)
            centers = 0.5 * (edges[1:] + edges[:-1])
            g1 = sim.N / sim.n
            files["histogram.csv"] = _histogram_csv(edges, counts, g1 * g1 * density_at(law, centers * g1))
            for j, t in enumerate(res.trials):
                files[f"trials/trial_{j:03d}.json"] = json.dumps(t.to_json(), indent=2, sort_keys=True)
    report["runs"] = summaries
    cols = list(summaries[0])
    files["aggregate.csv"] = _csv(cols, ([s[c] for c in cols] for s in summaries))
    return report, files


RUNNERS = {
    "density": _run_density,
    "predict-deep": _run_predict_deep,
    "simulate-deep": _run_simulate_deep,
    "predict-trained": _run_predict_trained,
    "simulate-trained": _run_simulate_trained,
}


# --------------------------------------------------------------------------
# entry points


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_artifacts(cfg: ExperimentConfig, report: dict, files: dict[str, str]) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default))
    manifest = {
        "config_sha256": cfg.digest(),
        "config": cfg.raw,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "version": __version__,
        "files": sorted(["report.json", *files]),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def run(config_path, output=None, workers=None, seed_override=None) -> int:
    """Validate, execute, and write artifacts. Returns the process exit code."""
    try:
        cfg = load_config(config_path, output, workers, seed_override)
    except (ConfigError, ActivationError, SpecError, MeasureError, ValueError) as exc:
        log.error("invalid config: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    log.info("mode %s, output %s", cfg.mode, cfg.output)
    try:
        report, files = RUNNERS[cfg.mode](cfg)
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    write_artifacts(cfg, report, files)
    return EXIT_OK


def _setup_logging() -> None:
    level = os.environ.get("CKSPECTRA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ckspectra", description="Conjugate kernel spectra: predictions and simulations.")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("--config", required=True, help="path to the JSON config")
    r.add_argument("--output", help="output directory (overrides the config)")
    r.add_argument("--workers", type=int, help="worker processes for Monte Carlo trials")
    r.add_argument("--seed-override", type=int, help="replace the seed of simulate-* modes")
    args = parser.parse_args(argv)
    _setup_logging()
    return run(args.config, args.output, args.workers, args.seed_override)


if __name__ == "__main__":
    sys.exit(main())
