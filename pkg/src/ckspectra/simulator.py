"""Monte Carlo ensembles for the deep CK and the trained two-layer CK.

Every trial draws from its own Philox stream keyed by ``(seed, trial)``, so
trials can be farmed out to worker processes and still reproduce the serial
results bit for bit.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse.linalg import svds

from ckspectra.activation import NormalizedActivation, get_activation
from ckspectra.spikes import DeepPrediction, NetworkSpec, SpecError, predict_deep
from ckspectra.trained import TrainedCkPrediction, TrainedCkSpec, predict_trained_ck

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.1


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(trial)])))


# --------------------------------------------------------------------------
# configs and results


@dataclass(frozen=True)
class DeepSimConfig:
    n: int
    dims: tuple[int, ...]  # d_0 .. d_L
    thetas: tuple[float, ...] = ()
    activation: str = "arctan"
    seed: int = 0
    trials: int = 1
    epsilon: float = DEFAULT_EPSILON
    bins: int = 60

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        if self.n < 64 or any(d < 64 for d in self.dims):
            raise SpecError("n and all widths must be at least 64")
        if len(self.dims) < 2:
            raise SpecError("need d_0 and at least one hidden width")
        if len(self.thetas) > min(self.n, self.dims[0]) / 4:
            raise SpecError("too many signal components for the dimensions")
        if self.trials < 1:
            raise SpecError("trials must be positive")

    @property
    def L(self) -> int:
        return len(self.dims) - 1

    @property
    def gammas(self) -> tuple[float, ...]:
        return tuple(self.n / d for d in self.dims)


@dataclass(frozen=True)
class GdSimConfig:
    n: int
    d: int
    N: int
    eta_schedule: tuple[float, ...] = (2.0,)
    sigma_eps: float = 0.0
    activation: str = "erf"
    label_activation: str = "erf"
    seed: int = 0
    trials: int = 1
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "eta_schedule", tuple(float(e) for e in self.eta_schedule))
        if min(self.n, self.d, self.N) < 1:
            raise SpecError("n, d, N must be positive")
        if not self.eta_schedule:
            raise SpecError("learning-rate schedule must be non-empty")
        if self.trials < 1:
            raise SpecError("trials must be positive")

    @property
    def eta_total(self) -> float:
        return float(sum(self.eta_schedule))


@dataclass
class Outlier:
    value: float
    alignments: dict[int, float]  # tracked direction index -> |v_hat^T b|^2

    @property
    def best(self) -> Optional[int]:
        if not self.alignments:
            return None
        return max(self.alignments, key=self.alignments.get)


@dataclass
class SimResult:
    eigenvalues: np.ndarray
    outliers: list[Outlier]
    bulk_histogram: tuple[np.ndarray, np.ndarray]  # (bin edges, counts)
    diagnostics: dict = field(default_factory=dict)
    tracked_alignment: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "n_eigenvalues": int(self.eigenvalues.size),
            "top_eigenvalues": self.eigenvalues[::-1][:10].tolist(),
            "outliers": [{"value": o.value, "alignments": {str(k): v for k, v in o.alignments.items()}} for o in self.outliers],
            "tracked_alignment": {str(k): v for k, v in self.tracked_alignment.items()},
            "diagnostics": self.diagnostics,
        }


# --------------------------------------------------------------------------
# primitives


def _orthonormal(rng: np.random.Generator, dim: int, r: int) -> np.ndarray:
    q, rr = np.linalg.qr(rng.standard_normal((dim, r)))
    return q * np.sign(np.diag(rr))


def gen_gmm(cfg: DeepSimConfig, trial: int):
    """Signal-plus-noise data ``X = sum theta_i a_i b_i^T + Z`` (d x n).

    Returns ``(X, A, B)`` with the orthonormal directions as columns.
    """
    rng = trial_rng(cfg.seed, trial)
    d, n, r = cfg.dims[0], cfg.n, len(cfg.thetas)
    A = _orthonormal(rng, d, r) if r else np.zeros((d, 0))
    B = _orthonormal(rng, n, r) if r else np.zeros((n, 0))
    Z = rng.standard_normal((d, n)) / math.sqrt(d)
    X = Z + (A * np.asarray(cfg.thetas)) @ B.T
    return X, A, B


def draw_weights(cfg: DeepSimConfig, trial: int) -> list[np.ndarray]:
    # separate stream from the data so widths can change without moving X
    rng = trial_rng(cfg.seed ^ 0x5EED, trial)
    return [rng.standard_normal((cfg.dims[ell], cfg.dims[ell - 1])) for ell in range(1, cfg.L + 1)]


def forward_features(X: np.ndarray, weights: Sequence[np.ndarray], act: Callable) -> list[np.ndarray]:
    """Feature matrices ``X_0 .. X_L`` with ``X_l = act(W_l X_{l-1}) / sqrt(d_l)``."""
    feats = [X]
    for ell, W in enumerate(weights, start=1):
        if W.shape[1] != feats[-1].shape[0]:
            raise ValueError(f"layer {ell}: weight shape {W.shape} does not match input {feats[-1].shape}")
        feats.append(act(W @ feats[-1]) / math.sqrt(W.shape[0]))
    return feats


def forward_ck(X: np.ndarray, weights: Sequence[np.ndarray], act: Callable) -> list[np.ndarray]:
    """CK matrices ``K_0 .. K_L`` (``K_l = X_l^T X_l``)."""
    out = []
    for F in forward_features(X, weights, act):
        K = F.T @ F
        out.append(0.5 * (K + K.T))
    return out


def _dist_to(x: float, support) -> float:
    d = abs(x)
    for a, b in support:
        d = min(d, 0.0 if a <= x <= b else min(abs(x - a), abs(x - b)))
    return d


def extract_outliers(eigenvalues, support, epsilon: float = DEFAULT_EPSILON) -> list[float]:
    """Eigenvalues farther than ``epsilon`` from ``support U {0}``, descending.

    ``epsilon = 0`` returns everything off the closed support (diagnostic use).
    """
    ev = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    return [float(x) for x in ev if _dist_to(x, support) > epsilon]


def alignment(vhat, target) -> float:
    """Squared overlap ``|vhat^T target|^2`` of two unit vectors."""
    vhat, target = np.asarray(vhat, float), np.asarray(target, float)
    for v in (vhat, target):
        if abs(np.linalg.norm(v) - 1.0) > 1e-8:
            raise ValueError("alignment needs unit vectors")
    return float(min(1.0, np.dot(vhat, target) ** 2))


def orthonormality_stats(X: np.ndarray) -> dict:
    """Largest deviations of the columns from an orthonormal system."""
    G = X.T @ X
    norms = np.sqrt(np.clip(np.diag(G), 0.0, None))
    off = G - np.diag(np.diag(G))
    return {"max_abs_inner": float(np.abs(off).max()), "max_norm_dev": float(np.abs(norms - 1.0).max())}


def _histogram(ev: np.ndarray, bins: int, support) -> tuple[np.ndarray, np.ndarray]:
    hi = max([b for _, b in support] + [float(ev.max())]) * 1.05
    counts, edges = np.histogram(ev, bins=bins, range=(0.0, hi))
    return edges, counts


def analyze_spectrum(
    K: np.ndarray,
    support,
    directions: np.ndarray,
    epsilon: float,
    bins: int = 60,
) -> SimResult:
    """Eigendecompose ``K`` and measure outlier alignments with ``directions``."""
    ev, V = np.linalg.eigh(K)
    res_outliers = []
    order = np.argsort(ev)[::-1]
    out_vals = extract_outliers(ev, support, epsilon)
    for k, val in zip(order, out_vals):
        al = {i: float(np.dot(V[:, k], directions[:, i]) ** 2) for i in range(directions.shape[1])}
        res_outliers.append(Outlier(float(ev[k]), al))
    trace = float(np.trace(K))
    diag = {
        "trace_rel_err": abs(float(ev.sum()) - trace) / max(abs(trace), 1e-300),
        "min_eigenvalue": float(ev.min()),
        "ones_rayleigh": float(np.ones(K.shape[0]) @ K @ np.ones(K.shape[0]) / K.shape[0]),
    }
    sim = SimResult(ev, res_outliers, _histogram(ev, bins, support), diag)
    sim.eigenvectors = V[:, order[: max(directions.shape[1], 1)]]
    return sim


# --------------------------------------------------------------------------
# deep experiment


def _deep_trial(cfg: DeepSimConfig, trial: int, supports) -> list[SimResult]:
    act = get_activation(cfg.activation)
    X, A, B = gen_gmm(cfg, trial)
    weights = draw_weights(cfg, trial)
    Ks = forward_ck(X, weights, act)
    ortho = orthonormality_stats(X)
    results = []
    for ell, K in enumerate(Ks):
        r = analyze_spectrum(K, supports[ell], B, cfg.epsilon, cfg.bins)
        # alignment of the i-th top eigenvector with b_i, whether or not it is an outlier
        top = r.eigenvectors
        r.tracked_alignment = {i: float(np.dot(top[:, i], B[:, i]) ** 2) for i in range(min(B.shape[1], top.shape[1]))}
        r.diagnostics["orthonormality"] = ortho
        del r.eigenvectors
        results.append(r)
    return results


@dataclass
class DeepExperimentResult:
    config: DeepSimConfig
    prediction: DeepPrediction
    trials: list[list[SimResult]]  # trials x layers
    failed: list[int] = field(default_factory=list)

    def outlier_pattern(self, trial: int, layer: int) -> list[int]:
        """Spike indices identified by the empirical outliers (best-aligned direction)."""
        return sorted(o.best for o in self.trials[trial][layer].outliers if o.best is not None)

    def pattern_matches(self, trial: int, layer: int) -> bool:
        outs = self.trials[trial][layer].outliers
        pat = [o.best for o in outs]
        return len(set(pat)) == len(pat) and sorted(pat) == sorted(self.prediction.surviving(layer))

    def spike_stats(self, index: int, layer: int) -> dict:
        """Empirical eigenvalue and alignment of the outlier tracking spike ``index``."""
        vals, aligns = [], []
        for t in self.trials:
            match = [o for o in t[layer].outliers if o.best == index]
            if match:
                vals.append(match[0].value)
                aligns.append(match[0].alignments[index])
        traj = self.prediction.trajectories[index]
        return {
            "index": index,
            "layer": layer,
            "theta": self.config.thetas[index] if index < len(self.config.thetas) else None,
            "predicted_eigenvalue": traj.eigenvalue(layer),
            "predicted_alignment": traj.alignment(layer),
            "found": len(vals),
            "empirical_eigenvalue": float(np.mean(vals)) if vals else None,
            "eigenvalue_stderr": float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None,
            "empirical_alignment": float(np.mean(aligns)) if aligns else None,
            "alignment_stderr": float(np.std(aligns, ddof=1) / math.sqrt(len(aligns))) if len(aligns) > 1 else None,
        }

    def comparison_table(self) -> list[dict]:
        rows = []
        for ell in range(self.config.L + 1):
            for t in self.prediction.trajectories:
                rows.append(self.spike_stats(t.index, ell))
        return rows

    def to_json(self) -> dict:
        return {
            "comparison": self.comparison_table(),
            "pattern_match_rate": [
                float(np.mean([self.pattern_matches(k, ell) for k in range(len(self.trials))]))
                for ell in range(self.config.L + 1)
            ],
            "failed_trials": self.failed,
        }


def run_deep_experiment(
    cfg: DeepSimConfig,
    prediction: Optional[DeepPrediction] = None,
    workers: int = 1,
) -> DeepExperimentResult:
    """Simulate the deep CK ensemble and line it up with the engine prediction."""
    if prediction is None:
        net = NetworkSpec(cfg.gammas, get_activation(cfg.activation))
        prediction = predict_deep(net, thetas=cfg.thetas)
    supports = [prediction.support(ell) for ell in range(cfg.L + 1)]
    trials, failed = _map_trials(_deep_trial, cfg, supports, workers)
    return DeepExperimentResult(cfg, prediction, trials, failed)


def _map_trials(fn, cfg, extra, workers: int):
    results, failed = [], []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, cfg, k, extra) for k in range(cfg.trials)]
            outcomes = []
            for k, fut in enumerate(futures):
                try:
                    outcomes.append(fut.result())
                except np.linalg.LinAlgError as exc:
                    log.warning("trial %d failed: %s", k, exc)
                    failed.append(k)
            results = outcomes
    else:
        for k in range(cfg.trials):
            try:
                results.append(fn(cfg, k, extra))
            except np.linalg.LinAlgError as exc:
                log.warning("trial %d failed: %s", k, exc)
                failed.append(k)
    return results, failed


# --------------------------------------------------------------------------
# trained two-layer network


@dataclass
class TrainResult:
    W0: np.ndarray
    W: np.ndarray
    a: np.ndarray
    X: np.ndarray
    y: np.ndarray
    beta: np.ndarray
    rank_one_residual: float
    update_norm: float


def _labels(rng, X, beta, label_act, sigma_eps):
    return label_act(X @ beta) + sigma_eps * rng.standard_normal(X.shape[0])


def train_two_layer(cfg: GdSimConfig, trial: int = 0) -> TrainResult:
    """Full-batch GD on the first layer of ``f(x) = sigma(x^T W) a / sqrt(N)``.

    Uses the exact MSE gradient; the distance to the rank-one proxy
    ``W0 + (b eta / n) X^T y a^T`` is reported in operator norm.
    """
    act = get_activation(cfg.activation)
    label_act = get_activation(cfg.label_activation)
    rng = trial_rng(cfg.seed, trial)
    n, d, N = cfg.n, cfg.d, cfg.N
    beta = np.zeros(d)
    beta[0] = 1.0
    W0 = rng.standard_normal((d, N)) / math.sqrt(d)
    a = rng.standard_normal(N) / math.sqrt(N)
    X = rng.standard_normal((n, d))
    y = _labels(rng, X, beta, label_act, cfg.sigma_eps)
    W = W0.copy()
    sqN = math.sqrt(N)
    for eta_t in cfg.eta_schedule:
        if eta_t == 0.0:
            continue
        pre = X @ W
        resid = y - act(pre) @ a / sqN
        G = X.T @ ((np.outer(resid, a) / sqN) * act.derivative(pre)) / n
        W = W + eta_t * sqN * G
    proxy = W0 + (act.b_sigma * cfg.eta_total / n) * np.outer(X.T @ y, a)
    return TrainResult(W0, W, a, X, y, beta, _opnorm(W - proxy), _opnorm(W - W0))


def _opnorm(M: np.ndarray) -> float:
    if not np.any(M):
        return 0.0
    if min(M.shape) <= 64:
        return float(np.linalg.norm(M, 2))
    return float(svds(M, k=1, return_singular_vectors=False, random_state=0)[0])


def _gd_trial(cfg: GdSimConfig, trial: int, support) -> SimResult:
    act = get_activation(cfg.activation)
    label_act = get_activation(cfg.label_activation)
    tr = train_two_layer(cfg, trial)
    rng = trial_rng(cfg.seed ^ 0x7E57, trial)
    Xt = rng.standard_normal((cfg.n, cfg.d))
    yt = _labels(rng, Xt, tr.beta, label_act, cfg.sigma_eps)
    F = act(Xt @ tr.W)
    K = F @ F.T / cfg.N
    K = 0.5 * (K + K.T)
    y_unit = yt / np.linalg.norm(yt)
    r = analyze_spectrum(K, support, y_unit[:, None], cfg.epsilon)
    u = r.eigenvectors[:, 0]
    del r.eigenvectors
    r.tracked_alignment = {0: float(abs(yt @ u) / math.sqrt(cfg.n))}
    r.diagnostics.update(
        rank_one_residual=tr.rank_one_residual,
        update_norm=tr.update_norm,
        top_eigenvalue=float(r.eigenvalues[-1]),
    )
    return r


@dataclass
class GdExperimentResult:
    config: GdSimConfig
    prediction: TrainedCkPrediction
    trials: list[SimResult]
    failed: list[int] = field(default_factory=list)

    def top_eigenvalues(self) -> np.ndarray:
        return np.array([t.eigenvalues[-1] for t in self.trials])

    def label_alignments(self) -> np.ndarray:
        return np.array([t.tracked_alignment[0] for t in self.trials])

    def outlier_counts(self) -> np.ndarray:
        return np.array([len(t.outliers) for t in self.trials])

    def summary(self) -> dict:
        top, al = self.top_eigenvalues(), self.label_alignments()
        k = max(len(self.trials), 1)
        return {
            "eta_total": self.config.eta_total,
            "predicted_lambda_max": self.prediction.lambda_max,
            "predicted_alignment": self.prediction.label_alignment,
            "spike_exists": self.prediction.spike_exists,
            "empirical_lambda_max": float(top.mean()),
            "lambda_max_stderr": float(top.std(ddof=1) / math.sqrt(k)) if k > 1 else None,
            "empirical_alignment": float(al.mean()),
            "alignment_stderr": float(al.std(ddof=1) / math.sqrt(k)) if k > 1 else None,
            "mean_outliers": float(self.outlier_counts().mean()),
            "mean_rank_one_residual": float(np.mean([t.diagnostics["rank_one_residual"] for t in self.trials])),
        }

    def to_json(self) -> dict:
        return {"summary": self.summary(), "prediction": self.prediction.to_json(), "failed_trials": self.failed}


def gd_spec(cfg: GdSimConfig) -> TrainedCkSpec:
    return TrainedCkSpec(
        gamma0=cfg.N / cfg.d,
        gamma1=cfg.N / cfg.n,
        eta_total=cfg.eta_total,
        sigma_eps=cfg.sigma_eps,
        act=get_activation(cfg.activation),
        label_act=get_activation(cfg.label_activation),
    )


def run_gd_experiment(
    cfg: GdSimConfig,
    prediction: Optional[TrainedCkPrediction] = None,
    workers: int = 1,
) -> GdExperimentResult:
    """Train, build the test-data CK, and compare with the closed-form prediction."""
    if prediction is None:
        prediction = predict_trained_ck(gd_spec(cfg))
    trials, failed = _map_trials(_gd_trial, cfg, prediction.ck_support, workers)
    return GdExperimentResult(cfg, prediction, trials, failed)
