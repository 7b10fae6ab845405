"""Spike of the test-data conjugate kernel after a few gradient steps.

A two-layer network trained with total learning rate ``eta`` has first-layer
weights close to ``W0 + (b eta / n) X^T y a^T``. On fresh test data the
features then look like a spiked sample covariance with population spike
``lambda1`` over the bulk ``nu0 = b^2 * MP(gamma0) + (1 - b^2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

from ckspectra.activation import NormalizedActivation, validate_assumption
from ckspectra.measures import affine_pushforward
from ckspectra.mp_solver import DeformedMPLaw, deformed_mp, z_of_m, z_prime
from ckspectra.spikes import CRITICAL_TOL, DEFAULT_ETA, DEFAULT_M, SpecError, standard_mp


@dataclass(frozen=True)
class TrainedCkSpec:
    gamma0: float  # N / d
    gamma1: float  # N / n
    eta_total: float
    sigma_eps: float
    act: NormalizedActivation
    label_act: NormalizedActivation

    def __post_init__(self):
        if not (self.gamma0 > 0 and self.gamma1 > 0):
            raise SpecError("gamma0 and gamma1 must be positive")
        if self.eta_total < 0 or self.sigma_eps < 0:
            raise SpecError("eta and sigma_eps must be non-negative")

    def violations(self) -> list[str]:
        return [f"sigma: {v}" for v in validate_assumption(self.act)] + [
            f"sigma_*: {v}" for v in validate_assumption(self.label_act)
        ]


@dataclass(frozen=True)
class TrainedCkPrediction:
    theta1: float
    theta2: float
    lambda1: Optional[float]
    spike_exists: bool
    lambda_max: Optional[float]
    label_alignment: float
    edge_distance: Optional[float]
    z_val: Optional[float] = None
    z_prime_val: Optional[float] = None
    phi_val: Optional[float] = None
    ck_support: tuple[tuple[float, float], ...] = ()
    violations: tuple[str, ...] = field(default=())

    def to_json(self) -> dict:
        out = {
            k: getattr(self, k)
            for k in (
                "theta1", "theta2", "lambda1", "spike_exists", "lambda_max",
                "label_alignment", "edge_distance", "z_val", "z_prime_val", "phi_val",
            )
        }
        out["ck_support"] = [list(iv) for iv in self.ck_support]
        if self.violations:
            out["assumption_violated"] = list(self.violations)
        return out


def theta_params(spec: TrainedCkSpec) -> tuple[float, float, Optional[float]]:
    """Effective signal strengths and the population spike of the features."""
    b, bs = spec.act.b_sigma, spec.label_act.b_sigma
    eta = spec.eta_total
    theta1 = b * eta * math.sqrt((spec.gamma1 / spec.gamma0) * (1.0 + spec.sigma_eps**2) + bs**2)
    theta2 = b * bs * eta
    t2 = theta1**2
    if t2 == 0.0:
        return 0.0, 0.0, None
    lambda1 = b * b * (1.0 + t2) * (spec.gamma0 + t2) / t2 + 1.0 - b * b
    return theta1, theta2, lambda1


def feature_law(spec: TrainedCkSpec, M: int = DEFAULT_M, eta: float = DEFAULT_ETA) -> DeformedMPLaw:
    """``MP(gamma1) [x] (b^2 * MP(gamma0) + 1 - b^2)``: bulk of the feature covariance."""
    mu0, _ = standard_mp(float(spec.gamma0), M, eta)
    b2 = spec.act.b_sigma ** 2
    return deformed_mp(spec.gamma1, affine_pushforward(mu0, b2, 1.0 - b2))


def predict_trained_ck(
    spec: TrainedCkSpec,
    M: int = DEFAULT_M,
    eta: float = DEFAULT_ETA,
    law: Optional[DeformedMPLaw] = None,
) -> TrainedCkPrediction:
    """Top eigenvalue and test-label alignment of the trained CK.

    ``label_alignment`` is the limit of ``|y~^T u_hat| / sqrt(n)``. The bulk
    law may be passed in to share it across a learning-rate sweep.
    """
    theta1, theta2, lambda1 = theta_params(spec)
    law = law if law is not None else feature_law(spec, M, eta)
    g0, g1 = spec.gamma0, spec.gamma1
    support = tuple((a / g1, b / g1) for a, b in law.support)
    base = dict(theta1=theta1, theta2=theta2, lambda1=lambda1, ck_support=support, violations=tuple(spec.violations()))
    if lambda1 is None or theta1 <= g0 ** 0.25:
        return TrainedCkPrediction(
            spike_exists=False, lambda_max=None, label_alignment=0.0, edge_distance=None, **base
        )
    s = -1.0 / lambda1
    zv = float(z_of_m(law, s))
    zp = float(z_prime(law, s))
    phi = -s * zp / zv
    if not zp > CRITICAL_TOL:
        return TrainedCkPrediction(
            spike_exists=False, lambda_max=None, label_alignment=0.0, edge_distance=None,
            z_val=zv, z_prime_val=zp, phi_val=phi, **base
        )
    b, bs = spec.act.b_sigma, spec.label_act.b_sigma
    align = (
        abs(b * bs)
        * math.sqrt(zv * phi) / lambda1
        * abs(theta2) * math.sqrt((theta1**4 - g0) * (g0 + theta1**2)) / theta1**3
    )
    return TrainedCkPrediction(
        spike_exists=True,
        lambda_max=zv / g1,
        label_alignment=align,
        edge_distance=law.dist_to_support(zv) / g1,
        z_val=zv,
        z_prime_val=zp,
        phi_val=phi,
        **base,
    )


def sweep(spec: TrainedCkSpec, etas, M: int = DEFAULT_M, eta: float = DEFAULT_ETA) -> list[TrainedCkPrediction]:
    law = feature_law(spec, M, eta)
    return [predict_trained_ck(replace(spec, eta_total=float(e)), law=law) for e in etas]
