"""Bulk-law recursion and spike propagation through a deep random network.

Layer ``l`` sees the population law ``nu_{l-1} = b^2 * mu_{l-1} + (1 - b^2)``
and produces ``mu_l = rho_MP(gamma_l) [x] nu_{l-1}``. A spike with value
``s`` (on the m-scale) survives layer ``l`` iff ``z_l'(s) > 0``; its CK
eigenvalue is ``z_l(s)`` and its squared eigenvector alignment picks up a
factor ``phi_l(s) = -s z_l'(s) / z_l(s)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from ckspectra.activation import NormalizedActivation, validate_assumption
from ckspectra.measures import (
    BulkLaw,
    DiscreteMeasure,
    Measure,
    affine_pushforward,
)
from ckspectra.mp_solver import (
    DeformedMPLaw,
    PoleError,
    SolverError,
    deformed_mp,
    density_grid,
    z_of_m,
    z_prime,
)

log = logging.getLogger(__name__)

CRITICAL_TOL = 1e-8
DEFAULT_M = 2000
DEFAULT_ETA = 1e-5


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    gammas: tuple[float, ...]
    activation: NormalizedActivation

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if len(self.gammas) < 2:
            raise SpecError("need gamma_0 and at least one layer ratio")
        if not all(g > 0 and math.isfinite(g) for g in self.gammas):
            raise SpecError("aspect ratios must be positive and finite")
        problems = validate_assumption(self.activation)
        if problems:
            raise SpecError(f"activation {self.activation.name!r}: " + "; ".join(problems))

    @property
    def L(self) -> int:
        return len(self.gammas) - 1

    @property
    def b2(self) -> float:
        return self.activation.b_sigma ** 2


@dataclass(frozen=True)
class LayerRecord:
    layer: int
    s_prev: float
    z_val: float
    z_prime_val: float
    phi_val: float
    survived: bool
    critical: bool
    s_next: float
    alignment_product: float
    edge_distance: float


@dataclass(frozen=True)
class SpikeTrajectory:
    index: int
    lambda0: float
    base_alignment: float = 1.0
    active: bool = True  # False for input spikes already absorbed at layer 0
    records: tuple[LayerRecord, ...] = ()

    def survived(self, layer: int) -> bool:
        if layer == 0:
            return self.active
        return layer <= len(self.records) and self.records[layer - 1].survived

    def eigenvalue(self, layer: int) -> Optional[float]:
        if layer == 0:
            return self.lambda0 if self.active else None
        return self.records[layer - 1].z_val if self.survived(layer) else None

    def alignment(self, layer: int) -> Optional[float]:
        """Limit of ``|v_hat^T b|^2``: cumulative phi product times the input alignment."""
        if layer == 0:
            return self.base_alignment if self.active else None
        if not self.survived(layer):
            return None
        return self.records[layer - 1].alignment_product * self.base_alignment

    def to_json(self, L: int) -> dict:
        layers = []
        for ell in range(0, L + 1):
            rec = self.records[ell - 1] if 1 <= ell <= len(self.records) else None
            layers.append(
                {
                    "layer": ell,
                    "survived": self.survived(ell),
                    "eigenvalue": self.eigenvalue(ell),
                    "alignment": self.alignment(ell),
                    "phi": rec.phi_val if rec else None,
                    "z_prime": rec.z_prime_val if rec else None,
                    "critical": rec.critical if rec else False,
                    "edge_distance": rec.edge_distance if rec else None,
                }
            )
        return {"index": self.index, "lambda0": self.lambda0, "base_alignment": self.base_alignment, "layers": layers}


@dataclass(frozen=True)
class DeepPrediction:
    net: NetworkSpec
    mu0: Measure
    bulk_laws: tuple[BulkLaw, ...]  # mu_1 .. mu_L
    nu_laws: tuple[DiscreteMeasure, ...]  # nu_0 .. nu_{L-1}
    mp_laws: tuple[DeformedMPLaw, ...]  # layer 1 .. L
    mu0_support: tuple[tuple[float, float], ...] = ()
    trajectories: tuple[SpikeTrajectory, ...] = field(default=())

    def support(self, layer: int) -> tuple[tuple[float, float], ...]:
        return self.mu0_support if layer == 0 else self.mp_laws[layer - 1].support

    def surviving(self, layer: int) -> list[int]:
        return [t.index for t in self.trajectories if t.survived(layer)]

    def to_json(self) -> dict:
        L = self.net.L
        return {
            "activation": self.net.activation.to_json(),
            "gammas": list(self.net.gammas),
            "layers": [
                {"layer": 0, "support": [list(iv) for iv in self.mu0_support]},
                *(
                    {
                        "layer": ell,
                        "support": [list(iv) for iv in self.mp_laws[ell - 1].support],
                        "zero_mass": self.mp_laws[ell - 1].zero_mass,
                        "mass": self.bulk_laws[ell - 1].total_mass(),
                    }
                    for ell in range(1, L + 1)
                ),
            ],
            "spikes": [t.to_json(L) for t in self.trajectories],
        }


def grid_support(law: Measure, rtol: float = 0.0) -> tuple[tuple[float, float], ...]:
    """Intervals of positive density on a bulk-law grid (atoms for discrete laws)."""
    if isinstance(law, DiscreteMeasure):
        return tuple((float(v), float(v)) for v in law.values if v > 0)
    x, f = law.x, law.density
    pos = f > rtol * (f.max() if f.size else 0.0)
    out = []
    i = 0
    while i < x.size:
        if pos[i]:
            j = i
            while j + 1 < x.size and pos[j + 1]:
                j += 1
            lo = x[i - 1] if i > 0 else x[i]
            hi = x[j + 1] if j + 1 < x.size else x[j]
            out.append((float(lo), float(hi)))
            i = j + 1
        else:
            i += 1
    return tuple(out)


@lru_cache(maxsize=32)
def standard_mp(gamma: float, M: int = DEFAULT_M, eta: float = DEFAULT_ETA) -> tuple[BulkLaw, DeformedMPLaw]:
    """Standard Marchenko-Pastur law (population delta_1) as a bulk law."""
    law = deformed_mp(gamma, DiscreteMeasure.point(1.0))
    return density_grid(law, eta=eta, M=M), law


def propagate_bulk(
    net: NetworkSpec,
    mu0: Measure,
    M: int = DEFAULT_M,
    eta: float = DEFAULT_ETA,
    mu0_support=None,
) -> DeepPrediction:
    """Limit spectral laws ``mu_1..mu_L`` of the CK matrices.

    ``mu0_support`` defaults to the positive-density region of ``mu0``.
    """
    b2 = net.b2
    nus, laws, bulks = [], [], []
    current = mu0
    for ell in range(1, net.L + 1):
        try:
            nu = affine_pushforward(current, b2, 1.0 - b2)
            law = deformed_mp(net.gammas[ell], nu)
            bulk = density_grid(law, eta=eta, M=M)
        except SolverError as exc:
            raise SolverError(f"layer {ell}: {exc}") from exc
        log.debug("layer %d support %s", ell, law.support)
        nus.append(nu)
        laws.append(law)
        bulks.append(bulk)
        current = bulk
    if mu0_support is None:
        mu0_support = grid_support(mu0)
    return DeepPrediction(net, mu0, tuple(bulks), tuple(nus), tuple(laws), tuple(mu0_support))


def phi_at(law: DeformedMPLaw, s: float) -> float:
    """``phi(s) = -s z'(s) / z(s)``."""
    zv = float(z_of_m(law, s))
    if zv == 0.0:
        raise ZeroDivisionError("z(s) = 0")
    return -s * float(z_prime(law, s)) / zv


def _in_support(x: float, support) -> bool:
    return any(a <= x <= b for a, b in support)


def propagate_spikes(
    net: NetworkSpec,
    pred: DeepPrediction,
    spikes: Sequence[tuple[int, float]] | Sequence[tuple[int, float, float, bool]],
) -> list[SpikeTrajectory]:
    """Follow each input spike through the layers.

    ``spikes`` holds ``(i, lambda_i)`` pairs, optionally extended with
    ``(base_alignment, active)`` as produced by :func:`gmm_init`.
    """
    b2 = net.b2
    lams = [float(sp[1]) for sp in spikes if (len(sp) < 4 or sp[3])]
    if len(set(lams)) != len(lams):
        raise SpecError("input spike values must be distinct")
    out = []
    for sp in spikes:
        i, lam0 = int(sp[0]), float(sp[1])
        base = float(sp[2]) if len(sp) > 2 else 1.0
        active = bool(sp[3]) if len(sp) > 3 else True
        if not active:
            out.append(SpikeTrajectory(i, lam0, base, False, ()))
            continue
        if lam0 <= 0 or _in_support(lam0, pred.mu0_support):
            raise SpecError(f"spike {i}: lambda={lam0} must be positive and outside supp(mu_0)")
        s = -1.0 / (b2 * lam0 + 1.0 - b2)
        prod = 1.0
        records = []
        for ell in range(1, net.L + 1):
            law = pred.mp_laws[ell - 1]
            try:
                zv = float(z_of_m(law, s))
                zp = float(z_prime(law, s))
            except PoleError:
                raise SolverError(f"spike {i} merged with bulk atom at layer {ell}") from None
            critical = abs(zp) <= CRITICAL_TOL
            survived = zp > CRITICAL_TOL
            phi = -s * zp / zv if zv != 0 else float("nan")
            if survived:
                prod *= phi
                s_next = -1.0 / (b2 * zv + 1.0 - b2)
            else:
                s_next = float("nan")
            records.append(
                LayerRecord(
                    layer=ell,
                    s_prev=s,
                    z_val=zv,
                    z_prime_val=zp,
                    phi_val=phi,
                    survived=survived,
                    critical=critical,
                    s_next=s_next,
                    alignment_product=prod if survived else 0.0,
                    edge_distance=law.dist_to_support(zv),
                )
            )
            if not survived:
                break
            s = s_next
        out.append(SpikeTrajectory(i, lam0, base, True, tuple(records)))
    return out


@dataclass(frozen=True)
class GmmSpike:
    index: int
    theta: float
    lambda0: float
    base_alignment: float
    above_threshold: bool

    def as_input(self) -> tuple[int, float, float, bool]:
        return (self.index, self.lambda0, self.base_alignment, self.above_threshold)


def gmm_init(thetas: Sequence[float], gamma0: float) -> list[GmmSpike]:
    """Input-Gram spikes of a rank-r signal-plus-noise matrix.

    A component with strength ``theta`` separates from the MP(gamma0) bulk
    iff ``theta > gamma0**(1/4)``.
    """
    thetas = [float(t) for t in thetas]
    if len(set(thetas)) != len(thetas):
        raise SpecError("signal strengths must be distinct")
    if any(t <= 0 for t in thetas):
        raise SpecError("signal strengths must be positive")
    out = []
    thr = gamma0 ** 0.25
    for i, th in enumerate(thetas):
        t2 = th * th
        above = th > thr
        lam = (1.0 + t2) * (gamma0 + t2) / t2
        base = 1.0 - gamma0 * (1.0 + t2) / (t2 * (t2 + gamma0))
        out.append(GmmSpike(i, th, lam, base if above else 0.0, above))
    return out


def predict_deep(
    net: NetworkSpec,
    mu0: Optional[Measure] = None,
    spikes: Optional[Sequence] = None,
    thetas: Optional[Sequence[float]] = None,
    M: int = DEFAULT_M,
    eta: float = DEFAULT_ETA,
) -> DeepPrediction:
    """Full prediction: either ``thetas`` (signal-plus-noise input, mu_0 = MP)
    or an explicit ``mu0`` with ``(i, lambda_i)`` spikes."""
    support = None
    if thetas is not None:
        mu0, mp0 = standard_mp(net.gammas[0], M, eta)
        support = mp0.support
        spikes = [g.as_input() for g in gmm_init(thetas, net.gammas[0])]
    if mu0 is None:
        raise SpecError("either thetas or mu0 must be given")
    pred = propagate_bulk(net, mu0, M=M, eta=eta, mu0_support=support)
    return replace(pred, trajectories=tuple(propagate_spikes(net, pred, spikes or [])))
