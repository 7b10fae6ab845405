"""Gaussian analysis of activations: normalization, b_sigma, Hermite terms."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import special

DEFAULT_ORDER = 200
SQRT2 = np.sqrt(2.0)


class ActivationError(ValueError):
    pass


@lru_cache(maxsize=16)
def _nodes(order: int) -> tuple[np.ndarray, np.ndarray]:
    # physicists' rule for exp(-x^2), rescaled to the standard normal
    x, w = np.polynomial.hermite.hermgauss(order)
    return x * SQRT2, w / np.sqrt(np.pi)


def gauss_hermite_expect(f: Callable[[np.ndarray], np.ndarray], order: int = DEFAULT_ORDER) -> float:
    """E[f(xi)] for xi ~ N(0, 1) by Gauss-Hermite quadrature."""
    if order < 2:
        raise ValueError("quadrature order must be at least 2")
    x, w = _nodes(order)
    vals = np.asarray(f(x), dtype=float)
    if vals.shape != x.shape:
        vals = np.broadcast_to(vals, x.shape)
    if not np.all(np.isfinite(vals)):
        raise ValueError("integrand is not finite on the quadrature nodes")
    return float(np.dot(w, vals))


@dataclass(frozen=True)
class RawActivation:
    name: str
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    d2f: Callable[[np.ndarray], np.ndarray]
    lipschitz: float  # bound on |f'| and |f''|


def _sigmoid(x):
    return special.expit(x)


CATALOG: dict[str, RawActivation] = {
    "identity": RawActivation(
        "identity", lambda x: np.asarray(x, float), np.ones_like, np.zeros_like, 1.0
    ),
    "tanh": RawActivation(
        "tanh",
        np.tanh,
        lambda x: 1.0 - np.tanh(x) ** 2,
        lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2),
        1.0,
    ),
    "arctan": RawActivation(
        "arctan",
        np.arctan,
        lambda x: 1.0 / (1.0 + x**2),
        lambda x: -2.0 * x / (1.0 + x**2) ** 2,
        1.0,
    ),
    "erf": RawActivation(
        "erf",
        special.erf,
        lambda x: 2.0 / np.sqrt(np.pi) * np.exp(-(x**2)),
        lambda x: -4.0 * x / np.sqrt(np.pi) * np.exp(-(x**2)),
        2.0 / np.sqrt(np.pi),
    ),
    # shift and scale are applied by normalize(); E[softplus''] != 0 stays flagged
    "softplus": RawActivation(
        "softplus",
        lambda x: np.logaddexp(0.0, x),
        _sigmoid,
        lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)),
        1.0,
    ),
}


@dataclass(frozen=True)
class NormalizedActivation:
    """``sigma(x) = (raw(x) - shift) / scale`` with E sigma = 0, E sigma^2 = 1."""

    base: RawActivation
    shift: float
    scale: float
    b_sigma: float
    zeta2: float
    lambda_bound: float
    second_moment: float  # E[sigma''(xi)]
    order: int = DEFAULT_ORDER

    @property
    def name(self) -> str:
        return self.base.name

    def __call__(self, x):
        return (self.base.f(x) - self.shift) / self.scale

    def derivative(self, x):
        return self.base.df(x) / self.scale

    def second_derivative(self, x):
        return self.base.d2f(x) / self.scale

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "c0": self.shift,
            "c1": self.scale,
            "b_sigma": self.b_sigma,
            "zeta2": self.zeta2,
            "E_sigma_second": self.second_moment,
        }


def normalize(raw: RawActivation | str, order: int = DEFAULT_ORDER) -> NormalizedActivation:
    """Center and scale ``raw`` under N(0, 1) and compute its Gaussian constants."""
    if isinstance(raw, str):
        raw = get_raw(raw)
    c0 = gauss_hermite_expect(raw.f, order)
    var = gauss_hermite_expect(lambda x: (raw.f(x) - c0) ** 2, order)
    if var <= 1e-12:
        raise ActivationError(f"degenerate activation {raw.name!r}: variance {var:.3e}")
    c1 = float(np.sqrt(var))
    b = gauss_hermite_expect(raw.df, order) / c1
    e2 = gauss_hermite_expect(raw.d2f, order) / c1
    h2 = lambda x: (x**2 - 1.0) / SQRT2
    zeta2 = gauss_hermite_expect(lambda x: (raw.f(x) - c0) / c1 * h2(x), order)
    return NormalizedActivation(
        base=raw,
        shift=c0,
        scale=c1,
        b_sigma=b,
        zeta2=zeta2,
        lambda_bound=raw.lipschitz / c1,
        second_moment=e2,
        order=order,
    )


def validate_assumption(act: NormalizedActivation, tol: float = 1e-8) -> list[str]:
    """Violations of b_sigma != 0 and E[sigma''] = 0 (empty list if none)."""
    problems = []
    if not abs(act.b_sigma) > tol:
        problems.append(f"b_sigma = {act.b_sigma:.3e} vanishes: linear component is degenerate")
    if not abs(act.second_moment) < tol:
        problems.append(f"E[sigma''] = {act.second_moment:.3e} is nonzero")
    return problems


def get_raw(name: str) -> RawActivation:
    try:
        return CATALOG[name]
    except KeyError:
        raise ActivationError(
            f"unknown activation {name!r}; valid names: {', '.join(sorted(CATALOG))}"
        ) from None


def get_activation(name: str, order: int = DEFAULT_ORDER) -> NormalizedActivation:
    return normalize(get_raw(name), order)
