"""Spectral measures on [0, inf): discrete atoms and density-grid bulk laws."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

MERGE_RTOL = 1e-12
MASS_TOL = 1e-12


class MeasureError(ValueError):
    pass


def _merge_atoms(values: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(values, kind="stable")
    values, weights = values[order], weights[order]
    if values.size <= 1:
        return values, weights
    scale = np.maximum(np.abs(values[1:]), np.abs(values[:-1]))
    new_group = np.diff(values) > MERGE_RTOL * np.maximum(scale, 1.0)
    group = np.concatenate([[0], np.cumsum(new_group)])
    merged_w = np.bincount(group, weights=weights)
    # weighted mean keeps the first moment of merged atoms
    merged_v = np.bincount(group, weights=weights * values) / merged_w
    return merged_v, merged_w


def _renormalize(w: np.ndarray) -> np.ndarray:
    # leave weights that already sum to 1 up to rounding untouched, so
    # serialization round trips are bit-exact
    total = w.sum()
    if abs(total - 1.0) <= 4 * np.finfo(float).eps * w.size:
        return w
    return w / total


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability measure made of finitely many weighted atoms on [0, inf).

    Atoms are sorted, coincident values are merged and the weights are
    renormalized after validation.
    """

    values: np.ndarray
    weights: np.ndarray

    def __init__(self, values, weights=None, *, normalize: bool = False):
        v = np.atleast_1d(np.asarray(values, dtype=float)).ravel()
        if weights is None:
            w = np.full(v.shape, 1.0 / max(v.size, 1))
        else:
            w = np.atleast_1d(np.asarray(weights, dtype=float)).ravel()
        if v.size == 0 or v.shape != w.shape:
            raise MeasureError("atoms and weights must be non-empty and of equal length")
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(w)):
            raise MeasureError("atoms must be finite")
        if np.any(v < 0):
            raise MeasureError("measure leaves [0,inf)")
        if np.any(w <= 0):
            raise MeasureError("weights must be positive")
        total = w.sum()
        if normalize:
            w = _renormalize(w)
        elif abs(total - 1.0) > MASS_TOL * max(1, v.size):
            raise MeasureError(f"weights sum to {total!r}, not 1")
        v, w = _merge_atoms(v, w)
        w = _renormalize(w)
        v.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point(cls, value: float) -> "DiscreteMeasure":
        return cls([value], [1.0])

    @classmethod
    def from_eigenvalues(cls, eigenvalues) -> "DiscreteMeasure":
        """Empirical spectral measure; tiny negative round-off is clipped to 0."""
        ev = np.asarray(eigenvalues, dtype=float)
        return cls(np.clip(ev, 0.0, None), normalize=True)

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.values.tolist(), self.weights.tolist()))

    def __len__(self) -> int:
        return self.values.size

    def moment(self, k: int) -> float:
        return float(np.dot(self.weights, self.values**k))

    def mass_at_zero(self) -> float:
        return float(self.weights[self.values == 0.0].sum())

    def cdf(self, x) -> np.ndarray:
        cw = np.concatenate([[0.0], np.cumsum(self.weights)])
        return cw[np.searchsorted(self.values, x, side="right")]

    def to_json(self) -> dict:
        return {"atoms": [[float(v), float(w)] for v, w in zip(self.values, self.weights)]}

    @classmethod
    def from_json(cls, data: dict) -> "DiscreteMeasure":
        atoms = np.asarray(data["atoms"], dtype=float).reshape(-1, 2)
        return cls(atoms[:, 0], atoms[:, 1], normalize=True)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscreteMeasure):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(self.weights, other.weights)

    def __hash__(self) -> int:
        return hash((self.values.tobytes(), self.weights.tobytes()))


@dataclass(frozen=True)
class BulkLaw:
    """Absolutely continuous law on a grid plus an explicit point mass at 0.

    ``discretization`` is the equal-mass atom approximation used as the
    population measure of the next layer; it always carries the zero atom.
    """

    zero_mass: float
    x: np.ndarray
    density: np.ndarray
    discretization: DiscreteMeasure = field(compare=False)

    @property
    def density_grid(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.density.tolist()))

    def continuous_mass(self) -> float:
        return float(np.trapezoid(self.density, self.x)) if self.x.size > 1 else 0.0

    def total_mass(self) -> float:
        return self.zero_mass + self.continuous_mass()

    def moment(self, k: int) -> float:
        if self.x.size < 2:
            return 0.0
        return float(np.trapezoid(self.density * self.x**k, self.x))

    def to_json(self) -> dict:
        return {
            "zero_mass": float(self.zero_mass),
            "grid": [[float(a), float(b)] for a, b in zip(self.x, self.density)],
        }

    @classmethod
    def from_json(cls, data: dict, M: int = 2000) -> "BulkLaw":
        grid = np.asarray(data["grid"], dtype=float).reshape(-1, 2)
        return make_bulk_law(grid[:, 0], grid[:, 1], float(data["zero_mass"]), M=M)


Measure = Union[DiscreteMeasure, BulkLaw]


def make_bulk_law(x, density, zero_mass: float = 0.0, M: int = 2000) -> BulkLaw:
    x = np.asarray(x, dtype=float)
    f = np.asarray(density, dtype=float)
    if x.shape != f.shape or x.ndim != 1:
        raise MeasureError("grid and density must be 1-d arrays of equal length")
    if x.size > 1 and np.any(np.diff(x) < 0):
        raise MeasureError("grid must be sorted")
    if np.any(f < 0):
        raise MeasureError("density must be non-negative")
    if not 0.0 <= zero_mass <= 1.0:
        raise MeasureError("zero_mass must lie in [0, 1]")
    x.setflags(write=False)
    f.setflags(write=False)
    law = BulkLaw(zero_mass, x, f, DiscreteMeasure.point(0.0))
    object.__setattr__(law, "discretization", quantile_discretize(law, M))
    return law


def as_discrete(mu: Measure) -> DiscreteMeasure:
    return mu.discretization if isinstance(mu, BulkLaw) else mu


def affine_pushforward(mu: Measure, a2: float, b: float) -> DiscreteMeasure:
    """Law of ``a2 * x + b`` for ``x ~ mu`` (bulk laws use their discretization)."""
    mu = as_discrete(mu)
    if a2 < 0:
        raise MeasureError("scale must be non-negative")
    out = a2 * mu.values + b
    if np.any(out < -1e-14 * max(1.0, abs(b))):
        raise MeasureError("measure leaves [0,inf)")
    return DiscreteMeasure(np.clip(out, 0.0, None), mu.weights.copy(), normalize=True)


@dataclass(frozen=True)
class CompanionTransform:
    """Companion gamma*mu + (1-gamma)*delta_0 kept at the transform level.

    Used when gamma > 1, where the mixture is a signed measure.
    """

    base: DiscreteMeasure
    gamma: float

    def stieltjes(self, z) -> complex:
        z = np.asarray(z, dtype=complex)
        return self.gamma * stieltjes_discrete(self.base, z) + (1.0 - self.gamma) * (-1.0 / z)


def companion(mu: Measure, gamma: float):
    """Companion measure ``gamma * mu + (1 - gamma) * delta_0``.

    For ``gamma > 1`` a :class:`CompanionTransform` is returned instead.
    """
    if not gamma > 0:
        raise MeasureError("gamma must be positive")
    if gamma == 1.0:
        return mu
    if gamma > 1.0:
        return CompanionTransform(as_discrete(mu), float(gamma))
    if isinstance(mu, BulkLaw):
        zm = gamma * mu.zero_mass + (1.0 - gamma)
        M = int(np.count_nonzero(mu.discretization.values))
        return make_bulk_law(mu.x, gamma * mu.density, zm, M=max(16, M))
    values = np.concatenate([[0.0], mu.values])
    weights = np.concatenate([[1.0 - gamma], gamma * mu.weights])
    return DiscreteMeasure(values, weights, normalize=True)


def stieltjes_discrete(mu: DiscreteMeasure, z):
    """``sum_j w_j / (x_j - z)``; raises if ``z`` hits an atom."""
    z_arr = np.asarray(z, dtype=complex)
    diff = mu.values[None, :] - z_arr.reshape(-1, 1)
    if np.any(diff == 0):
        raise MeasureError("pole: z coincides with an atom")
    out = (mu.weights[None, :] / diff).sum(axis=1)
    return out.reshape(z_arr.shape) if z_arr.ndim else complex(out[0])


def quantile_discretize(law: BulkLaw, M: int) -> DiscreteMeasure:
    """Equal-mass discretization of the continuous part into ``M`` atoms.

    Each atom sits at the conditional mean of its slice, so the first moment
    is preserved slice by slice. The zero atom carries ``law.zero_mass``.
    """
    if M < 16:
        raise MeasureError("need at least 16 atoms")
    x, f = np.asarray(law.x), np.asarray(law.density)
    cont = 1.0 - law.zero_mass
    grid_mass = law.continuous_mass()
    if cont <= 1e-14 or grid_mass <= 1e-14:
        return DiscreteMeasure.point(0.0)
    # cumulative mass along the grid (trapezoid per cell)
    F = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(x))])
    F = F / F[-1]
    keep = np.concatenate([[True], np.diff(F) > 0])
    F, xq = F[keep], x[keep]
    # slice means integrate the piecewise-linear quantile function exactly
    H = np.concatenate([[0.0], np.cumsum(np.diff(F) * 0.5 * (xq[1:] + xq[:-1]))])
    edges = np.linspace(0.0, 1.0, M + 1)
    k = np.clip(np.searchsorted(F, edges, side="right") - 1, 0, F.size - 2)
    Qe = np.interp(edges, F, xq)
    He = H[k] + (edges - F[k]) * 0.5 * (xq[k] + Qe)
    means = np.diff(He) * M
    values = np.clip(means, 0.0, None)
    weights = np.full(M, cont / M)
    if law.zero_mass > 0:
        values = np.concatenate([[0.0], values])
        weights = np.concatenate([[law.zero_mass], weights])
    return DiscreteMeasure(values, weights, normalize=True)
