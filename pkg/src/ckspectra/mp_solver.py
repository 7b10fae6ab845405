"""Deformed Marchenko-Pastur law for a discrete population measure.

For aspect ratio ``gamma`` and population law ``nu`` the companion Stieltjes
transform ``m~`` has the explicit inverse

    z(m) = -1/m + gamma * sum_j w_j * lam_j / (1 + lam_j * m),

and the real line outside the companion support is exactly the image of
``{m : z'(m) > 0}``. Support detection works on that characterization;
complex evaluation solves ``z(m~) = z`` by Newton continuation in Im z.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from ckspectra.measures import (
    BulkLaw,
    DiscreteMeasure,
    MeasureError,
    make_bulk_law,
)

log = logging.getLogger(__name__)

PROBES_PER_INTERVAL = 64
TAIL_PROBES = 400
NEAR_ATOMS = 4
MERGE_GAP = 1e-6
MAX_ITER = 10_000
_CHUNK = 4_000_000
LEVEL_RATIO = 8.0
COARSE_STRIDE = 8


class SolverError(RuntimeError):
    pass


class PoleError(SolverError, MeasureError):
    pass


@dataclass(frozen=True)
class StieltjesPoint:
    z: complex
    m: complex
    m_tilde: complex


@dataclass(frozen=True)
class DeformedMPLaw:
    """``rho_MP(gamma) [x] nu`` with its support and pole set cached.

    ``support`` lists the closed intervals of the continuous part of ``mu``;
    a point mass of size ``zero_mass`` at 0 is tracked separately.
    ``gaps`` holds, for each real gap of the companion support, the
    ``m``-interval on which ``z`` is increasing and the image interval.
    """

    gamma: float
    nu: DiscreteMeasure
    support: tuple[tuple[float, float], ...]
    zero_mass: float
    gaps: tuple[tuple[float, float, float, float], ...]

    @property
    def pole_set(self) -> np.ndarray:
        lam = self.nu.values[self.nu.values > 0]
        return np.concatenate([[0.0], np.sort(-1.0 / lam)])

    @property
    def upper_edge(self) -> float:
        return self.support[-1][1] if self.support else 0.0

    def in_support(self, x: float, tol: float = 0.0) -> bool:
        return any(a - tol <= x <= b + tol for a, b in self.support)

    def dist_to_support(self, x: float) -> float:
        """Distance from ``x`` to ``supp(mu) U {0}``."""
        d = abs(x)
        for a, b in self.support:
            d = min(d, 0.0 if a <= x <= b else min(abs(x - a), abs(x - b)))
        return d

    def to_json(self) -> dict:
        return {
            "gamma": self.gamma,
            "support": [list(iv) for iv in self.support],
            "zero_mass": self.zero_mass,
        }


def _atoms(nu: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    pos = nu.values > 0
    return nu.values[pos], nu.weights[pos]


def _eval(nu: DiscreteMeasure, gamma: float, m, order: int):
    """z (order 0), z' (order 1) or both (order 2) on an array of m."""
    lam, w = _atoms(nu)
    wl, wl2 = w * lam, w * lam**2
    m = np.asarray(m)
    flat = m.reshape(-1)
    dtype = np.result_type(flat.dtype, float)
    z = np.empty(flat.shape, dtype=dtype)
    zp = np.empty(flat.shape, dtype=dtype)
    step = max(1, _CHUNK // max(lam.size, 1))
    # probes that round onto a pole give inf; callers screen poles themselves
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for i in range(0, flat.size, step):
            mm = flat[i:i + step]
            inv = 1.0 / (1.0 + mm[:, None] * lam[None, :])
            if order != 1:
                z[i:i + step] = -1.0 / mm + gamma * (inv @ wl)
            if order != 0:
                zp[i:i + step] = 1.0 / mm**2 - gamma * ((inv * inv) @ wl2)
    if order == 0:
        return z.reshape(m.shape)
    if order == 1:
        return zp.reshape(m.shape)
    return z.reshape(m.shape), zp.reshape(m.shape)


def _check_poles(law_or_nu, m) -> None:
    nu = law_or_nu.nu if isinstance(law_or_nu, DeformedMPLaw) else law_or_nu
    lam, _ = _atoms(nu)
    m = np.asarray(m)
    if np.any(m == 0) or np.any(1.0 + np.multiply.outer(m, lam) == 0):
        raise PoleError("m lies in the pole set")


def z_of_m(law: DeformedMPLaw, m):
    """Formal inverse ``z(m) = -1/m + gamma * int lam / (1 + lam m) dnu``."""
    _check_poles(law, m)
    out = _eval(law.nu, law.gamma, m, 0)
    return out[()] if np.ndim(out) == 0 else out


def z_prime(law: DeformedMPLaw, m):
    """``z'(m) = 1/m^2 - gamma * int lam^2 / (1 + lam m)^2 dnu``."""
    _check_poles(law, m)
    out = _eval(law.nu, law.gamma, m, 1)
    return out[()] if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# support


def _increasing_pieces(nu, gamma):
    """All maximal m-intervals on which z' > 0, with their z-images."""
    lam, _ = _atoms(nu)
    poles = np.sort(-1.0 / lam) if lam.size else np.empty(0)
    scale = 1.0 / lam.max() if lam.size else 1.0
    zp = lambda m: _eval(nu, gamma, m, 1)
    zf = lambda m: float(_eval(nu, gamma, np.array([m]), 0)[0])

    # bounded inter-pole intervals, probed with points clustered at the ends
    t = (1.0 - np.cos(np.pi * np.linspace(0.0, 1.0, PROBES_PER_INTERVAL + 2)[1:-1])) / 2.0
    # z' changes sign within O(sqrt(gamma)) of a pole when gamma is tiny
    near_end = np.logspace(-12, -3.5, 12)
    t = np.unique(np.concatenate([near_end, t, 1.0 - near_end]))
    bounds = list(zip(poles[:-1], poles[1:]))
    if poles.size:
        bounds.append((poles[-1], 0.0))
    pieces = []
    if bounds:
        B = np.asarray(bounds)
        P = B[:, :1] + (B[:, 1:] - B[:, :1]) * t[None, :]
        # every atom term of z' is <= 0, so keeping only the nearest atoms
        # bounds z' from above; intervals with a negative bound are skipped
        lam_s, w_s = lam[np.argsort(-1.0 / lam)], _atoms(nu)[1][np.argsort(-1.0 / lam)]
        near = np.arange(B.shape[0])[:, None] + np.arange(-NEAR_ATOMS + 1, NEAR_ATOMS + 1)[None, :]
        near = np.clip(near, 0, lam.size - 1)
        ln, wn = lam_s[near], w_s[near]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            bound = 1.0 / P**2 - gamma * np.einsum(
                "ik,ijk->ij", wn * ln**2, 1.0 / (1.0 + ln[:, None, :] * P[:, :, None]) ** 2
            )
        cand = np.nonzero((bound > 0).any(axis=1))[0]
        if cand.size:
            V = zp(P[cand])
            for i, vals in zip(cand, V):
                if np.any(vals > 0):
                    pieces.extend(_pieces_in(B[i, 0], B[i, 1], P[i], vals, zp))
    # unbounded tails, probed on a log scale
    u = scale * np.logspace(-12, 12, TAIL_PROBES)
    left_anchor = poles[0] if poles.size else 0.0
    left = left_anchor - u[::-1]
    pieces.extend(_pieces_in(-np.inf, left_anchor, left, zp(left), zp))
    right = u
    pieces.extend(_pieces_in(0.0, np.inf, right, zp(right), zp))

    out = []
    for a, b in pieces:
        za = 0.0 if np.isinf(a) else (-np.inf if a == 0.0 else zf(a))
        zb = 0.0 if np.isinf(b) else (np.inf if b == 0.0 else zf(b))
        if zb > za:
            out.append((a, b, za, zb))
    return out


def _pieces_in(a, b, probes, vals, zp):
    roots = []
    for k in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]:
        lo, hi = probes[k], probes[k + 1]
        roots.append(brentq(lambda t: float(zp(np.array([t]))[0]), lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500))
    cuts = [a, *roots, b]
    pieces = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        # sign on the piece from the probe nearest its middle
        inside = probes[(probes > lo) & (probes < hi)]
        if inside.size == 0:
            continue
        if vals[np.searchsorted(probes, inside[inside.size // 2])] > 0:
            pieces.append((lo, hi))
    return pieces


def compute_support(nu: DiscreteMeasure, gamma: float):
    """Support intervals of ``rho_MP(gamma) [x] nu`` (continuous part).

    Returns ``(intervals, gaps)``; see :class:`DeformedMPLaw`.
    """
    if not gamma > 0:
        raise MeasureError("gamma must be positive")
    lam, _ = _atoms(nu)
    if lam.size == 0:
        return (), ()
    try:
        gaps = _increasing_pieces(nu, gamma)
    except ValueError as exc:  # brentq bracketing
        raise SolverError(f"support search failed to bracket: {exc}; atoms={nu.values[:8]}...") from exc
    gaps.sort(key=lambda g: g[2])
    edges = []
    cursor = -np.inf
    for _, _, za, zb in gaps:
        if za > cursor:
            edges.append((cursor, za))
        cursor = max(cursor, zb)
    if cursor < np.inf:
        raise SolverError("support search found no right tail gap")
    intervals = []
    for a, b in edges:
        if np.isinf(a):
            continue
        a = max(a, 0.0)
        if b - a <= 0:
            continue
        if intervals and a - intervals[-1][1] < MERGE_GAP:
            intervals[-1] = (intervals[-1][0], b)
        else:
            intervals.append((a, b))
    # isolated {0} (degenerate interval) is reported through zero_mass only
    intervals = [iv for iv in intervals if iv[1] - iv[0] > 1e-12]
    return tuple((float(a), float(b)) for a, b in intervals), tuple(gaps)


def deformed_mp(gamma: float, nu: DiscreteMeasure) -> DeformedMPLaw:
    """Build the law ``rho_MP(gamma) [x] nu`` and cache its support."""
    support, gaps = compute_support(nu, gamma)
    zero_mass = max(0.0, 1.0 - 1.0 / gamma, nu.mass_at_zero())
    return DeformedMPLaw(float(gamma), nu, support, float(zero_mass), gaps)


def check_bijection(law: DeformedMPLaw, n_probe: int = 50, seed: int = 0) -> list[str]:
    """Spot-check that z' > 0 exactly off the support.

    Draws ``n_probe`` points in each gap and returns a list of failures.
    """
    rng = np.random.default_rng(seed)
    problems = []
    for ma, mb, za, zb in law.gaps:
        lo = ma if np.isfinite(ma) else mb - 1e3 * (abs(mb) + 1)
        hi = mb if np.isfinite(mb) else ma + 1e3 * (abs(ma) + 1)
        ms = rng.uniform(lo, hi, n_probe)
        ms = ms[(ms != 0)]
        zs = z_of_m(law, ms)
        if np.any(z_prime(law, ms) <= 0):
            problems.append(f"z' <= 0 inside gap ({za}, {zb})")
        for x in zs:
            if law.in_support(x, tol=-1e-9):
                problems.append(f"z={x} maps into the support")
    return problems


# --------------------------------------------------------------------------
# Stieltjes transform


def _fixed_point(law: DeformedMPLaw, z: np.ndarray, damping: float = 0.5, tol: float = 1e-12):
    """Damped iteration of the first Marchenko-Pastur equation for m(z)."""
    lam, w = law.nu.values, law.nu.weights
    g = law.gamma
    m = -1.0 / z
    res = np.inf
    for _ in range(MAX_ITER):
        denom = lam[None, :] * (1.0 - g - g * z[:, None] * m[:, None]) - z[:, None]
        new = (w / denom).sum(axis=1)
        res = np.max(np.abs(new - m))
        m = damping * new + (1.0 - damping) * m
        if res < tol:
            return m
    raise SolverError(f"fixed point did not converge, last residual {res:.3e}")


def _newton_upper(law: DeformedMPLaw, z: np.ndarray, mt: np.ndarray, tol: float, max_iter: int = 80):
    """Newton on z(m~) = z keeping Im m~ > 0; returns (m~, residual).

    One fused z/z' evaluation per iteration; a step that increases the
    residual is pulled back halfway towards the previous iterate.
    """
    mt = mt.copy()
    prev = mt.copy()
    prev_res = np.full(z.shape, np.inf)
    res = np.full(z.shape, np.inf)
    scale = 1.0 + np.abs(z)
    active = np.ones(z.shape, bool)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        zv, fp = _eval(law.nu, law.gamma, mt[idx], 2)
        f = zv - z[idx]
        r = np.abs(f)
        worse = r > prev_res[idx]
        if worse.any():
            w_idx = idx[worse]
            mt[w_idx] = 0.5 * (mt[w_idx] + prev[w_idx])
            res[w_idx] = np.inf
        ok = ~worse
        idx, f, fp, r = idx[ok], f[ok], fp[ok], r[ok]
        res[idx] = r
        done = r <= tol * scale[idx]
        active[idx[done]] = False
        idx, f, fp, r = idx[~done], f[~done], fp[~done], r[~done]
        if idx.size == 0:
            continue
        step = f / fp
        cand = mt[idx] - step
        t = np.ones(idx.size)
        for _ in range(60):
            bad = (cand.imag <= 0) | ~np.isfinite(cand)
            if not bad.any():
                break
            # Im m~ > 0 is the physical branch; backtrack otherwise
            t[bad] *= 0.5
            cand[bad] = mt[idx][bad] - t[bad] * step[bad]
        prev[idx] = mt[idx]
        prev_res[idx] = r
        mt[idx] = cand
    if active.any():
        idx = np.nonzero(active)[0]
        res[idx] = np.abs(_eval(law.nu, law.gamma, mt[idx], 0) - z[idx])
    return mt, res


def _continuation(law: DeformedMPLaw, z: np.ndarray, tol: float) -> np.ndarray:
    """Fixed point at a large imaginary part, then Newton down a geometric ladder in Im z."""
    span = max(law.upper_edge, float(law.nu.values.max()), 1.0)
    eta_top = np.maximum(z.imag, 2.0 * span)
    levels = int(np.ceil(np.log(eta_top.max() / z.imag.min()) / np.log(LEVEL_RATIO)))
    z0 = z.real + 1j * eta_top
    m0 = _fixed_point(law, z0, tol=1e-6)
    mt = law.gamma * m0 + (1.0 - law.gamma) * (-1.0 / z0)
    # intermediate levels only seed the next one
    mt, _ = _newton_upper(law, z0, mt, 1e-7)
    for k in range(1, levels):
        eta = np.maximum(z.imag, eta_top / LEVEL_RATIO**k)
        mt, _ = _newton_upper(law, z.real + 1j * eta, mt, 1e-7)
    mt, res = _newton_upper(law, z, mt, tol)
    if np.any(res > 1e-8 * (1 + np.abs(z))):
        raise SolverError(f"Newton continuation did not converge, residual {res.max():.3e}")
    return mt


def solve_upper(law: DeformedMPLaw, z, tol: float = 1e-12) -> np.ndarray:
    """Companion transform ``m~(z)`` for an array of ``z`` with Im z > 0.

    Long arrays sorted by real part are solved coarse-to-fine: the Im z
    continuation runs on every ``COARSE_STRIDE``-th point and the rest start
    Newton from interpolated values. The root in the upper half-plane is
    unique, so any point that converges is the right one; stragglers get the
    full continuation.
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    if np.any(z.imag <= 0):
        raise ValueError("solve_upper needs Im z > 0")
    if z.size < 8 * COARSE_STRIDE or np.any(np.diff(z.real) < 0):
        return _continuation(law, z, tol)
    idx = np.unique(np.r_[np.arange(0, z.size, COARSE_STRIDE), z.size - 1])
    coarse = _continuation(law, z[idx], tol)
    pos = np.arange(z.size)
    guess = np.interp(pos, idx, coarse.real) + 1j * np.interp(pos, idx, coarse.imag)
    guess[idx] = coarse
    mt, res = _newton_upper(law, z, guess, tol, max_iter=12)
    bad = ~(res <= tol * (1 + np.abs(z)))
    if bad.any():
        mt[bad] = _continuation(law, z[bad], tol)
    return mt


def _solve_real(law: DeformedMPLaw, x: float) -> float:
    for ma, mb, za, zb in law.gaps:
        if za < x < zb:
            lo, hi = ma, mb
            # finite brackets for unbounded ends
            if np.isinf(lo):
                hi_ = hi if np.isfinite(hi) else -1.0
                lo = hi_ - 1.0
                while float(z_of_m(law, lo)) >= x:
                    lo = hi_ - 2.0 * (hi_ - lo)
            if np.isinf(hi):
                hi = max(lo, 0.0) + 1.0
                while float(z_of_m(law, hi)) <= x:
                    hi = 2.0 * hi
            eps = 1e-15 * max(abs(lo), abs(hi), 1.0)
            lo_e, hi_e = lo + eps, hi - eps
            if lo_e == 0:
                lo_e = eps
            if hi_e == 0:
                hi_e = -eps
            g = lambda m: float(z_of_m(law, m)) - x
            # z is increasing on the branch, so a failed bracket means x sits
            # within rounding of that end's value
            if not g(lo_e) < 0:
                return lo_e
            if not g(hi_e) > 0:
                return hi_e
            return brentq(g, lo_e, hi_e, xtol=1e-15, rtol=1e-15, maxiter=500)
    raise SolverError(f"x={x} is not off the support")


def stieltjes_mp(law: DeformedMPLaw, z) -> StieltjesPoint:
    """Solve the Marchenko-Pastur equations at one point.

    ``z`` may be complex with Im z > 0 (or < 0, by conjugate symmetry), or
    real and off ``supp(mu) U {0}``; real points are resolved through the
    bijection ``m~ <-> z`` on the increasing branches of ``z(m)``.
    """
    z = complex(z)
    g = law.gamma
    if z.imag < 0:
        p = stieltjes_mp(law, z.conjugate())
        return StieltjesPoint(z, p.m.conjugate(), p.m_tilde.conjugate())
    if z.imag == 0:
        x = z.real
        if x == 0 or law.in_support(x):
            raise SolverError(f"real z={x} lies on the support")
        mt = _solve_real(law, x)
        if not float(z_prime(law, mt)) > 0:
            raise SolverError("real solution is not on an increasing branch")
        m = (mt - (1.0 - g) * (-1.0 / x)) / g
        return StieltjesPoint(z, complex(m), complex(mt))
    mt = complex(solve_upper(law, np.array([z]))[0])
    m = (mt - (1.0 - g) * (-1.0 / z)) / g
    return StieltjesPoint(z, m, mt)


def mp_residuals(law: DeformedMPLaw, p: StieltjesPoint) -> tuple[float, float]:
    """Residuals of both Marchenko-Pastur equations at a solved point."""
    lam, w, g = law.nu.values, law.nu.weights, law.gamma
    r1 = p.m - np.sum(w / (lam * (1.0 - g - g * p.z * p.m) - p.z))
    r2 = p.z - complex(_eval(law.nu, g, np.array([p.m_tilde]), 0)[0])
    return abs(r1), abs(r2)


# --------------------------------------------------------------------------
# density


def support_grid(law: DeformedMPLaw, points_per_interval: int = 801) -> np.ndarray:
    """Chebyshev-Lobatto points on each support interval, edges included.

    An interval starting at 0 (hard edge, density ~ x^{-1/2}) gets a
    quadratic map so the first cell carries negligible mass.
    """
    t = (1.0 - np.cos(np.pi * np.linspace(0.0, 1.0, points_per_interval))) / 2.0
    parts = []
    for a, b in law.support:
        if a <= 1e-9 * b:
            parts.append(a + (b - a) * t**2)
        else:
            parts.append(a + (b - a) * t)
    return np.concatenate(parts) if parts else np.zeros(0)


def density_at(law: DeformedMPLaw, xs, eta: float = 1e-5) -> np.ndarray:
    """Density of the continuous part of ``mu`` at real ``xs``.

    Stieltjes inversion at ``x + i eta`` and ``x + i eta/2`` with one
    Richardson step; the known atom at 0 is subtracted and points off the
    support are set to zero.
    """
    if not 0 < eta <= 1e-2:
        raise ValueError("eta must lie in (0, 1e-2]")
    xs = np.asarray(xs, dtype=float)
    f = np.zeros(xs.shape)
    inside = np.array([law.in_support(x, tol=2 * eta) for x in xs], dtype=bool)
    inside &= xs > 0
    if not inside.any() or not law.support:
        return f
    x = xs[inside]
    g = law.gamma

    def im_m(z, mt):
        m = (mt - (1.0 - g) * (-1.0 / z)) / g
        e = z.imag
        return (m.imag - law.zero_mass * e / (x**2 + e**2)) / np.pi

    # near a hard edge at 0 the smoothing scale must shrink with x
    eta_x = np.minimum(eta, 1e-3 * x)
    z1 = x + 1j * eta_x
    mt1 = solve_upper(law, z1)
    z2 = x + 0.5j * eta_x
    mt2, res = _newton_upper(law, z2, mt1, 1e-12)
    if np.any(res > 1e-8 * (1 + np.abs(z2))):
        raise SolverError(f"density refinement did not converge, residual {res.max():.3e}")
    vals = 2.0 * im_m(z2, mt2) - im_m(z1, mt1)
    f[inside] = np.clip(vals, 0.0, None)
    on = np.array([law.in_support(v) for v in xs])
    f[~on] = 0.0
    # soft edges carry zero density; smoothing would otherwise leak mass across gaps
    edges = np.array([e for iv in law.support for e in iv if e > 0])
    if edges.size:
        f[np.isin(xs, edges)] = 0.0
    return f


def density_grid(law: DeformedMPLaw, xs=None, eta: float = 1e-5, M: int = 2000) -> BulkLaw:
    """Reconstruct ``mu`` on a grid as a :class:`BulkLaw` (with discretization)."""
    if xs is None:
        xs = support_grid(law)
    xs = np.asarray(xs, dtype=float)
    if xs.size > 1 and np.any(np.diff(xs) < 0):
        raise ValueError("xs must be sorted")
    f = density_at(law, xs, eta)
    return make_bulk_law(xs, f, law.zero_mass, M=M)
