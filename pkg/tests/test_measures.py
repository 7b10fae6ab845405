import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckspectra.measures import (
    BulkLaw,
    CompanionTransform,
    DiscreteMeasure,
    MeasureError,
    affine_pushforward,
    companion,
    make_bulk_law,
    quantile_discretize,
    stieltjes_discrete,
)

import oracles


def mp_bulk(gamma, n=4001, M=2000):
    lo, hi = oracles.mp_edges(gamma)
    t = (1 - np.cos(np.linspace(0, np.pi, n))) / 2
    x = lo + (hi - lo) * t
    return make_bulk_law(x, oracles.mp_density(x, gamma), M=M)


atoms_strategy = st.lists(
    st.tuples(st.floats(0.0, 50.0), st.floats(0.01, 10.0)), min_size=1, max_size=12
)


def _measure(pairs):
    v, w = zip(*pairs)
    return DiscreteMeasure(v, w, normalize=True)


# ----- DiscreteMeasure


def test_validation_errors():
    with pytest.raises(MeasureError):
        DiscreteMeasure([])
    with pytest.raises(MeasureError):
        DiscreteMeasure([1.0, -0.5], [0.5, 0.5])
    with pytest.raises(MeasureError):
        DiscreteMeasure([1.0, np.nan], [0.5, 0.5])
    with pytest.raises(MeasureError):
        DiscreteMeasure([1.0, 2.0], [0.5, 0.6])
    with pytest.raises(MeasureError):
        DiscreteMeasure([1.0, 2.0], [1.0, 0.0])


def test_coincident_atoms_merge_and_sort():
    mu = DiscreteMeasure([3.0, 1.0, 3.0], [0.25, 0.5, 0.25])
    assert mu.atoms == [(1.0, 0.5), (3.0, 0.5)]
    assert len(mu) == 2


def test_arrays_are_read_only():
    mu = DiscreteMeasure([1.0, 2.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        mu.values[0] = 5.0


def test_moments_and_cdf():
    mu = DiscreteMeasure([0.0, 2.0], [0.25, 0.75])
    assert mu.moment(1) == pytest.approx(1.5)
    assert mu.moment(2) == pytest.approx(3.0)
    assert mu.mass_at_zero() == 0.25
    assert np.allclose(mu.cdf([-1.0, 0.0, 1.0, 2.0]), [0.0, 0.25, 0.25, 1.0])


@given(atoms_strategy)
def test_json_round_trip(pairs):
    mu = _measure(pairs)
    back = DiscreteMeasure.from_json(json.loads(json.dumps(mu.to_json())))
    assert back == mu


def test_bulk_json_round_trip():
    law = mp_bulk(0.5, n=201, M=64)
    back = BulkLaw.from_json(json.loads(json.dumps(law.to_json())), M=64)
    assert np.array_equal(back.x, law.x) and np.array_equal(back.density, law.density)
    assert back.discretization == law.discretization


# ----- affine pushforward


def test_affine_identity():
    mu = DiscreteMeasure([0.5, 1.0, 4.0], [0.2, 0.3, 0.5])
    assert affine_pushforward(mu, 1.0, 0.0) == mu


def test_affine_fixed_point_at_one():
    assert affine_pushforward(DiscreteMeasure.point(1.0), 0.64, 0.36).atoms == [(1.0, 1.0)]


def test_affine_two_atoms():
    out = affine_pushforward(DiscreteMeasure([0.0, 2.0], [0.5, 0.5]), 0.5, 0.5)
    assert np.allclose(out.values, [0.5, 1.5]) and np.allclose(out.weights, [0.5, 0.5])


def test_affine_leaving_half_line():
    with pytest.raises(MeasureError, match=r"leaves \[0,inf\)"):
        affine_pushforward(DiscreteMeasure([0.0, 1.0], [0.5, 0.5]), 1.0, -0.5)


@given(atoms_strategy, st.floats(0.05, 5.0), st.floats(0.0, 3.0))
def test_affine_inverse_recovers_atoms(pairs, a2, b):
    mu = _measure(pairs)
    out = affine_pushforward(mu, a2, b)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)
    if len(out) == len(mu):
        back = (out.values - b) / a2
        assert np.allclose(back, mu.values, rtol=1e-12, atol=1e-12 * (1 + b / a2))


# ----- companion


def test_companion_gamma_one_is_identity():
    mu = DiscreteMeasure.point(1.0)
    assert companion(mu, 1.0) is mu


def test_companion_gamma_half():
    c = companion(DiscreteMeasure.point(1.0), 0.5)
    assert c.atoms == [(0.0, 0.5), (1.0, 0.5)]


def test_companion_bulk_keeps_zero_atom_explicit():
    law = mp_bulk(0.5, n=401, M=64)
    c = companion(law, 0.25)
    assert c.zero_mass == pytest.approx(0.75)
    assert c.total_mass() == pytest.approx(1.0, abs=1e-3)


def test_companion_gamma_two_matches_wishart():
    # mu = MP(2) population delta_1; its companion is the law of the n x n Gram side
    n = 400
    rng = np.random.default_rng(7)
    G = rng.standard_normal((2 * n, n)) / np.sqrt(n)
    mu = DiscreteMeasure.from_eigenvalues(np.linalg.eigvalsh(G @ G.T))
    gram = np.linalg.eigvalsh(G.T @ G)
    c = companion(mu, 2.0)
    assert isinstance(c, CompanionTransform)
    for z in (-1.0 + 0.5j, 3.0 + 1.0j, 10.0 + 0.1j):
        direct = np.mean(1.0 / (gram - z))
        assert abs(c.stieltjes(z) - direct) < 1e-8


# ----- Stieltjes


def test_stieltjes_examples():
    assert stieltjes_discrete(DiscreteMeasure.point(1.0), 1j) == pytest.approx(0.5 + 0.5j)
    assert stieltjes_discrete(DiscreteMeasure.point(1.0), -1.0) == pytest.approx(0.5)
    assert stieltjes_discrete(DiscreteMeasure([1.0, 3.0], [0.5, 0.5]), 2.0) == pytest.approx(0.0)


def test_stieltjes_pole():
    with pytest.raises(MeasureError):
        stieltjes_discrete(DiscreteMeasure([1.0, 3.0], [0.5, 0.5]), 3.0)


@given(atoms_strategy, st.floats(-20, 20), st.floats(1e-3, 20))
def test_stieltjes_conjugate_symmetry(pairs, x, y):
    mu = _measure(pairs)
    z = complex(x, y)
    m = stieltjes_discrete(mu, z)
    assert m.imag > 0
    assert stieltjes_discrete(mu, z.conjugate()) == pytest.approx(np.conj(m), rel=1e-12, abs=1e-14)


# ----- quantile discretization


def test_quantile_point_like_law():
    x = np.linspace(0.999, 1.001, 101)
    f = np.maximum(0, 1 - np.abs(x - 1) / 1e-3) / 1e-3
    d = quantile_discretize(make_bulk_law(x, f, M=16), 16)
    assert np.allclose(d.values, 1.0, atol=1e-3)


def test_quantile_degenerate_returns_atom():
    law = make_bulk_law(np.linspace(0, 1, 11), np.zeros(11), zero_mass=1.0, M=16)
    assert law.discretization.atoms == [(0.0, 1.0)]


def test_quantile_too_few_atoms():
    with pytest.raises(MeasureError):
        quantile_discretize(mp_bulk(0.5, n=101, M=16), 8)


def test_quantile_mp_moments():
    law = mp_bulk(1.0)
    d = law.discretization
    assert abs(d.moment(1) - 1.0) < 1e-3
    # second moment of MP(gamma) is 1 + gamma
    assert abs(d.moment(2) - 2.0) / 2.0 < 1e-3
    assert d.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_quantile_zero_atom_carried():
    law = make_bulk_law(np.linspace(1, 2, 101), np.full(101, 0.5), zero_mass=0.5, M=32)
    d = law.discretization
    assert d.mass_at_zero() == pytest.approx(0.5)
    assert len(d) == 33


@pytest.mark.parametrize("gamma", [0.3, 1.0])
def test_quantile_kolmogorov_halving(gamma):
    law = mp_bulk(gamma)
    M = 200
    a = quantile_discretize(law, M)
    b = quantile_discretize(law, 2 * M)
    grid = np.linspace(0, 5, 5001)
    assert np.max(np.abs(a.cdf(grid) - b.cdf(grid))) <= 1.0 / M + 1e-12


def test_quantile_stieltjes_error_decays():
    gamma = 0.5
    law = mp_bulk(gamma, n=8001)
    z_pts = [-0.1, oracles.mp_edges(gamma)[1] + 0.1, 1.0 + 0.1j, 2.0 + 0.5j]
    errs = []
    for M in (100, 400):
        d = quantile_discretize(law, M)
        errs.append(max(abs(stieltjes_discrete(d, z) - oracles.mp_stieltjes(z, gamma)) for z in z_pts))
    assert errs[0] < 5.0 / 100
    assert errs[1] < errs[0] / 2
