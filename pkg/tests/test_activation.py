import math

import numpy as np
import pytest

from ckspectra.activation import (
    CATALOG,
    ActivationError,
    RawActivation,
    gauss_hermite_expect,
    get_activation,
    get_raw,
    normalize,
    validate_assumption,
)

import oracles

SMOOTH = ["tanh", "arctan", "erf"]


def test_quadrature_polynomials():
    assert gauss_hermite_expect(lambda x: np.ones_like(x)) == pytest.approx(1.0, abs=1e-14)
    assert gauss_hermite_expect(lambda x: x**2) == pytest.approx(1.0, abs=1e-12)
    assert gauss_hermite_expect(lambda x: x**4) == pytest.approx(3.0, abs=1e-11)
    assert gauss_hermite_expect(lambda x: x**4, order=3) == pytest.approx(3.0, abs=1e-12)


def test_quadrature_errors():
    with pytest.raises(ValueError):
        gauss_hermite_expect(lambda x: x, order=1)
    with pytest.raises(ValueError):
        gauss_hermite_expect(lambda x: np.where(x > 0, np.inf, 0.0))


def test_identity_is_already_normalized():
    act = get_activation("identity")
    assert act.shift == pytest.approx(0.0, abs=1e-14)
    assert act.scale == pytest.approx(1.0, abs=1e-12)
    assert act.b_sigma == pytest.approx(1.0, abs=1e-12)
    assert act.zeta2 == pytest.approx(0.0, abs=1e-12)
    assert validate_assumption(act) == []


@pytest.mark.parametrize("name", SMOOTH)
def test_odd_activations(name):
    act = get_activation(name)
    raw = CATALOG[name]
    assert act.shift == pytest.approx(0.0, abs=1e-14)
    assert act.zeta2 == pytest.approx(0.0, abs=1e-14)
    # independent adaptive quadrature against the normal pdf
    assert act.scale == pytest.approx(math.sqrt(oracles.gaussian_expect(lambda x: raw.f(x) ** 2)), rel=1e-9)
    assert act.b_sigma == pytest.approx(oracles.gaussian_expect(raw.df) / act.scale, rel=1e-9)
    assert validate_assumption(act) == []


@pytest.mark.parametrize("name", SMOOTH + ["softplus"])
def test_normalization_invariants(name):
    act = get_activation(name)
    assert gauss_hermite_expect(act) == pytest.approx(0.0, abs=1e-10)
    assert gauss_hermite_expect(lambda x: act(x) ** 2) == pytest.approx(1.0, abs=1e-10)
    # Stein: E[sigma'] = E[xi sigma] and E[sigma h2] = E[sigma''] / sqrt 2
    assert act.b_sigma == pytest.approx(gauss_hermite_expect(lambda x: x * act(x)), abs=1e-9)
    assert act.zeta2 == pytest.approx(act.second_moment / math.sqrt(2), abs=1e-9)


@pytest.mark.parametrize("name", SMOOTH)
def test_order_doubling_is_stable(name):
    # numpy's Hermite rule overflows past ~360 nodes, so double from 175
    a, b = get_activation(name, 175), get_activation(name, 350)
    assert abs(a.scale - b.scale) < 1e-10
    assert abs(a.b_sigma - b.b_sigma) < 1e-10


def test_erf_closed_form():
    # E[erf(xi)^2] = (2/pi) arcsin(2/3); E[erf'(xi)] = 2/sqrt(3 pi)
    act = get_activation("erf")
    c1 = math.sqrt(2 / math.pi * math.asin(2 / 3))
    assert act.scale == pytest.approx(c1, rel=1e-12)
    assert act.b_sigma == pytest.approx(2 / math.sqrt(3 * math.pi) / c1, rel=1e-12)


def test_hermite_two_violates_both_conditions():
    h2 = RawActivation(
        "h2",
        lambda x: (x**2 - 1) / math.sqrt(2),
        lambda x: math.sqrt(2) * x,
        lambda x: np.full_like(x, math.sqrt(2)),
        math.sqrt(2),
    )
    problems = validate_assumption(normalize(h2))
    assert len(problems) == 2
    assert any("b_sigma" in p for p in problems) and any("E[sigma''" in p for p in problems)


def test_softplus_is_flagged():
    act = get_activation("softplus")
    assert act.shift > 0
    problems = validate_assumption(act)
    assert len(problems) == 1 and "E[sigma''" in problems[0]


def test_degenerate_activation():
    const = RawActivation("const", lambda x: np.full_like(x, 2.0), np.zeros_like, np.zeros_like, 0.0)
    with pytest.raises(ActivationError, match="degenerate"):
        normalize(const)


def test_unknown_name_lists_catalog():
    with pytest.raises(ActivationError) as info:
        get_raw("relu")
    for name in CATALOG:
        assert name in str(info.value)


@pytest.mark.parametrize("name", SMOOTH + ["softplus"])
def test_derivatives_match_finite_differences(name):
    act = get_activation(name)
    x = np.linspace(-3, 3, 13)
    h = 1e-5
    assert np.allclose(act.derivative(x), (act(x + h) - act(x - h)) / (2 * h), atol=1e-8)
    assert np.allclose(
        act.second_derivative(x), (act.derivative(x + h) - act.derivative(x - h)) / (2 * h), atol=1e-8
    )


def test_json_fields():
    d = get_activation("tanh").to_json()
    assert set(d) >= {"c0", "c1", "b_sigma", "zeta2"}
