import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, special

from rdbound.oracles import (
    DiscreteSourceSpec,
    ba_at_distortion,
    ba_curve,
    bernoulli_hamming_rd,
    binary_entropy,
    blahut_arimoto,
    gaussian_rd,
)


def hb(p):
    # independent binary entropy (nats) via scipy's entr
    return float(special.entr(p) + special.entr(1 - p))


def bernoulli_slope_for(d):
    # on the Bernoulli/Hamming curve dR/dD = ln(D / (1 - D))
    return math.log(d / (1 - d))


# closed forms -------------------------------------------------------------------


def test_gaussian_rd_examples():
    assert gaussian_rd(1.0, 1.0) == 0.0
    assert gaussian_rd(1.0, 0.25) == pytest.approx(math.log(2), abs=1e-15)
    assert gaussian_rd(1.0, 3.0) == 0.0
    with pytest.raises(ValueError):
        gaussian_rd(0.0, 0.1)
    with pytest.raises(ValueError):
        gaussian_rd(1.0, 0.0)


def test_gaussian_rd_decreasing_and_convex():
    d = np.linspace(0.01, 0.99, 200)
    r = np.array([gaussian_rd(1.0, x) for x in d])
    assert np.all(np.diff(r) < 0)
    assert np.all(np.diff(r, 2) >= -1e-15)


def test_bernoulli_hamming_examples():
    assert bernoulli_hamming_rd(0.5, 0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert bernoulli_hamming_rd(0.5, 0.5) == 0.0
    assert bernoulli_hamming_rd(0.3, 0.1) == pytest.approx(hb(0.3) - hb(0.1), abs=1e-14)
    assert bernoulli_hamming_rd(0.3, 0.1) == pytest.approx(0.2858, abs=1e-4)
    assert bernoulli_hamming_rd(0.3, 0.31) == 0.0
    for bad in ((0.0, 0.1), (1.0, 0.1), (0.3, -0.1)):
        with pytest.raises(ValueError):
            bernoulli_hamming_rd(*bad)


@given(st.floats(1e-6, 1 - 1e-6))
def test_binary_entropy_matches_scipy(p):
    assert binary_entropy(p) == pytest.approx(hb(p), rel=1e-12, abs=1e-15)


# Blahut-Arimoto ---------------------------------------------------------------------


def test_source_validation():
    with pytest.raises(ValueError):
        DiscreteSourceSpec(np.array([0.5, 0.6]), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        DiscreteSourceSpec(np.array([0.5, 0.5]), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        DiscreteSourceSpec(np.array([0.5, 0.5]), np.array([[0, np.inf], [1, 0]]))
    with pytest.raises(ValueError):
        blahut_arimoto(DiscreteSourceSpec.bernoulli(0.5), 0.0)


@pytest.mark.parametrize("p", [0.5, 0.3])
@pytest.mark.parametrize("d", [0.02, 0.05, 0.1, 0.2])
def test_ba_matches_bernoulli_closed_form_at_known_slope(p, d):
    pt = blahut_arimoto(DiscreteSourceSpec.bernoulli(p), bernoulli_slope_for(d))
    assert pt.converged
    assert pt.distortion == pytest.approx(d, abs=1e-9)
    assert abs(pt.rate_nats - (hb(p) - hb(d))) < 1e-9


def test_ba_example_half_at_d_point_one():
    pt = ba_at_distortion(DiscreteSourceSpec.bernoulli(0.5), 0.1)
    assert pt.rate_nats == pytest.approx(math.log(2) - hb(0.1), abs=1e-8)
    assert pt.rate_nats == pytest.approx(0.3680, abs=1e-4)


def test_ba_zero_distortion_matrix_gives_zero_rate():
    src = DiscreteSourceSpec(np.array([0.2, 0.3, 0.5]), np.zeros((3, 3)))
    for s in (-0.1, -5.0, -100.0):
        pt = blahut_arimoto(src, s)
        assert pt.rate_nats == pytest.approx(0.0, abs=1e-12)
        assert pt.distortion == 0.0


def test_ba_uniform_four_symbols_low_distortion_limit():
    # steep slope (s -> -inf) drives D -> 0 and R -> H(p) = ln 4
    pt = blahut_arimoto(DiscreteSourceSpec.hamming(np.full(4, 0.25)), -30.0)
    assert pt.rate_nats == pytest.approx(math.log(4), abs=1e-3)
    assert pt.distortion < 1e-3


def test_ba_functional_descends_every_iteration():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(5))
    src = DiscreteSourceSpec(p, rng.uniform(0, 2, (5, 4)))
    pt = blahut_arimoto(src, -3.0, record_trace=True)
    tr = np.array(pt.functional_trace)
    assert tr.size == pt.iterations > 1
    assert np.all(np.diff(tr) <= 1e-13)


def _lagrangian_by_direct_minimisation(src, slope):
    """min over channels of I(X; Xhat) - slope * E[d] via scipy (independent of BA)."""
    p, d = src.probabilities, src.distortion
    n, m = d.shape

    def objective(theta):
        logits = theta.reshape(n, m)
        cond = special.softmax(logits, axis=1)
        marg = p @ cond
        mi = np.sum(p[:, None] * cond * (np.log(cond + 1e-300) - np.log(marg + 1e-300)[None, :]))
        return mi - slope * np.sum(p[:, None] * cond * d)

    best = np.inf
    rng = np.random.default_rng(1)
    for _ in range(8):
        res = optimize.minimize(objective, rng.normal(size=n * m), method="L-BFGS-B",
                                options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-15})
        best = min(best, res.fun)
    return best


@pytest.mark.parametrize("slope", [-0.7, -2.0, -6.0])
def test_ba_lagrangian_matches_direct_optimisation(slope):
    rng = np.random.default_rng(42)
    src = DiscreteSourceSpec(rng.dirichlet(np.ones(3)), rng.uniform(0, 1, (3, 3)))
    pt = blahut_arimoto(src, slope)
    ba_value = pt.rate_nats - slope * pt.distortion
    direct = _lagrangian_by_direct_minimisation(src, slope)
    assert ba_value <= direct + 1e-7
    assert ba_value == pytest.approx(direct, abs=1e-6)


def test_ba_unconverged_is_flagged():
    pt = blahut_arimoto(DiscreteSourceSpec.bernoulli(0.3), -0.9, max_iter=3)
    assert not pt.converged
    assert pt.iterations == 3


def test_ba_curve_monotone_and_single_slope():
    src = DiscreteSourceSpec.bernoulli(0.5)
    slopes = -np.logspace(np.log10(0.05), np.log10(20), 20)
    pts = ba_curve(src, slopes)
    assert len(pts) == 20
    d = [p.distortion for p in pts]
    r = [p.rate_nats for p in pts]
    assert d == sorted(d)
    assert all(r[i + 1] <= r[i] + 1e-12 for i in range(len(r) - 1))
    assert len(ba_curve(src, [-1.0])) == 1


def test_ba_curve_continuous_in_slope():
    src = DiscreteSourceSpec.bernoulli(0.5)
    a, b = ba_curve(src, [-2.0, -2.0 - 1e-6])
    assert abs(a.rate_nats - b.rate_nats) < 1e-5
    assert abs(a.distortion - b.distortion) < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.01, 0.4))
def test_ba_never_below_closed_form(p, d):
    d = min(d, min(p, 1 - p) * 0.95)
    pt = blahut_arimoto(DiscreteSourceSpec.bernoulli(p), bernoulli_slope_for(d))
    assert abs(pt.rate_nats - bernoulli_hamming_rd(p, pt.distortion)) < 1e-8
