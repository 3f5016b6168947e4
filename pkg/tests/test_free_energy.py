import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from card.errors import ShapeError
from card.free_energy import (KT_KCAL, ReducedEnergyMatrix, absolute_free_energy, bar,
                              ess_overlap, harmonic_mean_ess, mbar, mbar_estimate, mfes_reference,
                              zwanzig_fep)
from card.toy import GaussianWells

LN2 = math.log(2.0)


def gaussian_pair(n, seed=0, sa=1.0, sb=0.5):
    """Samples and reduced energies of two centred 1D Gaussians."""
    rng = np.random.default_rng(seed)
    xa = rng.normal(0, sa, n)
    xb = rng.normal(0, sb, n)

    def ua(x):
        return 0.5 * x * x / sa ** 2

    def ub(x):
        return 0.5 * x * x / sb ** 2

    return ub(xa) - ua(xa), ua(xb) - ub(xb), (xa, xb, ua, ub)


# -- FEP ----------------------------------------------------------------------

def test_fep_identical_and_shifted():
    du = np.zeros(50)
    assert zwanzig_fep(du, n_boot=0).value == 0.0
    rng = np.random.default_rng(0)
    assert zwanzig_fep(np.full(37, 1.25), n_boot=0).value == pytest.approx(1.25, abs=1e-14)
    du = rng.normal(size=100)
    base = zwanzig_fep(du, n_boot=0).value
    assert zwanzig_fep(du + 0.7, n_boot=0).value == pytest.approx(base + 0.7, abs=1e-12)


def test_fep_gaussian_pair():
    du_f, _, _ = gaussian_pair(100_000)
    est = zwanzig_fep(du_f, n_boot=50)
    assert abs(est.value - LN2) < 0.03
    assert est.stderr > 0


def test_fep_needs_samples():
    with pytest.raises(ValueError):
        zwanzig_fep(np.zeros(0))


# -- BAR ----------------------------------------------------------------------

def test_bar_identical_ensembles():
    du = np.zeros(500)
    est = bar(du, du, n_boot=20)
    assert abs(est.value) <= max(3 * est.stderr, 1e-12)


def test_bar_constant_offset_is_exact():
    est = bar(np.full(100, 2.5), np.full(80, -2.5), n_boot=0)
    assert est.value == pytest.approx(2.5, abs=1e-9)


def test_bar_gaussian_pair():
    du_f, du_r, _ = gaussian_pair(100_000, seed=2)
    est = bar(du_f, du_r, n_boot=10)
    assert abs(est.value - LN2) < 0.02


@settings(max_examples=25, deadline=None)
@given(st.floats(-20, 20))
def test_bar_shift_invariance(c):
    du_f, du_r, _ = gaussian_pair(400, seed=3)
    base = bar(du_f, du_r, n_boot=0).value
    shifted = bar(du_f + c, du_r - c, n_boot=0).value
    assert shifted == pytest.approx(base + c, abs=1e-8)


# -- MBAR ---------------------------------------------------------------------

def test_mbar_two_states_equals_bar():
    du_f, du_r, (xa, xb, ua, ub) = gaussian_pair(20_000, seed=4)
    m = ReducedEnergyMatrix.from_blocks([np.stack([ua(xa), ub(xa)]), np.stack([ua(xb), ub(xb)])])
    f = mbar(m, n_boot=0).f
    assert abs((f[1] - f[0]) - bar(du_f, du_r, n_boot=0).value) < 1e-6


def test_mbar_three_gaussians():
    rng = np.random.default_rng(5)
    sig = [1.0, 0.7, 0.5]
    n = 50_000
    xs = [rng.normal(0, s, n) for s in sig]
    blocks = [np.stack([0.5 * x * x / s ** 2 for s in sig]) for x in xs]
    res = mbar(ReducedEnergyMatrix.from_blocks(blocks), n_boot=10)
    assert abs(res.f[1] - res.f[0] - (-math.log(0.7))) < 0.02
    assert abs(res.f[2] - res.f[0] - LN2) < 0.02
    assert np.all(res.stderr[1:] > 0)


def test_mbar_duplicate_states():
    rng = np.random.default_rng(6)
    x = rng.normal(size=300)
    y = rng.normal(0, 0.5, 300)
    u = lambda v: np.stack([0.5 * v * v, 0.5 * v * v, 2 * v * v])  # noqa: E731
    res = mbar(ReducedEnergyMatrix.from_blocks([u(x), u(y)[:, :0], u(y)]), n_boot=0)
    assert abs(res.f[1] - res.f[0]) < 1e-9


def test_mbar_unsampled_state_is_predicted():
    rng = np.random.default_rng(7)
    x = rng.normal(size=40_000)
    u = np.stack([0.5 * x * x, 0.5 * x * x / 0.8 ** 2])
    res = mbar(ReducedEnergyMatrix(u, [40_000, 0]), n_boot=0)
    assert abs(res.f[1] - (-math.log(0.8))) < 0.02


def test_energy_matrix_validation():
    with pytest.raises(ShapeError):
        ReducedEnergyMatrix(np.zeros((2, 5)), [2, 2])
    with pytest.raises(ValueError):
        ReducedEnergyMatrix(np.array([[0.0, np.nan]]), [2])
    with pytest.raises(ValueError):
        mbar(ReducedEnergyMatrix(np.zeros((1, 3)), [3]))


def test_mbar_estimate_wraps_difference():
    rng = np.random.default_rng(8)
    x = rng.normal(size=1000)
    m = ReducedEnergyMatrix(np.stack([0.5 * x * x, 0.5 * x * x + 3.0]), [1000, 0])
    est = mbar_estimate(m, n_boot=5)
    assert est.value == pytest.approx(3.0, abs=1e-9)
    assert est.kcal == pytest.approx(3.0 * KT_KCAL)


# -- ESS ----------------------------------------------------------------------

def test_ess_examples():
    assert ess_overlap(np.zeros(17)) == pytest.approx(17.0)
    assert ess_overlap([0.0, -100.0, -100.0]) == pytest.approx(1.0)
    assert ess_overlap(np.log([1.0, 1.0, 2.0])) == pytest.approx(16 / 6)
    with pytest.raises(ValueError):
        ess_overlap([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=40), st.floats(-500, 500))
def test_ess_scale_invariant_and_bounded(logw, shift):
    a = ess_overlap(logw)
    assert 1.0 - 1e-12 <= a <= len(logw) + 1e-9
    assert ess_overlap(np.asarray(logw) + shift) == pytest.approx(a, rel=1e-9)


# -- absolute free energy -----------------------------------------------------

def test_absolute_against_itself_is_zero():
    rng = np.random.default_rng(9)
    lq = rng.normal(size=500) - 4.0
    est = absolute_free_energy(lq, -lq, lq, -lq, n_boot=10)
    assert abs(est.value) < 1e-6


def test_absolute_uniform_box():
    n_atoms, a = 2, 30.0
    lq = np.full(300, -3 * n_atoms * math.log(a))
    est = absolute_free_energy(lq, np.zeros(300), lq, np.zeros(300), n_boot=10)
    assert est.value == pytest.approx(-3 * n_atoms * math.log(a), abs=1e-9)
    assert est.n_eff == (pytest.approx(300.0), pytest.approx(300.0))
    assert harmonic_mean_ess(est) == pytest.approx(300.0)


def test_absolute_gaussian_proposal():
    # proposal N(0, 1.2^2), target U = x^2 / 2 -> F = -log sqrt(2 pi)
    rng = np.random.default_rng(10)
    s = 1.2
    xm = rng.normal(0, s, 2000)
    xt = rng.normal(0, 1, 2000)

    def logq(x):
        return -0.5 * x * x / s ** 2 - math.log(s * math.sqrt(2 * math.pi))

    est = absolute_free_energy(logq(xm), 0.5 * xm ** 2, logq(xt), 0.5 * xt ** 2, n_boot=50)
    ref = -0.5 * math.log(2 * math.pi)
    assert abs(est.value - ref) < 2 * est.stderr + 1e-3
    assert not est.warnings


def test_absolute_poor_overlap_warns():
    lqm = np.zeros(50)
    um = np.linspace(0, 200, 50)
    lqt = np.linspace(-200, 0, 50)
    est = absolute_free_energy(lqm, um, lqt, np.zeros(50), n_boot=0)
    assert est.warnings and "overlap" in est.warnings[0]


def test_absolute_shape_mismatch():
    with pytest.raises(ShapeError):
        absolute_free_energy(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3))


# -- MFES ---------------------------------------------------------------------

def test_mfes_identical_endstates():
    pot = GaussianWells([[0.0, 0.0, 0.0]], 1.0)
    est = mfes_reference(pot, pot, np.random.default_rng(0), n_steps=1500, n_chains=4,
                         burn_in=300, n_boot=20)
    assert abs(est.value) < 1e-9


def test_mfes_gaussian_pair():
    a = GaussianWells([[0.0, 0.0, 0.0]], [1.0, 1.0, 1.0])
    b = GaussianWells([[0.0, 0.0, 0.0]], [0.5, 1.0, 1.0])
    est = mfes_reference(a, b, np.random.default_rng(1), n_steps=6000, n_chains=8,
                         burn_in=1000, n_boot=20)
    assert abs(est.value - LN2) < 0.03
