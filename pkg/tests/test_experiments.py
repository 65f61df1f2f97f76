import math

import numpy as np
import pytest

from walklab import Density, DensitySequence, delta
from walklab.experiments import (
    Grids,
    TestFunctionFamily,
    Thresholds,
    analyticity_scan,
    capped_radii,
    davies_gaffney_fit,
    default_pair_family,
    default_psi_library,
    dichotomy_battery,
    difference_regularity,
    gradient_form_suite,
    inhomogeneous_suite,
    offdiagonal_suite,
    pointwise_gaussian,
    semigroup_analyticity,
)
from walklab.errors import HullDegenerate, NotCentered, UniformityFailed

FAST = Grids(n_grid=(1, 2, 4, 8), r_sweep=(8, 16), tent_radii=(4, 8, 16),
             lambda_grid=(-0.8, -0.2, -0.1, -0.05, 0.05, 0.1, 0.2, 0.8),
             t_grid=(1.0, 5.0))


def test_analyticity_rank_one_projection():
    from walklab import CyclicGroup

    z3 = CyclicGroup(3)
    k = Density(z3, {0: 1 / 3, 1: 1 / 3, 2: 1 / 3})
    rep = analyticity_scan(k, n_grid=(1, 2, 4), r_policy=[3], grids=FAST)
    for row in rep.measured:
        assert row["a_n"] <= 1e-9


def test_analyticity_limit_value(lazy_z1):
    rep = analyticity_scan(lazy_z1, n_grid=(9, 33), r_policy=[96], grids=FAST)
    for row in rep.measured:
        n = row["n"]
        exact = n * (1 / (n + 1)) * (n / (n + 1)) ** n
        assert row["n_a_n"] == pytest.approx(exact, rel=0.02)
    assert rep.verdicts["analytic"]


def test_analyticity_family_variant(z1, lazy_z1):
    kb = Density(z1, {(-1,): 1 / 3, (0,): 1 / 3, (1,): 1 / 3})
    rep = analyticity_scan([lazy_z1, kb], n_grid=(2, 4), r_policy=[16], grids=FAST)
    single = analyticity_scan(kb, n_grid=(2, 4), r_policy=[16], grids=FAST)
    for fam_row, single_row in zip(rep.measured, single.measured):
        assert fam_row["a_n"] >= single_row["a_n"] - 1e-12


def test_gradient_form_zero_for_identity_walk(z1):
    rep = gradient_form_suite(delta(z1), grids=FAST)
    assert rep.fitted["sup_ratio"] <= 1e-12


def test_gradient_form_discriminates(lazy_z1, drift_z1):
    good = gradient_form_suite(lazy_z1, grids=FAST)
    bad = gradient_form_suite(drift_z1, grids=FAST)
    assert good.verdicts["form_bounded"]
    assert not bad.verdicts["form_bounded"]
    assert bad.fitted["tent_scale_growth"] > 2.0


def test_davies_centered_vs_drift(lazy_z1, drift_z1):
    good = davies_gaffney_fit(lazy_z1, n_grid=(1, 4), r_policy=[48], grids=FAST)
    assert good.verdicts["weighted_growth"]
    assert abs(good.fitted["slope_at_zero"]) <= 0.02
    bad = davies_gaffney_fit(drift_z1, n_grid=(1, 4), r_policy=[48], grids=FAST)
    assert not bad.verdicts["weighted_growth"]
    assert bad.fitted["slope_at_zero"] == pytest.approx(1 / 3, rel=0.05)


def test_davies_cosh_value(z1):
    srw = Density(z1, {(-1,): 0.5, (1,): 0.5})
    from walklab import TPerturbed, WeightFn, norm_restricted

    psi = WeightFn(z1, "linear", vector=[1.0])
    for lam in (0.5, 1.0):
        est = norm_restricted(TPerturbed(srw, psi, lam), p=2, sweep=[3000],
                              tol=1e-12)
        assert est.value == pytest.approx(math.cosh(lam), abs=1e-6)


def test_offdiagonal_envelope_and_series(lazy_z1):
    rep = offdiagonal_suite(lazy_z1, n_grid=(2, 4, 8, 16), grids=FAST,
                            davies_kwargs={"n_grid": (1, 4), "r_policy": [32]})
    assert rep.verdicts["envelope_sound"]
    assert rep.verdicts["gaussian_decay"]
    assert rep.fitted["b_min_series"] >= 0.3
    assert rep.fitted["reconstruction_ratio"] >= 1.0 - 1e-9


def test_offdiagonal_drift_comoving_flat(drift_z1):
    rep = offdiagonal_suite(drift_z1, n_grid=(2, 4, 8, 16, 32), grids=FAST,
                            davies_kwargs={"n_grid": (1, 4), "r_policy": [32]})
    assert not rep.verdicts["gaussian_decay"]
    assert rep.fitted["series_b"]["comove+"] < 0.3


def test_pointwise_gaussian_z2(lazy_z2):
    rep = pointwise_gaussian(lazy_z2, n_grid=(4, 8, 16, 32), grids=FAST,
                             growth_n_max=16)
    assert rep.verdicts["envelope_sound"]
    assert rep.verdicts["gaussian_fit"]
    assert rep.fitted["diag_slope"] == pytest.approx(-1.0, abs=0.15)
    assert rep.fitted["b_hat"] > 0


def test_pointwise_requires_centered(drift_z1):
    with pytest.raises(NotCentered):
        pointwise_gaussian(drift_z1, n_grid=(4, 8), grids=FAST)


def test_pointwise_lamplighter_superpolynomial(lamplighter):
    k = Density(lamplighter, {g: 0.25 for g in lamplighter.default_generators()})
    rep = pointwise_gaussian(k, n_grid=(2, 4, 8, 16, 24), grids=FAST,
                             growth_n_max=12)
    assert rep.context["growth"] == "exponential"
    assert rep.verdicts["escape_exploratory"]
    assert rep.verdicts["superpolynomial_diag"]


def test_difference_regularity(lazy_z1):
    rep = difference_regularity(lazy_z1, n_grid=(4, 16, 64), lambda_grid=(0.0, 0.2),
                                grids=FAST, r_policy=[128], b_hat=0.5)
    assert rep.verdicts["difference_decay"]
    assert rep.fitted["c_stability"] <= 1.25


def test_semigroup_values(lazy_z1):
    rep = semigroup_analyticity(lazy_z1, t_grid=(1.0, 10.0), grids=FAST,
                                r_policy=[512])
    assert rep.fitted["sectorial_ratio"] == pytest.approx(1.0, abs=1e-9)
    t10 = next(r for r in rep.measured if r["t"] == 10.0)
    assert t10["t_norm"] == pytest.approx(1 / math.e, abs=1e-4)


def test_dichotomy_unanimity(lazy_z1, drift_z1):
    good = dichotomy_battery(lazy_z1, n_grid=(1, 2, 4, 8, 16), r_policy=[32],
                             grids=FAST)
    assert good.verdicts["unanimous"] and good.verdicts["consistent"]
    bad = dichotomy_battery(drift_z1, n_grid=(1, 2, 4, 8, 16, 32), r_policy=[32],
                            grids=FAST)
    assert bad.verdicts["unanimous"] and bad.verdicts["consistent"]
    assert not bad.verdicts["I_centered"]


def test_inhomogeneous_constant_sequence(lazy_z1):
    seq = DensitySequence([lazy_z1] * 20)
    rep = inhomogeneous_suite(seq, m_grid=(0, 4), n_grid=(2, 4, 8),
                              lambda_grid=(0.4,), grids=FAST, r_policy=[24])
    assert rep.verdicts["uniform_growth"]
    assert rep.fitted["omega_spread"] <= 1e-9
    # constant sequence matches the homogeneous walk
    hom = davies_gaffney_fit(lazy_z1, psi_list=default_psi_library(lazy_z1.group, FAST)[:1],
                             lambda_grid=(0.4,), n_grid=(4,), r_policy=[24],
                             grids=FAST)
    inh = next(r for r in rep.measured if r.get("m") == 0 and r.get("n") == 4
               and r.get("lambda") == 0.4)
    homv = next(r for r in hom.measured if r["n"] == 4)
    assert inh["norm"] == pytest.approx(homv["norm"], abs=1e-9)


def test_inhomogeneous_requires_uniformity(z1, lazy_z1):
    bad = Density(z1, {(0,): 0.5, (2,): 0.25, (-2,): 0.25})
    with pytest.raises(UniformityFailed):
        inhomogeneous_suite(DensitySequence([lazy_z1, bad]), m_grid=(0,),
                            n_grid=(2,), grids=FAST)


def test_inhomogeneous_requires_centered(z1, lazy_z1, drift_z1):
    seq = DensitySequence([lazy_z1, drift_z1] * 2)
    with pytest.raises(NotCentered):
        inhomogeneous_suite(seq, m_grid=(0,), n_grid=(2,), grids=FAST)


def test_capped_radii_exponential(f2):
    radii = capped_radii(f2, (2, 4, 8, 16, 64), max_ball=5000)
    assert radii and max(radii) <= 8


def test_tent_gamma2_scaling(z1):
    fam = TestFunctionFamily
    for R in (8, 32):
        from walklab import gradient

        tent = fam.tent(z1, R)
        assert gradient(tent, 2) == pytest.approx(math.sqrt(2 / R), rel=1e-12)


def test_monotone_information_omega(lazy_z1):
    # enlarging the norm domain never shrinks the fitted growth rate
    small = davies_gaffney_fit(lazy_z1, n_grid=(1, 4), r_policy=[8],
                               lambda_grid=(0.4, 0.8), grids=FAST)
    big = davies_gaffney_fit(lazy_z1, n_grid=(1, 4), r_policy=[32],
                             lambda_grid=(0.4, 0.8), grids=FAST)
    assert big.fitted["omega_hat"] >= small.fitted["omega_hat"] - 1e-9


def test_reports_deterministic(lazy_z1):
    a = analyticity_scan(lazy_z1, n_grid=(2, 4), r_policy=[16], grids=FAST)
    b = analyticity_scan(lazy_z1, n_grid=(2, 4), r_policy=[16], grids=FAST)
    assert a.measured == b.measured and a.fitted == b.fitted
