import math

import numpy as np
import pytest

from walklab import (
    Density,
    SymmetricGroup,
    ZdGroup,
    center_decompose,
    is_centered,
    moment_vector,
    verify_conjugation,
)
from walklab.errors import HullDegenerate

from conftest import random_small_density


def tilt_mass(k, v):
    return math.fsum(
        w * math.exp(-float(np.dot(v, k.group.abelianize(g))))
        for g, w in k.weights.items())


def test_moment_examples(z1, s4, drift_z1, lazy_z1):
    assert moment_vector(drift_z1)[0] == pytest.approx(1 / 3)
    assert np.allclose(moment_vector(lazy_z1), 0.0)
    k4 = Density(s4, {g: 1 / len(s4.generators) for g in s4.generators})
    assert moment_vector(k4).size == 0


def test_is_centered(z1, z2, lazy_z1, lazy_z2, drift_z1, s4):
    assert is_centered(lazy_z1, 1e-10)
    assert is_centered(lazy_z2, 1e-10)
    assert not is_centered(drift_z1, 1e-10)
    k4 = Density(s4, {g: 1 / len(s4.generators) for g in s4.generators})
    assert is_centered(k4, 1e-10)


def test_symmetric_is_centered(heis, heis_lazy):
    # the abelianized mean of a symmetric density vanishes
    assert is_centered(heis_lazy, 1e-12)


def test_drift_decomposition_closed_form(z1, drift_z1):
    res = center_decompose(drift_z1)
    assert res.v[0] == pytest.approx(math.log(3) / 2, abs=1e-12)
    assert res.delta == pytest.approx((1 + math.sqrt(3)) / 3, abs=1e-12)
    assert res.k_prime[(-1,)] == pytest.approx((3 - math.sqrt(3)) / 4, abs=1e-12)
    assert res.k_prime[(0,)] == pytest.approx((math.sqrt(3) - 1) / 2, abs=1e-12)
    assert res.k_prime[(1,)] == pytest.approx((3 - math.sqrt(3)) / 4, abs=1e-12)
    assert res.k_prime.is_symmetric(tol=1e-13)
    assert res.grad_norm <= 1e-12


def test_centered_input_is_fixed_point(z1, lazy_z1):
    res = center_decompose(lazy_z1)
    assert np.allclose(res.v, 0.0)
    assert res.delta == pytest.approx(1.0)
    assert res.k_prime.weights == lazy_z1.weights


def test_reconstruction_pointwise(z1, drift_z1):
    res = center_decompose(drift_z1)
    for g, w in drift_z1.weights.items():
        assert res.delta * res.chi(g) * res.k_prime[g] == pytest.approx(w, abs=1e-12)


def test_conjugation_powers(z1, drift_z1, lazy_z1):
    res = center_decompose(drift_z1)
    assert verify_conjugation(drift_z1, res, 16) <= 1e-10
    res2 = center_decompose(lazy_z1)
    assert verify_conjugation(lazy_z1, res2, 4) <= 1e-12


def test_one_sided_raises(z1):
    with pytest.raises(HullDegenerate):
        center_decompose(Density(z1, {(0,): 0.5, (1,): 0.5}))
    with pytest.raises(HullDegenerate):
        center_decompose(Density(z1, {(1,): 0.4, (2,): 0.6}))


def test_rank_zero_short_circuit(s4):
    k = Density(s4, {g: 1 / len(s4.generators) for g in s4.generators})
    res = center_decompose(k)
    assert res.v.size == 0 and res.delta == 1.0
    assert res.k_prime.weights == k.weights


def test_span_deficient_drift(z2):
    # support on an axis: centering happens inside the span
    k = Density(z2, {(-1, 0): 1 / 6, (0, 0): 1 / 3, (1, 0): 1 / 2})
    res = center_decompose(k)
    assert res.v[0] == pytest.approx(math.log(3) / 2, abs=1e-11)
    assert res.v[1] == pytest.approx(0.0, abs=1e-12)
    assert is_centered(res.k_prime, 1e-10)


def test_delta_in_unit_interval_and_idempotence(z1, z2, heis):
    for ctx in (z1, z2, heis):
        for seed in range(12):
            k = random_small_density(ctx, seed + 700, max_support=5, radius=2)
            try:
                res = center_decompose(k)
            except HullDegenerate:
                continue
            assert 0.0 < res.delta <= 1.0 + 1e-12
            assert (res.delta >= 1.0 - 1e-10) == is_centered(k, 1e-10)
            again = center_decompose(res.k_prime)
            assert np.max(np.abs(again.v)) <= 1e-6 if again.v.size else True
            assert is_centered(res.k_prime, 1e-9)


def test_tilt_mass_log_convex(z1, z2, drift_z1):
    gen = np.random.default_rng(5)
    for k in (drift_z1, random_small_density(z2, 123, max_support=6, radius=2)):
        r = k.group.rank
        for _ in range(200):
            v1 = gen.standard_normal(r)
            v2 = gen.standard_normal(r)
            mid = tilt_mass(k, (v1 + v2) / 2)
            assert mid <= math.sqrt(tilt_mass(k, v1) * tilt_mass(k, v2)) \
                * (1 + 1e-12)


def test_hessian_positive_on_path(z1, drift_z1):
    # tilted covariance stays positive definite along the Newton path
    points = np.array([drift_z1.group.abelianize(g)
                       for g in drift_z1.weights], dtype=float)
    weights = np.array(list(drift_z1.weights.values()))
    for v in np.linspace(-1.0, 1.0, 21):
        tw = weights * np.exp(-points[:, 0] * v)
        hess = float((points[:, 0] ** 2 * tw).sum())
        assert hess > 0
