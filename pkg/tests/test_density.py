import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from walklab import (
    Density,
    DensitySequence,
    PowerCache,
    ZdGroup,
    adjoint_and_symmetrize,
    ball,
    check_assumptions,
    convolve,
    delta,
    power,
    power_sequence,
    word_metric,
)
from walklab.errors import ConfigError, GroupMismatch

from conftest import random_small_density


def test_delta_convolution(z1):
    da = delta(z1, (3,))
    db = delta(z1, (-1,))
    assert convolve(da, db).weights == {(2,): 1.0}


def test_simple_walk_square(z1):
    k = Density(z1, {(-1,): 0.5, (1,): 0.5})
    k2 = convolve(k, k)
    assert k2.weights == {(-2,): 0.25, (0,): 0.5, (2,): 0.25}


def test_heisenberg_square_bruteforce(heis, heis_lazy):
    got = convolve(heis_lazy, heis_lazy)
    expected = {}
    for g1, w1 in heis_lazy.weights.items():
        for g2, w2 in heis_lazy.weights.items():
            g = heis.mul(g1, g2)
            expected[g] = expected.get(g, 0.0) + w1 * w2
    assert set(got.weights) == set(expected)
    for g, v in expected.items():
        assert got[g] == pytest.approx(v, abs=1e-15)


def test_lazy_power_binomial(z1, lazy_z1):
    k4 = power(lazy_z1, 4)
    for j in range(-4, 5):
        assert k4[(j,)] == pytest.approx(math.comb(8, j + 4) / 256, abs=1e-15)


def test_power_semigroup_property(z1, z2, heis):
    for ctx in (z1, z2, heis):
        for seed in range(5):
            k = random_small_density(ctx, seed)
            lhs = power(k, 5)
            rhs = convolve(power(k, 2), power(k, 3))
            keys = set(lhs.weights) | set(rhs.weights)
            assert max(abs(lhs[g] - rhs[g]) for g in keys) < 1e-12


def test_convolution_associative(z1, heis):
    for ctx in (z1, heis):
        for seed in range(1000):
            if seed >= 40:  # full battery runs in acceptance; keep unit test fast
                break
            k1 = random_small_density(ctx, 3 * seed)
            k2 = random_small_density(ctx, 3 * seed + 1)
            k3 = random_small_density(ctx, 3 * seed + 2)
            lhs = convolve(convolve(k1, k2), k3)
            rhs = convolve(k1, convolve(k2, k3))
            keys = set(lhs.weights) | set(rhs.weights)
            assert max(abs(lhs[g] - rhs[g]) for g in keys) < 1e-12


def test_mass_conservation(z2, lazy_z2):
    for n in (1, 4, 16, 64):
        assert abs(power(lazy_z2, n).mass() - 1.0) <= n * 1e-13


def test_support_in_ball(heis, heis_lazy):
    k3 = power(heis_lazy, 3)
    for g in k3.weights:
        assert word_metric(heis, g) <= 3


def test_group_mismatch(z1, z2, lazy_z1, lazy_z2):
    with pytest.raises(GroupMismatch):
        convolve(lazy_z1, lazy_z2)


def test_adjoint_and_symmetrize(z1):
    k = Density(z1, {(0,): 1 / 3, (1,): 2 / 3})
    kstar, khat = adjoint_and_symmetrize(k)
    assert kstar.weights == {(-1,): 2 / 3, (0,): 1 / 3}
    assert khat[(1,)] == pytest.approx(1 / 3)
    assert khat[(-1,)] == pytest.approx(1 / 3)
    assert khat.is_symmetric()
    drift = Density(z1, {(-1,): 1 / 6, (0,): 1 / 3, (1,): 1 / 2})
    _, khat2 = adjoint_and_symmetrize(drift)
    for x in (-1, 0, 1):
        assert khat2[(x,)] == pytest.approx(1 / 3)


def test_symmetric_density_fixed(z1, lazy_z1):
    _, khat = adjoint_and_symmetrize(lazy_z1)
    assert khat.weights == lazy_z1.weights


def test_check_assumptions(z1, lazy_z1, lamplighter):
    rec = check_assumptions(lazy_z1, [(-1,), (0,), (1,)])
    assert rec.passed and rec.epsilon == pytest.approx(0.25)

    from walklab import CyclicGroup

    z4 = CyclicGroup(4)
    rec2 = check_assumptions(delta(z4, 1), [0, 1, 3])
    assert not rec2.passed and rec2.min_on_w == 0.0

    kl = Density(lamplighter, {g: 0.25 for g in lamplighter.default_generators()})
    assert check_assumptions(kl, lamplighter.default_generators()).passed


def test_check_assumptions_subgaussian(z1, lazy_z1):
    rec = check_assumptions(lazy_z1, [(-1,), (0,), (1,)], sub_gaussian=(1.0, 0.5))
    assert rec.sub_gaussian_ok
    rec = check_assumptions(lazy_z1, [(-1,), (0,), (1,)], sub_gaussian=(0.1, 5.0))
    assert not rec.sub_gaussian_ok


def test_density_validation(z1):
    with pytest.raises(ConfigError):
        Density(z1, {(0,): 0.7})
    with pytest.raises(ConfigError):
        Density(z1, {(0,): 1.2, (1,): -0.2})


def test_density_file_roundtrip(z2, lazy_z2, tmp_path):
    blob = json.dumps(lazy_z2.to_json(), sort_keys=True)
    back = Density.from_json(json.loads(blob))
    assert back.group == z2
    assert back.weights == lazy_z2.weights


def test_power_cache_ladder(z1, lazy_z1, tmp_path):
    cache = PowerCache(str(tmp_path))
    power(lazy_z1, 32, cache=cache)
    entries = sorted(f for f in os.listdir(tmp_path) if "_n" in f)
    ns = sorted(int(f.split("_n")[1].split(".")[0]) for f in entries)
    assert ns == [2, 4, 8, 16, 32]


def test_power_cache_reload(z1, lazy_z1, tmp_path):
    cache = PowerCache(str(tmp_path))
    k16 = power(lazy_z1, 16, cache=cache)
    fresh = PowerCache(str(tmp_path))
    hit = fresh.get(lazy_z1, 16)
    assert hit is not None and hit.weights == k16.weights


def test_density_sequence_uniformity(z1, lazy_z1):
    kb = Density(z1, {(-1,): 1 / 3, (0,): 1 / 3, (1,): 1 / 3})
    seq = DensitySequence([lazy_z1, kb] * 4)
    assert seq.uniformity["all_pass"]
    assert seq.uniformity["epsilon"] == pytest.approx(0.25)

    bad = Density(z1, {(0,): 0.5, (2,): 0.25, (-2,): 0.25})
    seq2 = DensitySequence([lazy_z1, bad])
    assert not seq2.uniformity["all_pass"]


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5))
@settings(max_examples=100, deadline=None)
def test_density_normalization_hypothesis(ws):
    ctx = ZdGroup(1)
    total = sum(ws)
    k = Density(ctx, {(i,): w / total for i, w in enumerate(ws)})
    assert abs(k.mass() - 1.0) < 1e-12
    k2 = convolve(k, k)
    assert abs(k2.mass() - 1.0) < 1e-12


def test_power_sequence_matches_power(z1, lazy_z1):
    seq = power_sequence(lazy_z1, 8)
    for n in (1, 3, 8):
        kn = power(lazy_z1, n)
        keys = set(kn.weights) | set(seq[n - 1].weights)
        assert max(abs(kn[g] - seq[n - 1][g]) for g in keys) < 1e-13
