import math

import numpy as np
import pytest

from walklab import (
    Compose,
    Cutoff,
    Density,
    Diff,
    GFunction,
    IdentityOp,
    MatrixOracle,
    MultiplierOracle,
    PowerOp,
    PredicateSet,
    SemigroupOp,
    SumOp,
    SymmetricGroup,
    TOp,
    TPerturbed,
    Translation,
    WeightFn,
    ZdGroup,
    apply_expr,
    conv_kernel,
    delta,
    gradient,
    inhomogeneous_apply,
    norm_restricted,
    numerical_range_sample,
    power,
    quadratic_forms,
    semigroup_apply,
    set_to_set_norm,
    t_adjoint,
    word_metric,
)
from walklab.density import DensitySequence
from walklab.errors import ConfigError

from conftest import random_elements, random_small_density


def rand_gfun(ctx, seed, radius=3, complex_vals=True):
    from walklab import ball

    elems, _ = ball(ctx, radius)
    gen = np.random.default_rng(seed)
    vals = gen.standard_normal(len(elems))
    if complex_vals:
        vals = vals + 1j * gen.standard_normal(len(elems))
    return GFunction(ctx, dict(zip(elems, vals)))


# -- basic application --------------------------------------------------------

def test_identity_atom(z1, lazy_z1):
    f = rand_gfun(z1, 0)
    assert apply_expr(TOp(delta(z1)), f).values == f.values


def test_diff_on_delta(z1):
    out = Diff(z1, (1,)).apply(GFunction.delta(z1))
    assert out.values == {(1,): 1.0, (0,): -1.0}


def test_translation_reach(heis):
    op = Translation(heis, (1, 1, 0))
    assert op.reach() == word_metric(heis, (1, 1, 0))


def test_markov_mass_and_contraction(z2, lazy_z2):
    t = TOp(lazy_z2)
    for seed in range(20):
        f = rand_gfun(z2, seed)
        tf = t.apply(f)
        assert abs(tf.total() - f.total()) < 1e-10
        for p in (1, 2, math.inf):
            assert tf.norm(p) <= f.norm(p) + 1e-12


def test_adjoint_consistency(z1, heis, lazy_z1, heis_lazy):
    for ctx, k in ((z1, lazy_z1), (heis, heis_lazy)):
        t = TOp(k)
        ts = t.adjoint()
        for seed in range(1000):
            if seed >= 25:
                break
            f1, f2 = rand_gfun(ctx, 2 * seed), rand_gfun(ctx, 2 * seed + 1)
            lhs = t.apply(f1).inner(f2)
            rhs = f1.inner(ts.apply(f2))
            assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


def test_gradient_values(z1, s4):
    assert gradient(GFunction.delta(z1), 2) == pytest.approx(math.sqrt(2))
    const = GFunction(s4, {g: 1.0 for g in s4.elements()})
    assert gradient(const, 2) == 0.0
    # tent scaling law on Z
    for R in (8, 32):
        tent = GFunction(z1, {(x,): 1 - abs(x) / R for x in range(-R + 1, R)})
        assert gradient(tent, 2) == pytest.approx(math.sqrt(2.0 / R))


def test_difference_identity_two_terms(z1, heis):
    # composite difference splits as first + shifted second
    for ctx in (z1, heis):
        for seed in range(1000):
            if seed >= 30:
                break
            g1, g2 = random_elements(ctx, 2, seed=seed + 500, radius=3)
            f = rand_gfun(ctx, seed)
            lhs = Diff(ctx, ctx.mul(g1, g2)).apply(f)
            rhs = Diff(ctx, g1).apply(f).plus(
                Translation(ctx, g1).apply(Diff(ctx, g2).apply(f)))
            keys = set(lhs.values) | set(rhs.values)
            assert max((abs(lhs.values.get(g, 0) - rhs.values.get(g, 0))
                        for g in keys), default=0.0) < 1e-12


def test_difference_identity_expansion_three_terms(z1):
    # product difference expands into singles plus all higher products
    ctx = z1
    for seed in range(10):
        g1, g2, g3 = random_elements(ctx, 3, seed=seed + 900, radius=3)
        f = rand_gfun(ctx, seed + 31)
        lhs = Diff(ctx, ctx.mul(ctx.mul(g1, g2), g3)).apply(f)
        d1, d2, d3 = (Diff(ctx, g) for g in (g1, g2, g3))
        terms = [d1.apply(f), d2.apply(f), d3.apply(f),
                 d1.apply(d2.apply(f)), d1.apply(d3.apply(f)),
                 d2.apply(d3.apply(f)),
                 d1.apply(d2.apply(d3.apply(f)))]
        rhs = terms[0]
        for t in terms[1:]:
            rhs = rhs.plus(t)
        keys = set(lhs.values) | set(rhs.values)
        assert max((abs(lhs.values.get(g, 0) - rhs.values.get(g, 0))
                    for g in keys), default=0.0) < 1e-11


def test_difference_gradient_bounds(z2, heis):
    # |diff_g f|_p <= rho(g) Gamma_p(f) and Gamma_p(L(g) f) <= 3 rho(g) Gamma_p(f)
    for ctx in (z2, heis):
        for seed in range(15):
            (g,) = random_elements(ctx, 1, seed=seed + 40, radius=4)
            rho = word_metric(ctx, g)
            if rho == 0:
                continue
            f = rand_gfun(ctx, seed)
            for p in (1, 2, math.inf):
                gp = gradient(f, p)
                assert Diff(ctx, g).apply(f).norm(p) <= rho * gp + 1e-10
                assert gradient(Translation(ctx, g).apply(f), p) \
                    <= 3 * rho * gp + 1e-10


def test_perturbed_tilted_kernel_consistency(z1, lazy_z1):
    psi = WeightFn(z1, "linear", vector=[1.0])
    for lam in (0.3, -0.7, 1.1):
        tl = TPerturbed(lazy_z1, psi, lam)
        tilted = {g: w * math.exp(lam * g[0]) for g, w in lazy_z1.weights.items()}
        for seed in range(5):
            f = rand_gfun(z1, seed + 60)
            got = tl.apply(f)
            want = {}
            for a, w in tilted.items():
                for g, v in f.values.items():
                    y = (a[0] + g[0],)
                    want[y] = want.get(y, 0j) + w * v
            assert max(abs(got.values.get(g, 0) - want.get(g, 0))
                       for g in set(got.values) | set(want)) < 1e-14


def test_weight_class_validation(z1, z2):
    psi = WeightFn(z1, "linear", vector=[2.0])  # slope 2 breaks the class
    with pytest.raises(ConfigError):
        psi.validate_on([(0,), (1,)])
    rho = WeightFn(z2, "rho")
    rho.validate_on(random_elements(z2, 50, seed=77))
    F = [(0, 0), (1, 0)]
    d = WeightFn(z2, "dist_to_set", target=F)
    d.validate_on(random_elements(z2, 50, seed=78))
    assert d((3, 0)) == 2.0


def test_quadratic_form_values(z1):
    srw = Density(z1, {(-1,): 0.5, (1,): 0.5})
    psi = WeightFn(z1, "linear", vector=[1.0])
    q, ql = quadratic_forms(srw, psi, 0.0, GFunction.delta(z1))
    assert q == pytest.approx(0.5)
    assert ql == pytest.approx(q)


def test_quadratic_form_dual_path(z1, lazy_z1):
    psi = WeightFn(z1, "linear", vector=[1.0])
    lam = 0.5
    f = GFunction.delta(z1)
    _, ql = quadratic_forms(lazy_z1, psi, lam, f)
    tilted = Density(z1, {g: w * math.exp(lam * g[0])
                          for g, w in lazy_z1.weights.items()}, check=False)
    direct = 1.0 - TOp(tilted).apply(f).norm(2) ** 2
    assert ql == pytest.approx(direct, abs=1e-14)


# -- norms ---------------------------------------------------------------------

def test_l1_norm_exact(z1, lazy_z1, drift_z1):
    for k in (lazy_z1, drift_z1):
        est = norm_restricted(TOp(k), p=1)
        assert est.kind == "exact" and est.value == pytest.approx(1.0)
        est = norm_restricted(TOp(k), p=math.inf)
        assert est.kind == "exact" and est.value == pytest.approx(1.0)


def test_restricted_norm_monotone_in_R(z1, lazy_z1):
    expr = Compose(IdentityOp(z1) - TOp(lazy_z1), PowerOp(TOp(lazy_z1), 4))
    vals = [norm_restricted(expr, p=2, sweep=[R], tol=1e-10).value
            for R in (4, 8, 16, 32)]
    for a, b in zip(vals, vals[1:]):
        assert b >= a - 1e-9


def test_restricted_norm_matches_matrix_oracle(s4):
    k = Density(s4, {g: 1 / len(s4.generators) for g in s4.generators})
    ident = IdentityOp(s4)
    expr = Compose(ident - TOp(k), PowerOp(TOp(k), 3))
    # radius large enough to cover the whole finite group
    est = norm_restricted(expr, p=2, sweep=[8], tol=1e-12)
    orc = MatrixOracle(s4)
    M = orc.markov_matrix(k)
    eye = np.eye(orc.n)
    exact = orc.operator_norm((eye - M) @ np.linalg.matrix_power(M, 3))
    assert est.value == pytest.approx(exact, abs=1e-9)


def test_restricted_norm_fourier_oracle(z1, lazy_z1):
    orc = MultiplierOracle(lazy_z1)
    t = TOp(lazy_z1)
    expr = Compose(IdentityOp(z1) - t, PowerOp(t, 16))
    est = norm_restricted(expr, p=2, sweep=[256], tol=1e-10)
    assert est.value == pytest.approx(orc.oracle_norm("(I-T)T^n", n=16), abs=1e-5)
    assert est.value <= orc.oracle_norm("(I-T)T^n", n=16) + 1e-12


def test_shift_analytic_failure(z1):
    shift = delta(z1, (1,))
    t = TOp(shift)
    expr = Compose(IdentityOp(z1) - t, PowerOp(t, 8))
    est = norm_restricted(expr, p=2, sweep=[2500], tol=1e-12)
    assert est.value == pytest.approx(2.0, abs=1e-6)


def test_free_group_kesten_value(f2):
    srw = Density(f2, {u: 0.25 for u in ("a", "A", "b", "B")})
    vals = [norm_restricted(TOp(srw), p=2, sweep=[R], tol=1e-8).value
            for R in (4, 8, 12)]
    kesten = math.sqrt(3) / 2
    for a, b in zip(vals, vals[1:]):
        assert b >= a - 1e-9
    assert vals[-1] < kesten + 1e-9
    assert vals[-1] > kesten - 0.02


def test_set_to_set_exact_value(z1, lazy_z1):
    E = PredicateSet(lambda g: g[0] >= 2, label="x>=2")
    est = set_to_set_norm(lazy_z1, 4, E, [(0,)], p=2)
    assert est.kind == "exact"
    assert est.value == pytest.approx(math.sqrt(849) / 256, abs=1e-12)


def test_set_to_set_support_zero(z1, lazy_z1):
    E = PredicateSet(lambda g: g[0] >= 5)
    assert set_to_set_norm(lazy_z1, 4, E, [(0,)], p=2).value == 0.0


def test_set_to_set_contraction(z2, lazy_z2):
    from walklab import ball

    B = ball(z2, 3)[0]
    est = set_to_set_norm(lazy_z2, 1, set(B), B, p=2)
    assert est.value <= 1.0 + 1e-12


# -- numerical range -----------------------------------------------------------

def test_numerical_range_selfadjoint_real(z1, lazy_z1):
    pts = numerical_range_sample(TOp(lazy_z1), trials=64, R=6, seed=5)
    assert all(abs(p.imag) < 1e-12 for p in pts)
    assert all(-1e-12 <= p.real <= 1.0 + 1e-12 for p in pts)


def test_numerical_range_identity(z1):
    pts = numerical_range_sample(IdentityOp(z1), trials=16, R=4, seed=1)
    assert all(abs(p - 1.0) < 1e-12 for p in pts)


def test_numerical_range_deterministic(z1, lazy_z1):
    a = numerical_range_sample(TOp(lazy_z1), trials=8, R=4, seed=42)
    b = numerical_range_sample(TOp(lazy_z1), trials=8, R=4, seed=42)
    assert a == b


# -- semigroup ------------------------------------------------------------------

def test_semigroup_t_zero(z1, lazy_z1):
    f = rand_gfun(z1, 4)
    out = semigroup_apply(lazy_z1, 0.0, f)
    assert out.values == f.values


def test_semigroup_identity_walk(z1):
    f = rand_gfun(z1, 5)
    out = semigroup_apply(delta(z1), 7.0, f, err_tol=1e-12)
    for g in f.values:
        assert abs(out.values[g] - f.values[g]) < 1e-10


def test_semigroup_vs_fourier(z1, lazy_z1):
    t = 10.0
    f = GFunction.delta(z1)
    out = semigroup_apply(lazy_z1, t, f, err_tol=1e-12)
    # oracle: inverse transform of exp(-t (1 - Khat))
    N = 512
    thetas = 2 * math.pi * np.arange(N) / N
    khat = 0.5 + 0.5 * np.cos(thetas)
    sym = np.exp(-t * (1 - khat))
    vals = np.fft.ifft(sym).real
    for j in range(-50, 51):
        assert out.values.get((j,), 0).real == pytest.approx(vals[j % N], abs=1e-8)


def test_semigroup_poisson_terms(z1, lazy_z1):
    op = SemigroupOp(lazy_z1, 10.0, err_tol=1e-12)
    op.kernel()
    assert 20 <= op.poisson_terms <= 60


# -- inhomogeneous ---------------------------------------------------------------

def test_inhomogeneous_reduces_to_power(z1, lazy_z1):
    seq = DensitySequence([lazy_z1] * 6)
    f = rand_gfun(z1, 9)
    got = inhomogeneous_apply(seq, 0, 4, f)
    want = TOp(power(lazy_z1, 4)).apply(f)
    keys = set(got.values) | set(want.values)
    assert max(abs(got.values.get(g, 0) - want.values.get(g, 0))
               for g in keys) < 1e-12


def test_inhomogeneous_kernel_is_product(z1, lazy_z1):
    kb = Density(z1, {(-1,): 1 / 3, (0,): 1 / 3, (1,): 1 / 3})
    seq = DensitySequence([lazy_z1, kb, lazy_z1, kb])
    got = inhomogeneous_apply(seq, 0, 4, GFunction.delta(z1))
    # kernel of the product equals K_4 * K_3 * K_2 * K_1
    from walklab import convolve

    prod = convolve(kb, convolve(lazy_z1, convolve(kb, lazy_z1)))
    for g, w in prod.weights.items():
        assert got.values.get(g, 0).real == pytest.approx(w, abs=1e-12)


def test_inhomogeneous_single_step(z1, lazy_z1):
    kb = Density(z1, {(-1,): 1 / 3, (0,): 1 / 3, (1,): 1 / 3})
    seq = DensitySequence([lazy_z1, kb])
    f = rand_gfun(z1, 10)
    got = inhomogeneous_apply(seq, 1, 1, f)
    want = TOp(kb).apply(f)
    assert got.values.keys() == want.values.keys()


def test_inhomogeneous_alternating_vs_fourier(z1, lazy_z1):
    kb = Density(z1, {(-1,): 1 / 3, (0,): 1 / 3, (1,): 1 / 3})
    seq = DensitySequence([lazy_z1, kb] * 2)
    got = inhomogeneous_apply(seq, 0, 4, GFunction.delta(z1))
    N = 256
    thetas = 2 * math.pi * np.arange(N) / N
    ka = 0.5 + 0.5 * np.cos(thetas)
    kbh = (1 + 2 * np.cos(thetas)) / 3
    sym = (ka * kbh) ** 2
    vals = np.fft.ifft(sym).real
    for j in range(-6, 7):
        assert got.values.get((j,), 0).real == pytest.approx(vals[j % N], abs=1e-10)


# -- cutoffs and composition ------------------------------------------------------

def test_cutoff_and_sum(z1, lazy_z1):
    f = rand_gfun(z1, 11)
    E = {(0,), (1,)}
    cut = Cutoff(z1, E)
    out = cut.apply(f)
    assert set(out.values) <= E
    s = SumOp([cut, cut]).apply(f)
    for g in out.values:
        assert s.values[g] == pytest.approx(2 * out.values[g])


def test_conv_kernel_extraction(z1, lazy_z1):
    t = TOp(lazy_z1)
    expr = Compose(IdentityOp(z1) - t, PowerOp(t, 2))
    kern = conv_kernel(expr)
    # (I-T)T^2 kernel = K^(2) - K^(3)
    k2, k3 = power(lazy_z1, 2), power(lazy_z1, 3)
    for g in set(k2.weights) | set(k3.weights):
        assert kern.values.get(g, 0).real == pytest.approx(k2[g] - k3[g], abs=1e-15)
    with pytest.raises(ConfigError):
        conv_kernel(Cutoff(z1, {(0,)}))


def test_t_adjoint_kernel(z1, drift_z1):
    ts = t_adjoint(drift_z1)
    assert ts.k.weights == {(-1,): 0.5, (0,): 1 / 3, (1,): 1 / 6}
