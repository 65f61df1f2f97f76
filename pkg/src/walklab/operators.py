"""Markov operators, difference operators, exponentially weighted
perturbations, cutoffs, semigroups, and restricted operator-norm estimation.

Operators are small syntax trees evaluated exactly on finitely supported
functions.  Restricted norms enumerate a ball large enough to contain every
light cone touched by the expression, compile the tree to vectorized index
gathers, and run a Hermitian eigensolve on expr* o expr.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .density import Density, adjoint, convolve, power
from .errors import (
    ConfigError,
    DegenerateFunction,
    GroupMismatch,
    NoConvergence,
    NoValidV,
)
from .groups import GroupContext, ball, word_metric

LIPSCHITZ_SLACK = 1e-9


# ---------------------------------------------------------------------------
# functions on the group
# ---------------------------------------------------------------------------

class GFunction:
    """Finitely supported complex-valued function on a group."""

    def __init__(self, group: GroupContext, values=None):
        self.group = group
        vals = {}
        if values:
            for g, v in (values.items() if isinstance(values, dict) else values):
                v = complex(v)
                if v != 0:
                    vals[g] = vals.get(g, 0j) + v
        self.values = vals

    @classmethod
    def delta(cls, group, g=None):
        return cls(group, {g if g is not None else group.identity: 1.0})

    def norm(self, p=2):
        if not self.values:
            return 0.0
        if p == 2:
            return math.sqrt(math.fsum(abs(v) ** 2 for v in self.values.values()))
        if p == 1:
            return math.fsum(abs(v) for v in self.values.values())
        if p == math.inf or p == "inf":
            return max(abs(v) for v in self.values.values())
        return math.fsum(abs(v) ** p for v in self.values.values()) ** (1.0 / p)

    def inner(self, other: "GFunction") -> complex:
        """(f1, f2) = sum f1 * conj(f2)."""
        if self.group != other.group:
            raise GroupMismatch("inner product across groups")
        small, big = (self, other) if len(self.values) <= len(other.values) else (other, self)
        total = 0j
        if small is self:
            for g, v in self.values.items():
                w = other.values.get(g)
                if w is not None:
                    total += v * w.conjugate()
        else:
            for g, w in other.values.items():
                v = self.values.get(g)
                if v is not None:
                    total += v * w.conjugate()
        return total

    def total(self) -> complex:
        return sum(self.values.values())

    def scaled(self, c) -> "GFunction":
        return GFunction(self.group, {g: c * v for g, v in self.values.items()})

    def plus(self, other: "GFunction", coeff=1.0) -> "GFunction":
        out = dict(self.values)
        for g, v in other.values.items():
            out[g] = out.get(g, 0j) + coeff * v
        return GFunction(self.group, out)

    def support(self):
        return list(self.values)

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"<GFunction |supp|={len(self.values)}>"


def gradient(f: GFunction, p=2) -> float:
    """Gamma_p(f): max over generators u != e of ||L(u)f - f||_p."""
    ctx = f.group
    best = 0.0
    for u in ctx.generators:
        if u == ctx.identity:
            continue
        shifted = GFunction(ctx, {ctx.mul(u, g): v for g, v in f.values.items()})
        best = max(best, shifted.plus(f, -1.0).norm(p))
    return best


# ---------------------------------------------------------------------------
# weight functions (the 1-Lipschitz class)
# ---------------------------------------------------------------------------

class WeightFn:
    """Real weight on the group with Lipschitz constant <= 1 along generators.

    Kinds: "rho" (distance to identity), "dist_to_set" (distance to a finite
    set), "linear" (pairing with the abelianization).  The Lipschitz property
    is asserted lazily on every element actually evaluated.
    """

    def __init__(self, group: GroupContext, kind, target=None, vector=None):
        self.group = group
        self.kind = kind
        if kind == "rho":
            self._eval = lambda g: float(word_metric(group, g))
            self.label = "rho"
        elif kind == "dist_to_set":
            F = list(target)
            if not F:
                raise ConfigError("dist_to_set needs a nonempty finite set")
            invs = [group.inv(h) for h in F]
            self._eval = lambda g: float(
                min(word_metric(group, group.mul(g, hinv)) for hinv in invs))
            self.label = f"dist_to_set({len(F)} pts)"
        elif kind == "linear":
            w = tuple(float(x) for x in vector)
            if len(w) != group.rank:
                raise ConfigError("linear weight length must equal the abelian rank")
            self._eval = lambda g: float(
                sum(a * b for a, b in zip(w, group.abelianize(g))))
            self.label = f"linear{w}"
        else:
            raise ConfigError(f"unknown weight kind {kind!r}")

    def __call__(self, g):
        return self._eval(g)

    def validate_on(self, elements):
        """Assert |psi(u^-1 g) - psi(g)| <= 1 on the visited elements."""
        ctx = self.group
        for g in elements:
            base = self._eval(g)
            for u in ctx.generators:
                if u == ctx.identity:
                    continue
                step = self._eval(ctx.mul(ctx.inv(u), g))
                if abs(step - base) > 1.0 + LIPSCHITZ_SLACK:
                    raise ConfigError(
                        f"weight {self.label} violates the Lipschitz class at {g!r}")


class PredicateSet:
    """Membership-only set, e.g. a half space intersected with a stated ball."""

    def __init__(self, fn, label="predicate"):
        self.fn = fn
        self.label = label

    def __contains__(self, g):
        return bool(self.fn(g))


# ---------------------------------------------------------------------------
# operator expressions
# ---------------------------------------------------------------------------

class OperatorExpr:
    """Node of an operator syntax tree; evaluation is linear and exact."""

    group: GroupContext | None = None

    def apply(self, f: GFunction) -> GFunction:
        raise NotImplementedError

    def adjoint(self) -> "OperatorExpr":
        raise NotImplementedError

    def reach(self) -> int:
        """Max word-metric displacement of support under one application."""
        raise NotImplementedError

    def is_convolution(self) -> bool:
        return False

    def is_real(self) -> bool:
        return True

    # algebra
    def __mul__(self, other):
        if isinstance(other, OperatorExpr):
            return Compose(self, other)
        return Scaled(other, self)

    __rmul__ = lambda self, c: Scaled(c, self)

    def __add__(self, other):
        return SumOp([self, other])

    def __sub__(self, other):
        return SumOp([self, Scaled(-1.0, other)])

    def __pow__(self, n):
        return PowerOp(self, n)


class IdentityOp(OperatorExpr):
    def __init__(self, group):
        self.group = group

    def apply(self, f):
        return f

    def adjoint(self):
        return self

    def reach(self):
        return 0

    def is_convolution(self):
        return True


class TOp(OperatorExpr):
    """Convolution by a density: (Tf)(y) = sum_x K(x) f(x^-1 y)."""

    def __init__(self, k: Density):
        self.k = k
        self.group = k.group
        self._reach = None

    def apply(self, f):
        _check_group(self, f)
        mul = self.group.mul
        out = {}
        for a, w in self.k.weights.items():
            for g, v in f.values.items():
                y = mul(a, g)
                out[y] = out.get(y, 0j) + w * v
        return GFunction(self.group, out)

    def adjoint(self):
        return TOp(adjoint(self.k))

    def reach(self):
        if self._reach is None:
            self._reach = self.k.max_step()
        return self._reach

    def is_convolution(self):
        return True


def t_adjoint(k: Density) -> TOp:
    """Convolution by K*(g) = K(g^-1)."""
    return TOp(adjoint(k))


class TPerturbed(OperatorExpr):
    """Conjugated operator e^{lam psi} T e^{-lam psi}."""

    def __init__(self, k: Density, psi: WeightFn, lam: float, validate=True):
        self.k = k
        self.psi = psi
        self.lam = float(lam)
        self.group = k.group
        self.validate = validate

    def apply(self, f):
        _check_group(self, f)
        mul = self.group.mul
        psi = self.psi
        lam = self.lam
        if self.validate:
            psi.validate_on(f.values)
        out = {}
        psival = {g: psi(g) for g in f.values}
        for a, w in self.k.weights.items():
            for g, v in f.values.items():
                y = mul(a, g)
                out[y] = out.get(y, 0j) + w * math.exp(lam * (psi(y) - psival[g])) * v
        return GFunction(self.group, out)

    def adjoint(self):
        return TPerturbed(adjoint(self.k), self.psi, -self.lam, validate=self.validate)

    def reach(self):
        return self.k.max_step()

    def is_convolution(self):
        # a linear weight on an abelian lattice tilts the kernel pointwise
        from .groups import ZdGroup

        return isinstance(self.group, ZdGroup) and self.psi.kind == "linear"


class Diff(OperatorExpr):
    """Difference operator L(g) - I."""

    def __init__(self, group, g):
        self.group = group
        self.g = g

    def apply(self, f):
        _check_group(self, f)
        mul = self.group.mul
        out = {mul(self.g, h): v for h, v in f.values.items()}
        res = GFunction(self.group, out)
        return res.plus(f, -1.0)

    def adjoint(self):
        return Diff(self.group, self.group.inv(self.g))

    def reach(self):
        return word_metric(self.group, self.g)

    def is_convolution(self):
        return True


class Translation(OperatorExpr):
    """Left translation L(g): (L(g)f)(h) = f(g^-1 h)."""

    def __init__(self, group, g):
        self.group = group
        self.g = g

    def apply(self, f):
        _check_group(self, f)
        mul = self.group.mul
        return GFunction(self.group, {mul(self.g, h): v for h, v in f.values.items()})

    def adjoint(self):
        return Translation(self.group, self.group.inv(self.g))

    def reach(self):
        return word_metric(self.group, self.g)

    def is_convolution(self):
        return True


class Cutoff(OperatorExpr):
    """Pointwise multiplication by the indicator of a set."""

    def __init__(self, group, region, label="E"):
        self.group = group
        self.region = region
        self.label = label

    def apply(self, f):
        _check_group(self, f)
        return GFunction(self.group,
                         {g: v for g, v in f.values.items() if g in self.region})

    def adjoint(self):
        return self

    def reach(self):
        return 0


class SemigroupOp(OperatorExpr):
    """e^{-t(I-T)} realized through a Poisson-truncated kernel."""

    def __init__(self, k: Density, t: float, err_tol=1e-12):
        if t < 0:
            raise ConfigError("semigroup time must be >= 0")
        self.k = k
        self.t = float(t)
        self.err_tol = err_tol
        self.group = k.group
        self._kernel = None
        self._k0 = None

    def kernel(self):
        if self._kernel is None:
            self._kernel, self._k0 = semigroup_kernel(self.k, self.t, self.err_tol)
        return self._kernel

    @property
    def poisson_terms(self):
        self.kernel()
        return self._k0

    def apply(self, f):
        _check_group(self, f)
        if self.t == 0.0:
            return f
        mul = self.group.mul
        out = {}
        for a, w in self.kernel().items():
            for g, v in f.values.items():
                y = mul(a, g)
                out[y] = out.get(y, 0j) + w * v
        return GFunction(self.group, out)

    def adjoint(self):
        return SemigroupOp(adjoint(self.k), self.t, self.err_tol)

    def reach(self):
        if self.t == 0.0:
            return 0
        self.kernel()
        return self._k0 * self.k.max_step()

    def is_convolution(self):
        return True


class InhomProduct(OperatorExpr):
    """T_{m+n} ... T_{m+1}: the n-step inhomogeneous evolution after time m."""

    def __init__(self, seq, m: int, n: int):
        if m < 0 or n < 1 or m + n > len(seq):
            raise ConfigError("need 0 <= m, 1 <= n, m+n <= len(seq)")
        self.seq = seq
        self.m = m
        self.n = n
        self.group = seq.group

    def factors(self):
        return [TOp(self.seq[i]) for i in range(self.m, self.m + self.n)]

    def apply(self, f):
        for op in self.factors():
            f = op.apply(f)
        return f

    def adjoint(self):
        ops = [op.adjoint() for op in reversed(self.factors())]
        expr = ops[0]
        for op in ops[1:]:
            expr = Compose(op, expr)
        return expr

    def reach(self):
        return sum(k.max_step() for k in self.seq.densities[self.m:self.m + self.n])

    def is_convolution(self):
        return True


class Scaled(OperatorExpr):
    def __init__(self, c, expr):
        self.c = complex(c)
        self.expr = expr
        self.group = expr.group

    def apply(self, f):
        return self.expr.apply(f).scaled(self.c)

    def adjoint(self):
        return Scaled(self.c.conjugate(), self.expr.adjoint())

    def reach(self):
        return self.expr.reach()

    def is_convolution(self):
        return self.expr.is_convolution()

    def is_real(self):
        return self.c.imag == 0 and self.expr.is_real()


class SumOp(OperatorExpr):
    def __init__(self, exprs):
        self.exprs = list(exprs)
        self.group = self.exprs[0].group

    def apply(self, f):
        out = self.exprs[0].apply(f)
        for e in self.exprs[1:]:
            out = out.plus(e.apply(f))
        return out

    def adjoint(self):
        return SumOp([e.adjoint() for e in self.exprs])

    def reach(self):
        return max(e.reach() for e in self.exprs)

    def is_convolution(self):
        return all(e.is_convolution() for e in self.exprs)

    def is_real(self):
        return all(e.is_real() for e in self.exprs)


class Compose(OperatorExpr):
    """Compose(a, b) f = a(b(f))."""

    def __init__(self, a, b):
        self.a = a
        self.b = b
        self.group = a.group

    def apply(self, f):
        return self.a.apply(self.b.apply(f))

    def adjoint(self):
        return Compose(self.b.adjoint(), self.a.adjoint())

    def reach(self):
        return self.a.reach() + self.b.reach()

    def is_convolution(self):
        return self.a.is_convolution() and self.b.is_convolution()

    def is_real(self):
        return self.a.is_real() and self.b.is_real()


class PowerOp(OperatorExpr):
    def __init__(self, expr, n):
        if n < 0:
            raise ConfigError("operator power must be >= 0")
        self.expr = expr
        self.n = int(n)
        self.group = expr.group

    def apply(self, f):
        if isinstance(self.expr, TOp) and self.n >= 1:
            # collapse to a single convolution by the cached power kernel
            return TOp(power(self.expr.k, self.n)).apply(f) if self.n > 1 \
                else self.expr.apply(f)
        for _ in range(self.n):
            f = self.expr.apply(f)
        return f

    def adjoint(self):
        return PowerOp(self.expr.adjoint(), self.n)

    def reach(self):
        return self.n * self.expr.reach()

    def is_convolution(self):
        return self.expr.is_convolution()

    def is_real(self):
        return self.expr.is_real()


def _check_group(expr, f):
    if expr.group != f.group:
        raise GroupMismatch("operator and function on different groups")


def apply_expr(expr: OperatorExpr, f: GFunction) -> GFunction:
    """Exact sparse evaluation of an operator expression."""
    return expr.apply(f)


def conv_kernel(expr: OperatorExpr) -> GFunction:
    """Kernel of a convolution expression (its action on the point mass)."""
    if not expr.is_convolution():
        raise ConfigError("expression is not a convolution operator")
    return expr.apply(GFunction.delta(expr.group))


def quadratic_forms(k: Density, psi: WeightFn, lam: float, f: GFunction):
    """Q(f) = ||f||^2 - ||Tf||^2 and its perturbed counterpart."""
    if f.norm(2) == 0:
        raise DegenerateFunction("quadratic form of the zero function")
    t = TOp(k)
    tf = t.apply(f)
    q = f.norm(2) ** 2 - tf.norm(2) ** 2
    tl = TPerturbed(k, psi, lam)
    tlf = tl.apply(f)
    ql = f.norm(2) ** 2 - tlf.norm(2) ** 2
    return q, ql


def semigroup_kernel(k: Density, t: float, err_tol=1e-12):
    """Poisson-averaged kernel e^{-t} sum t^j/j! K^(j), truncated so the
    discarded mass is < err_tol.  Returns (dict kernel, cutoff index)."""
    if t == 0.0:
        return {k.group.identity: 1.0}, 0
    # cutoff from the Poisson tail
    terms = []
    p = math.exp(-t)
    total = p
    j = 0
    while total < 1.0 - err_tol:
        j += 1
        p *= t / j
        total += p
        if j > 100000:
            raise ConfigError("Poisson cutoff did not stabilize")
    k0 = j
    weights = np.zeros(k0 + 1)
    weights[0] = math.exp(-t)
    for i in range(1, k0 + 1):
        weights[i] = weights[i - 1] * t / i
    out = {k.group.identity: weights[0]}
    cur = None
    for i in range(1, k0 + 1):
        cur = k if cur is None else convolve(cur, k)
        for g, v in cur.weights.items():
            out[g] = out.get(g, 0.0) + weights[i] * v
    return out, k0


def semigroup_apply(k: Density, t: float, f: GFunction, err_tol=1e-12) -> GFunction:
    """Apply e^{-t(I-T)} with Poisson-tail truncation below err_tol."""
    return SemigroupOp(k, t, err_tol).apply(f)


def inhomogeneous_apply(seq, m: int, n: int, f: GFunction) -> GFunction:
    """Left-to-right application T_{m+n}( ... (T_{m+1} f))."""
    return InhomProduct(seq, m, n).apply(f)


# ---------------------------------------------------------------------------
# minorant and spectral region
# ---------------------------------------------------------------------------

def in_lambda_delta(lam, delta, tol=0.0) -> bool:
    """Is lam within distance 1 - delta of the real segment [0, delta]?"""
    z = complex(lam)
    x = min(max(z.real, 0.0), delta)
    return abs(z - x) <= (1.0 - delta) + tol


def delta_minorant(k: Density, W):
    """Greedy symmetric V containing e with V.V inside W, and the largest
    eps with eps*(chi_V * chi_V) <= K pointwise.

    Returns (delta, V, eps) with delta the minorant mass eps*|V|^2.
    """
    ctx = k.group
    wset = set(W)
    if ctx.identity not in wset:
        raise NoValidV("W does not contain the identity")

    def vv_ok(vset):
        prods = set()
        for a in vset:
            for b in vset:
                prods.add(ctx.mul(a, b))
        if not prods <= wset:
            return None
        if any(k[g] <= 0.0 for g in prods):
            return None
        return prods

    V = {ctx.identity}
    if vv_ok(V) is None:
        raise NoValidV("K vanishes at the identity and no symmetric V exists")
    candidates = sorted((g for g in wset if g != ctx.identity), key=ctx.sort_key)
    seen = set()
    for g in candidates:
        if g in seen:
            continue
        pair = {g, ctx.inv(g)}
        seen |= pair
        trial = V | pair
        if vv_ok(trial) is not None:
            V = trial
    # chi_V * chi_V counts |V intersect gV|
    counts = {}
    for a in V:
        for b in V:
            g = ctx.mul(a, b)
            counts[g] = counts.get(g, 0) + 1
    eps = min(k[g] / c for g, c in counts.items())
    delta = eps * sum(counts.values())  # = eps * |V|^2
    return delta, sorted(V, key=ctx.sort_key), eps


# ---------------------------------------------------------------------------
# dense evaluation over an enumerated ball
# ---------------------------------------------------------------------------

class BallSpace:
    """Enumerated ball domain with gather tables for group translations.

    Element order is (distance, canonical key), so B_r is a prefix of the
    enumeration for every r <= radius.  Index len(elements) is a zero pad
    for images that leave the domain; values parked there never re-enter
    any light cone that matters (the domain is chosen to absorb them).
    """

    def __init__(self, ctx: GroupContext, radius: int):
        self.ctx = ctx
        self.radius = radius
        elems, counts = ball(ctx, radius)
        self.elements = elems
        self.counts = counts
        self.index = {g: i for i, g in enumerate(elems)}
        self.pad = len(elems)
        self._tables = {}
        self._psi_arrays = {}

    def prefix_size(self, r):
        if r > self.radius:
            raise ConfigError("prefix radius exceeds the space radius")
        return self.counts[r]

    def lookup(self, h):
        """Index array i -> index of h * x_i (pad when outside)."""
        tab = self._tables.get(h)
        if tab is None:
            mul = self.ctx.mul
            idx = self.index
            pad = self.pad
            tab = np.fromiter(
                (idx.get(mul(h, x), pad) for x in self.elements),
                dtype=np.int64, count=len(self.elements))
            self._tables[h] = tab
        return tab

    def psi_values(self, psi: WeightFn, validate=True):
        key = (psi.kind, psi.label)
        arr = self._psi_arrays.get(key)
        if arr is None:
            arr = np.fromiter((psi(x) for x in self.elements),
                              dtype=float, count=len(self.elements))
            if validate:
                base = np.append(arr, 0.0)
                for u in self.ctx.generators:
                    if u == self.ctx.identity:
                        continue
                    tab = self.lookup(self.ctx.inv(u))
                    vals = base[tab]
                    ok = (tab != self.pad)
                    if np.any(np.abs(vals[ok] - arr[ok]) > 1.0 + LIPSCHITZ_SLACK):
                        raise ConfigError(
                            f"weight {psi.label} violates the Lipschitz class")
            self._psi_arrays[key] = arr
        return arr

    def vector_from(self, f: GFunction, dtype=complex):
        v = np.zeros(self.pad + 1, dtype=dtype)
        for g, val in f.values.items():
            i = self.index.get(g)
            if i is None:
                raise ConfigError("function support leaves the ball space")
            v[i] = val if dtype == complex else val.real
        return v

    def function_from(self, vec) -> GFunction:
        vals = {}
        for i in np.nonzero(vec[:-1])[0]:
            vals[self.elements[i]] = vec[i]
        return GFunction(self.ctx, vals)


def compile_dense(expr: OperatorExpr, space: BallSpace, dtype):
    """Compile an expression to a vectorized function on the ball space."""
    ctx = space.ctx

    if isinstance(expr, IdentityOp):
        return lambda v: v
    if isinstance(expr, TOp) or isinstance(expr, SemigroupOp):
        if isinstance(expr, TOp):
            items = list(expr.k.weights.items())
        else:
            if expr.t == 0.0:
                return lambda v: v
            items = sorted(expr.kernel().items(), key=lambda kv: ctx.sort_key(kv[0]))
        tables = [(space.lookup(ctx.inv(a)), w) for a, w in items]

        def run_conv(v):
            out = np.zeros_like(v)
            for tab, w in tables:
                out[:-1] += w * v[tab]
            out[-1] = 0
            return out
        return run_conv
    if isinstance(expr, TPerturbed):
        # per-edge factors exp(lam*(psi(y) - psi(a^-1 y))) stay bounded by
        # exp(|lam| rho(a)); the outer conjugation would overflow on large balls
        psi = space.psi_values(expr.psi, validate=expr.validate)
        lam = expr.lam
        tables = []
        for a, w in expr.k.weights.items():
            tab = space.lookup(ctx.inv(a))
            inside = tab != space.pad
            factor = np.zeros(len(psi))
            factor[inside] = np.exp(lam * (psi[inside] - psi[tab[inside]]))
            tables.append((tab, w * factor))

        def run_pert(v):
            out = np.zeros_like(v)
            for tab, wf in tables:
                out[:-1] += wf * v[tab]
            out[-1] = 0
            return out
        return run_pert
    if isinstance(expr, Diff):
        tab = space.lookup(ctx.inv(expr.g))

        def run_diff(v):
            out = np.zeros_like(v)
            out[:-1] = v[tab] - v[:-1]
            out[-1] = 0
            return out
        return run_diff
    if isinstance(expr, Translation):
        tab = space.lookup(ctx.inv(expr.g))

        def run_shift(v):
            out = np.zeros_like(v)
            out[:-1] = v[tab]
            out[-1] = 0
            return out
        return run_shift
    if isinstance(expr, Cutoff):
        mask = np.fromiter((x in expr.region for x in space.elements),
                           dtype=bool, count=len(space.elements))
        mask = np.append(mask, False)
        return lambda v: np.where(mask, v, 0.0 if dtype is not complex else 0j)
    if isinstance(expr, Scaled):
        inner = compile_dense(expr.expr, space, dtype)
        c = expr.c if dtype is complex else expr.c.real
        return lambda v: c * inner(v)
    if isinstance(expr, SumOp):
        parts = [compile_dense(e, space, dtype) for e in expr.exprs]

        def run_sum(v):
            out = parts[0](v)
            for p in parts[1:]:
                out = out + p(v)
            return out
        return run_sum
    if isinstance(expr, Compose):
        fa = compile_dense(expr.a, space, dtype)
        fb = compile_dense(expr.b, space, dtype)
        return lambda v: fa(fb(v))
    if isinstance(expr, PowerOp):
        inner = compile_dense(expr.expr, space, dtype)
        n = expr.n

        def run_pow(v):
            for _ in range(n):
                v = inner(v)
            return v
        return run_pow
    if isinstance(expr, InhomProduct):
        parts = [compile_dense(op, space, dtype) for op in expr.factors()]

        def run_prod(v):
            for p in parts:
                v = p(v)
            return v
        return run_prod
    raise ConfigError(f"cannot compile {type(expr).__name__}")


# ---------------------------------------------------------------------------
# restricted operator norms
# ---------------------------------------------------------------------------

@dataclass
class NormEstimate:
    """Operator norm value with provenance.

    kind is "exact" (kernel norms, dense solves), "iterated" (Hermitian
    eigensolve on a restricted domain; a certified lower bound of the group
    norm), or "restricted_lower" (sampled lower bound).
    """

    value: float
    kind: str
    p: float | str = 2
    R: int | None = None
    tol: float | None = None
    iterations: int | None = None
    sweep: list = field(default_factory=list)

    def to_json(self):
        return {
            "value": self.value,
            "kind": self.kind,
            "p": str(self.p),
            "R": self.R,
            "tol": self.tol,
            "iterations": self.iterations,
            "sweep": self.sweep,
        }


DEFAULT_R_SWEEP = (8, 12, 16, 24)
DENSE_EIG_CUTOFF = 160
POWER_ITER_MAX = 5000


_space_lock = threading.Lock()


def _spaces_cache(ctx):
    # one shared space per (group, radius); grow by replacing with a bigger one
    if not hasattr(ctx, "_ball_spaces"):
        ctx._ball_spaces = {}
    return ctx._ball_spaces


def get_ball_space(ctx: GroupContext, radius: int) -> BallSpace:
    with _space_lock:
        cache = _spaces_cache(ctx)
        best = cache.get("space")
        if best is None or best.radius < radius:
            best = BallSpace(ctx, radius)
            cache["space"] = best
        return best


KERNEL_TRUNC = 1e-12  # certified: dropping l1 mass eps moves the norm by <= eps


def _banded_norm2_z1(expr: OperatorExpr, R: int, tol=1e-10):
    """Exact restricted 2-norm for a convolution expression on Z.

    P (A*A) P on [-R, R] is the Toeplitz section of the autocorrelation
    kernel; its top eigenvalue comes from LAPACK's banded solver for small
    sections and from Rayleigh-quotient iteration with banded solves for
    large ones (the top of the spectrum clusters as R grows, which plain
    Krylov methods handle poorly).
    """
    kern = conv_kernel(expr)
    if not kern.values:
        return 0.0
    pts = {g[0]: v for g, v in kern.values.items()}
    # drop negligible kernel tail; l1 mass eps perturbs the norm by <= eps
    order = sorted(pts, key=lambda x: abs(pts[x]))
    dropped = 0.0
    for x in order:
        if dropped + abs(pts[x]) > KERNEL_TRUNC or len(pts) <= 2:
            break
        dropped += abs(pts[x])
        del pts[x]
    # autocorrelation c(m) = sum_b conj(kappa(b)) kappa(m+b)
    c = {}
    for b1, v1 in pts.items():
        for b2, v2 in pts.items():
            m = b2 - b1
            c[m] = c.get(m, 0j) + np.conj(v1) * v2
    nB = 2 * R + 1
    width = max(abs(m) for m in c)
    is_real = all(abs(v.imag) < 1e-300 for v in c.values())
    dtype = float if is_real else complex
    a_band = np.zeros((width + 1, nB), dtype=dtype)
    for m, v in c.items():
        if m < 0:
            continue
        row = v.real if is_real else v
        a_band[m, : nB - m if m else nB] = row
    if nB * nB * (width + 1) <= 4_000_000_000:
        from scipy.linalg import eig_banded

        vals = eig_banded(a_band, lower=True, eigvals_only=True,
                          select="i", select_range=(nB - 1, nB - 1))
        return math.sqrt(max(float(vals[0]), 0.0))
    return math.sqrt(max(_toeplitz_top_rqi(c, nB, dtype, tol=max(tol, 1e-8)), 0.0))


def _toeplitz_top_rqi(c, nB, dtype, tol=1e-10):
    """Top eigenvalue of a banded Hermitian Toeplitz section.

    Warm start from the analytic near-maximizer (a sine-windowed wave at the
    symbol's argmax, the known shape of the top eigenvector of a Toeplitz
    section with smooth symbol), then Rayleigh-quotient iteration with
    banded LU solves.  For Hermitian matrices |theta - lambda| <= residual.
    """
    from scipy.linalg import solve_banded
    from scipy.sparse import dia_matrix

    offsets = sorted(c)
    data = np.zeros((len(offsets), nB), dtype=dtype)
    for i, m in enumerate(offsets):
        data[i, :] = c[m].real if dtype is float else c[m]
    M = dia_matrix((data, offsets), shape=(nB, nB)).tocsr()
    width = max(abs(m) for m in offsets)

    # symbol F(theta) = sum_m c(m) e^{im theta} is real; locate its argmax
    grid = np.linspace(0.0, math.pi, 1 << 13)
    F = np.zeros_like(grid)
    for m in offsets:
        F += (c[m] * np.exp(1j * m * grid)).real
    theta_star = float(grid[np.argmax(F)])

    pos = np.arange(nB, dtype=float)
    window = np.sin(math.pi * (pos + 1.0) / (nB + 1.0))
    centered = pos - (nB - 1) / 2.0
    candidates = []
    if dtype is float:
        candidates.append(window * np.cos(theta_star * centered))
        if theta_star > 1e-9:
            candidates.append(window * np.sin(theta_star * centered))
    else:
        candidates.append((window * np.exp(1j * theta_star * centered)).astype(complex))

    def rayleigh(v):
        return float(np.real(np.vdot(v, M @ v)))

    best = None
    for v in candidates:
        v = v / np.linalg.norm(v)
        r = rayleigh(v)
        if best is None or r > best[0]:
            best = (r, v)
    theta, x = best

    lu_band = np.zeros((2 * width + 1, nB), dtype=dtype)
    for m in offsets:
        v = c[m].real if dtype is float else c[m]
        row = width - m
        if m >= 0:
            lu_band[row, m:] = v
        else:
            lu_band[row, :m] = v
    ident_row = width
    base_diag = lu_band[ident_row].copy()
    for _ in range(10):
        lu_band[ident_row] = base_diag - theta
        try:
            y = solve_banded((width, width), lu_band, x)
        except np.linalg.LinAlgError:
            break
        x = y / np.linalg.norm(y)
        new_theta = rayleigh(x)
        resid = float(np.linalg.norm(M @ x - new_theta * x))
        theta = new_theta
        if resid <= tol * max(abs(new_theta), 1e-300):
            break
    return theta


def restricted_norm2_single(expr: OperatorExpr, R: int, tol=1e-8, seed=0,
                            maxiter=None):
    """||expr restricted to functions supported in B_R||_2 via expr* o expr.

    Exact up to the eigensolver tolerance for the restricted operator; a
    monotone lower bound of the full norm.
    """
    from .groups import ZdGroup

    ctx = expr.group
    if isinstance(ctx, ZdGroup) and ctx.d == 1 and expr.is_convolution():
        return _banded_norm2_z1(expr, R), None
    reach = expr.reach()
    space = get_ball_space(ctx, R + reach)
    dtype = float if expr.is_real() else complex
    fwd = compile_dense(expr, space, dtype)
    adj = compile_dense(expr.adjoint(), space, dtype)
    nB = space.prefix_size(R)
    pad = space.pad

    def matvec(v):
        x = np.zeros(pad + 1, dtype=dtype)
        x[:nB] = v.reshape(-1)
        y = adj(fwd(x))
        return y[:nB]

    if nB <= DENSE_EIG_CUTOFF:
        M = np.zeros((nB, nB), dtype=dtype)
        eye = np.eye(nB, dtype=dtype)
        for j in range(nB):
            M[:, j] = matvec(eye[:, j])
        M = 0.5 * (M + M.conj().T)
        vals = np.linalg.eigvalsh(M)
        return math.sqrt(max(float(vals[-1]), 0.0)), nB
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(nB)
    if dtype is complex:
        v0 = v0 + 1j * rng.standard_normal(nB)
    op = LinearOperator((nB, nB), matvec=matvec, dtype=dtype)
    ncv = min(nB - 1, 10 if nB > 100_000 else 20)
    try:
        vals = eigsh(op, k=1, which="LA", v0=v0, tol=tol,
                     maxiter=maxiter or max(8 * nB, 1000), ncv=ncv,
                     return_eigenvectors=False)
        return math.sqrt(max(float(vals[0]), 0.0)), None
    except ArpackNoConvergence:
        pass
    # plain power iteration fallback with a Rayleigh-quotient stop
    v = v0 / np.linalg.norm(v0)
    last = 0.0
    for it in range(POWER_ITER_MAX):
        w = matvec(v)
        rayleigh = float(np.real(np.vdot(v, w)))
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0, it
        v = w / nrm
        if it > 2 and abs(rayleigh - last) <= tol * max(abs(rayleigh), 1e-300):
            return math.sqrt(max(rayleigh, 0.0)), it
        last = rayleigh
    raise NoConvergence(POWER_ITER_MAX,
                        (math.sqrt(max(last, 0.0)), math.sqrt(max(rayleigh, 0.0))))


def norm_restricted(expr: OperatorExpr, p=2, R=None, tol=1e-8,
                    sweep=None, sweep_tol=1e-3, seed=0) -> NormEstimate:
    """Operator norm over functions supported in balls, with an R-sweep.

    p=1 and p=inf are exact (kernel norms for convolution expressions,
    column/row sums restricted to B_R otherwise); p=2 runs the Hermitian
    eigensolve; any other p reports a sampled lower bound.
    """
    if p in (1, math.inf, "inf"):
        if expr.is_convolution():
            kern = conv_kernel(expr)
            return NormEstimate(value=kern.norm(1), kind="exact", p=p)
        return _restricted_norm_1inf(expr, p, R or DEFAULT_R_SWEEP[-1])
    if p == 2:
        radii = list(sweep) if sweep is not None else \
            [r for r in DEFAULT_R_SWEEP if R is None or r <= R]
        if R is not None and (not radii or radii[-1] < R):
            radii.append(R)
        values = []
        iters = None
        for r in radii:
            val, iters = restricted_norm2_single(expr, r, tol=tol, seed=seed)
            values.append({"R": r, "value": val})
            if len(values) >= 2:
                prev = values[-2]["value"]
                if abs(val - prev) <= sweep_tol * max(abs(val), 1e-300):
                    break
        return NormEstimate(value=values[-1]["value"], kind="iterated", p=2,
                            R=values[-1]["R"], tol=tol, iterations=iters,
                            sweep=values)
    return _sampled_norm(expr, p, R or DEFAULT_R_SWEEP[-1], seed)


def _restricted_norm_1inf(expr, p, R):
    ctx = expr.group
    elems, _ = ball(ctx, R)
    if p == 1:
        best = 0.0
        for h in elems:
            best = max(best, expr.apply(GFunction.delta(ctx, h)).norm(1))
        return NormEstimate(value=best, kind="restricted_lower", p=1, R=R)
    rows = {}
    for h in elems:
        col = expr.apply(GFunction.delta(ctx, h))
        for y, v in col.values.items():
            rows[y] = rows.get(y, 0.0) + abs(v)
    value = max(rows.values()) if rows else 0.0
    return NormEstimate(value=value, kind="restricted_lower", p=math.inf, R=R)


def _sampled_norm(expr, p, R, seed, trials=32):
    ctx = expr.group
    elems, _ = ball(ctx, R)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(trials):
        vals = rng.standard_normal(len(elems)) + 1j * rng.standard_normal(len(elems))
        f = GFunction(ctx, dict(zip(elems, vals)))
        nf = f.norm(p)
        if nf == 0:
            continue
        best = max(best, expr.apply(f).norm(p) / nf)
    return NormEstimate(value=best, kind="restricted_lower", p=p, R=R)


def set_to_set_norm(k: Density, n: int, E, F, p=2) -> NormEstimate:
    """Norm of f -> chi_E (K^(n) * (chi_F f)) for finite F; exact for
    p in {1, 2, inf}."""
    ctx = k.group
    F = list(F)
    if not F:
        return NormEstimate(value=0.0, kind="exact", p=p)
    kn = power(k, n)
    cols = []
    for h in F:
        col = TOp(kn).apply(GFunction.delta(ctx, h))
        cols.append({g: v for g, v in col.values.items() if g in E})
    if p == 2:
        m = len(F)
        gram = np.zeros((m, m), dtype=complex)
        for i in range(m):
            for j in range(i, m):
                s = 0j
                small = cols[i] if len(cols[i]) <= len(cols[j]) else cols[j]
                other = cols[j] if small is cols[i] else cols[i]
                for g in small:
                    if g in other:
                        s += cols[i][g] * np.conj(cols[j][g])
                gram[i, j] = s
                gram[j, i] = np.conj(s)
        vals = np.linalg.eigvalsh(gram)
        return NormEstimate(value=math.sqrt(max(float(vals[-1]), 0.0)),
                            kind="exact", p=2)
    if p == 1:
        value = max(math.fsum(abs(v) for v in col.values()) if col else 0.0
                    for col in cols)
        return NormEstimate(value=value, kind="exact", p=1)
    if p in (math.inf, "inf"):
        rows = {}
        for col in cols:
            for g, v in col.items():
                rows[g] = rows.get(g, 0.0) + abs(v)
        return NormEstimate(value=max(rows.values()) if rows else 0.0,
                            kind="exact", p=math.inf)
    # sampled lower bound on the F-supported domain
    rng = np.random.default_rng(0)
    best = 0.0
    for _ in range(64):
        coef = rng.standard_normal(len(F)) + 1j * rng.standard_normal(len(F))
        f = GFunction(ctx, dict(zip(F, coef)))
        nf = f.norm(p)
        out = {}
        for c, col in zip(coef, cols):
            for g, v in col.items():
                out[g] = out.get(g, 0j) + c * v
        best = max(best, GFunction(ctx, out).norm(p) / nf)
    return NormEstimate(value=best, kind="restricted_lower", p=p)


def numerical_range_sample(expr: OperatorExpr, trials: int, R: int, seed=0):
    """(Sf, f) for seeded random unit f supported in B_R."""
    ctx = expr.group
    elems, _ = ball(ctx, R)
    rng = np.random.default_rng(seed)
    points = []
    for _ in range(trials):
        vals = rng.standard_normal(len(elems)) + 1j * rng.standard_normal(len(elems))
        vals /= np.linalg.norm(vals)
        f = GFunction(ctx, dict(zip(elems, vals)))
        points.append(complex(expr.apply(f).inner(f)))
    return points
