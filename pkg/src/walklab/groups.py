"""Concrete finitely generated groups with word metrics and abelianization.

Each group carries a canonical element encoding (equal elements encode
identically), a finite symmetric generating set containing the identity,
and a breadth-first word-metric table grown on demand.  Distances use the
Cayley-graph convention dist(e) = 0.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import BudgetExceeded, ConfigError
from .reporting import FitReport, loglog_fit, semilog_fit

DEFAULT_BFS_CAP = 1 << 26  # stored elements


# ---------------------------------------------------------------------------
# group contexts
# ---------------------------------------------------------------------------

class GroupContext:
    """A finitely generated group: multiplication, inversion, encodings.

    Subclasses fix the element representation. Elements must be hashable
    and two elements are equal iff their encodings are identical.
    """

    kind = "abstract"
    is_finite = False
    order = None
    #: torsion-free abelianization rank (q, r); q = 0 for discrete groups
    abelianization_rank = (0, 0)
    #: constant modular function (discrete groups are unimodular)
    modular_function = 1

    def __init__(self, generators=None):
        self._metric = None
        gens = tuple(generators) if generators is not None else self.default_generators()
        self._check_generating_set(gens)
        self.generators = self._sorted_unique(gens)

    # -- core group operations, provided by subclasses --
    def mul(self, a, b):
        raise NotImplementedError

    def inv(self, a):
        raise NotImplementedError

    @property
    def identity(self):
        raise NotImplementedError

    def default_generators(self):
        raise NotImplementedError

    def sort_key(self, g):
        """Total order on elements; canonical iteration order everywhere."""
        return g

    # -- encodings (JSON-serializable canonical forms) --
    def encode(self, g):
        return g

    def decode(self, obj):
        return obj

    def abelianize(self, g):
        """Image of g in the torsion-free abelianization Z^r."""
        raise NotImplementedError

    def descriptor(self):
        """JSON-serializable description of the group and generating set."""
        d = self._base_descriptor()
        d["generators"] = [self.encode(u) for u in self.generators]
        return d

    def _base_descriptor(self):
        return {"kind": self.kind}

    # -- helpers --
    def _sorted_unique(self, elems):
        seen = {}
        for g in elems:
            seen[g] = None
        return tuple(sorted(seen, key=self.sort_key))

    def _check_generating_set(self, gens):
        gens = set(gens)
        if self.identity not in gens:
            raise ConfigError("generating set must contain the identity")
        for u in gens:
            if self.inv(u) not in gens:
                raise ConfigError(f"generating set is not symmetric: missing inverse of {u!r}")

    def commutator(self, a, b):
        return self.mul(self.mul(a, b), self.mul(self.inv(a), self.inv(b)))

    @property
    def rank(self):
        return self.abelianization_rank[1]

    def word_metric_table(self) -> "WordMetric":
        if self._metric is None:
            self._metric = WordMetric(self)
        return self._metric

    def elements(self):
        """All elements of a finite group, canonically ordered."""
        if not self.is_finite:
            raise ConfigError(f"{self.kind} is infinite")
        table = self.word_metric_table()
        prev = -1
        n = 0
        while True:
            table.extend(n)
            if len(table.dist) == prev:
                break
            prev = len(table.dist)
            n += 1
        return sorted(table.dist, key=self.sort_key)

    def __eq__(self, other):
        return (
            isinstance(other, GroupContext)
            and self.descriptor() == other.descriptor()
        )

    def __hash__(self):
        import json

        return hash(json.dumps(self.descriptor(), sort_keys=True))

    def __repr__(self):
        return f"<{type(self).__name__} {self.descriptor()}>"


class ZdGroup(GroupContext):
    """Free abelian group Z^d, elements are integer tuples."""

    def __init__(self, d, generators=None):
        if d < 1:
            raise ConfigError("d must be >= 1")
        self.d = d
        self.kind = f"zd{d}"
        self.abelianization_rank = (0, d)
        super().__init__(generators)

    @property
    def identity(self):
        return (0,) * self.d

    def mul(self, a, b):
        return tuple(x + y for x, y in zip(a, b))

    def inv(self, a):
        return tuple(-x for x in a)

    def default_generators(self):
        gens = [self.identity]
        for i in range(self.d):
            e = [0] * self.d
            e[i] = 1
            gens.append(tuple(e))
            e2 = list(e)
            e2[i] = -1
            gens.append(tuple(e2))
        return gens

    def abelianize(self, g):
        return tuple(g)

    def encode(self, g):
        return list(g)

    def decode(self, obj):
        return tuple(int(x) for x in obj)

    def _base_descriptor(self):
        return {"kind": "zd", "d": self.d}


class Heisenberg3(GroupContext):
    """Discrete Heisenberg group on integer triples (x, y, z).

    Multiplication (x,y,z)(x',y',z') = (x+x', y+y', z+z'+x*y').
    """

    kind = "heisenberg3"
    abelianization_rank = (0, 2)

    @property
    def identity(self):
        return (0, 0, 0)

    def mul(self, a, b):
        return (a[0] + b[0], a[1] + b[1], a[2] + b[2] + a[0] * b[1])

    def inv(self, a):
        # (x,y,z)^-1 = (-x,-y,-z+xy)
        return (-a[0], -a[1], -a[2] + a[0] * a[1])

    def default_generators(self):
        return [
            (0, 0, 0),
            (1, 0, 0),
            (-1, 0, 0),
            (0, 1, 0),
            (0, -1, 0),
        ]

    def abelianize(self, g):
        return (g[0], g[1])

    def encode(self, g):
        return list(g)

    def decode(self, obj):
        return tuple(int(x) for x in obj)


class Lamplighter(GroupContext):
    """Wreath product Z2 wr Z: (finite lit-lamp set, cursor position).

    Elements are (lamps, pos) with lamps a sorted tuple of integers.
    (S1,k1)(S2,k2) = (S1 xor (k1+S2), k1+k2).
    """

    kind = "lamplighter"
    abelianization_rank = (0, 1)

    @property
    def identity(self):
        return ((), 0)

    def mul(self, a, b):
        lamps1, k1 = a
        lamps2, k2 = b
        shifted = {k1 + p for p in lamps2}
        out = set(lamps1) ^ shifted
        return (tuple(sorted(out)), k1 + k2)

    def inv(self, a):
        lamps, k = a
        return (tuple(sorted(p - k for p in lamps)), -k)

    def default_generators(self):
        # cursor moves and toggle-at-cursor; the toggle is an involution
        return [((), 0), ((), 1), ((), -1), ((0,), 0)]

    def abelianize(self, g):
        return (g[1],)

    def sort_key(self, g):
        return (g[1], len(g[0]), g[0])

    def encode(self, g):
        return {"lamps": list(g[0]), "pos": g[1]}

    def decode(self, obj):
        return (tuple(sorted(int(p) for p in obj["lamps"])), int(obj["pos"]))


_FREE_LETTERS = "abcdefghijklm"


class FreeGroup(GroupContext):
    """Free group F_k; elements are reduced words over a..z / A..Z."""

    def __init__(self, k, generators=None):
        if not 1 <= k <= len(_FREE_LETTERS):
            raise ConfigError(f"free rank must be in [1, {len(_FREE_LETTERS)}]")
        self.k = k
        self.kind = f"free{k}"
        self.abelianization_rank = (0, k)
        super().__init__(generators)

    @property
    def identity(self):
        return ""

    @staticmethod
    def _flip(c):
        return c.lower() if c.isupper() else c.upper()

    def mul(self, a, b):
        # cancel at the junction only; a and b are already reduced
        i = len(a)
        j = 0
        while i > 0 and j < len(b) and a[i - 1] == self._flip(b[j]):
            i -= 1
            j += 1
        return a[:i] + b[j:]

    def inv(self, a):
        return "".join(self._flip(c) for c in reversed(a))

    def default_generators(self):
        gens = [""]
        for i in range(self.k):
            gens.append(_FREE_LETTERS[i])
            gens.append(_FREE_LETTERS[i].upper())
        return gens

    def abelianize(self, g):
        counts = [0] * self.k
        for c in g:
            idx = _FREE_LETTERS.index(c.lower())
            counts[idx] += -1 if c.isupper() else 1
        return tuple(counts)

    def sort_key(self, g):
        return (len(g), g)

    def _base_descriptor(self):
        return {"kind": "free", "k": self.k}


class CyclicGroup(GroupContext):
    """Z/mZ with elements 0..m-1."""

    def __init__(self, m, generators=None):
        if m < 1:
            raise ConfigError("m must be >= 1")
        self.m = m
        self.kind = f"cyclic{m}"
        self.is_finite = True
        self.order = m
        super().__init__(generators)

    @property
    def identity(self):
        return 0

    def mul(self, a, b):
        return (a + b) % self.m

    def inv(self, a):
        return (-a) % self.m

    def default_generators(self):
        return sorted({0, 1 % self.m, (self.m - 1) % self.m})

    def abelianize(self, g):
        return ()

    def _base_descriptor(self):
        return {"kind": "cyclic", "m": self.m}


class SymmetricGroup(GroupContext):
    """S_n; elements are image tuples, serialized as Lehmer-code indices.

    The index of a permutation p is sum(lehmer[i] * (n-1-i)!) where
    lehmer[i] counts later entries smaller than p[i].
    """

    def __init__(self, n, generators=None):
        if n < 1:
            raise ConfigError("n must be >= 1")
        self.n = n
        self.kind = f"symmetric{n}"
        self.is_finite = True
        self.order = math.factorial(n)
        super().__init__(generators)

    @property
    def identity(self):
        return tuple(range(self.n))

    def mul(self, a, b):
        return tuple(a[b[i]] for i in range(self.n))

    def inv(self, a):
        out = [0] * self.n
        for i, v in enumerate(a):
            out[v] = i
        return tuple(out)

    def default_generators(self):
        # adjacent transpositions (involutions) plus the identity
        gens = [self.identity]
        for i in range(self.n - 1):
            p = list(range(self.n))
            p[i], p[i + 1] = p[i + 1], p[i]
            gens.append(tuple(p))
        return gens

    def abelianize(self, g):
        return ()

    def lehmer_index(self, g):
        idx = 0
        for i in range(self.n):
            smaller = sum(1 for j in range(i + 1, self.n) if g[j] < g[i])
            idx += smaller * math.factorial(self.n - 1 - i)
        return idx

    def from_lehmer_index(self, idx):
        avail = list(range(self.n))
        out = []
        for i in range(self.n):
            f = math.factorial(self.n - 1 - i)
            q, idx = divmod(idx, f)
            out.append(avail.pop(q))
        return tuple(out)

    def encode(self, g):
        return self.lehmer_index(g)

    def decode(self, obj):
        return self.from_lehmer_index(int(obj))

    def sort_key(self, g):
        return g

    def _base_descriptor(self):
        return {"kind": "symmetric", "n": self.n}


class ProductGroup(GroupContext):
    """Direct product of group contexts; elements are tuples of components."""

    def __init__(self, factors, generators=None):
        self.factors = tuple(factors)
        self.kind = "product"
        self.is_finite = all(f.is_finite for f in self.factors)
        if self.is_finite:
            self.order = math.prod(f.order for f in self.factors)
        r = sum(f.rank for f in self.factors)
        self.abelianization_rank = (0, r)
        super().__init__(generators)

    @property
    def identity(self):
        return tuple(f.identity for f in self.factors)

    def mul(self, a, b):
        return tuple(f.mul(x, y) for f, x, y in zip(self.factors, a, b))

    def inv(self, a):
        return tuple(f.inv(x) for f, x in zip(self.factors, a))

    def default_generators(self):
        # generators of each factor embedded coordinatewise
        gens = {self.identity}
        for i, f in enumerate(self.factors):
            for u in f.default_generators():
                g = list(self.identity)
                g[i] = u
                gens.add(tuple(g))
        return gens

    def abelianize(self, g):
        out = []
        for f, x in zip(self.factors, g):
            out.extend(f.abelianize(x))
        return tuple(out)

    def sort_key(self, g):
        return tuple(f.sort_key(x) for f, x in zip(self.factors, g))

    def encode(self, g):
        return [f.encode(x) for f, x in zip(self.factors, g)]

    def decode(self, obj):
        return tuple(f.decode(x) for f, x in zip(self.factors, obj))

    def _base_descriptor(self):
        return {"kind": "product", "factors": [f.descriptor() for f in self.factors]}


def make_group(descriptor) -> GroupContext:
    """Build a GroupContext from a descriptor dict (inverse of .descriptor())."""
    kind = descriptor.get("kind")
    gens = descriptor.get("generators")
    if kind == "zd":
        ctx = ZdGroup(int(descriptor["d"]))
    elif kind == "heisenberg3":
        ctx = Heisenberg3()
    elif kind == "lamplighter":
        ctx = Lamplighter()
    elif kind == "free":
        ctx = FreeGroup(int(descriptor["k"]))
    elif kind == "cyclic":
        ctx = CyclicGroup(int(descriptor["m"]))
    elif kind == "symmetric":
        ctx = SymmetricGroup(int(descriptor["n"]))
    elif kind == "product":
        ctx = ProductGroup([make_group(f) for f in descriptor["factors"]])
    else:
        raise ConfigError(f"unknown group kind {kind!r}", field="group.kind")
    if gens is not None:
        ctx = type(ctx)(**_ctor_args(descriptor), generators=[ctx.decode(u) for u in gens]) \
            if kind != "product" else ProductGroup(ctx.factors, generators=[ctx.decode(u) for u in gens])
    return ctx


def _ctor_args(descriptor):
    kind = descriptor["kind"]
    if kind == "zd":
        return {"d": int(descriptor["d"])}
    if kind == "free":
        return {"k": int(descriptor["k"])}
    if kind == "cyclic":
        return {"m": int(descriptor["m"])}
    if kind == "symmetric":
        return {"n": int(descriptor["n"])}
    return {}


# ---------------------------------------------------------------------------
# word metric
# ---------------------------------------------------------------------------

class WordMetric:
    """Breadth-first distance table from the identity, grown in stages.

    Monotone: extending the radius never changes stored distances.
    Safe for concurrent readers between extensions.
    """

    def __init__(self, ctx: GroupContext, memory_cap=None):
        import threading

        self.ctx = ctx
        self.memory_cap = memory_cap
        self.dist = {ctx.identity: 0}
        self.layers = [[ctx.identity]]  # layers[n] = elements at distance n
        self.radius = 0
        self._closed = False  # no new elements appear (finite group exhausted)
        self._steps = [u for u in ctx.generators if u != ctx.identity]
        self._lock = threading.Lock()

    def extend(self, radius):
        if self.radius >= radius or self._closed:
            return
        with self._lock:
            self._extend_locked(radius)

    def _extend_locked(self, radius):
        while self.radius < radius and not self._closed:
            frontier = self.layers[self.radius]
            nxt = []
            mul = self.ctx.mul
            dist = self.dist
            d = self.radius + 1
            for g in frontier:
                for u in self._steps:
                    h = mul(u, g)
                    if h not in dist:
                        dist[h] = d
                        nxt.append(h)
            cap = self.memory_cap if self.memory_cap is not None else DEFAULT_BFS_CAP
            if len(dist) > cap:
                raise BudgetExceeded("word-metric table", cap, len(dist))
            nxt.sort(key=self.ctx.sort_key)
            self.layers.append(nxt)
            self.radius += 1
            if not nxt:
                self._closed = True

    def distance(self, g, max_radius=256):
        if g in self.dist:
            return self.dist[g]
        while g not in self.dist:
            if self._closed or self.radius >= max_radius:
                raise BudgetExceeded("word-metric radius", max_radius)
            self.extend(self.radius + 1)
        return self.dist[g]


def word_metric(ctx: GroupContext, g, max_radius=256) -> int:
    """Least number of generators whose product is g (0 for the identity)."""
    return ctx.word_metric_table().distance(g, max_radius=max_radius)


def ball(ctx: GroupContext, n: int):
    """B_n = {g : dist(g) <= n} with per-layer counts |B_0|..|B_n|.

    Returns (elements ordered by (distance, canonical key), cumulative counts).
    """
    if n < 0:
        raise ConfigError("ball radius must be >= 0")
    table = ctx.word_metric_table()
    table.extend(n)
    elems = []
    counts = []
    total = 0
    for k in range(n + 1):
        layer = table.layers[k] if k <= table.radius else []
        elems.extend(layer)
        total += len(layer)
        counts.append(total)
    return elems, counts


def set_distance(ctx: GroupContext, E, F, max_radius=256):
    """Exact min over pairs of dist(g * h^-1); +inf if either set is empty."""
    E = list(E)
    F = list(F)
    if not E or not F:
        return math.inf
    best = math.inf
    for g in E:
        for h in F:
            d = word_metric(ctx, ctx.mul(g, ctx.inv(h)), max_radius=max_radius)
            if d < best:
                best = d
                if best == 0:
                    return 0
    return best


def growth_fit(ctx: GroupContext, n_max: int) -> FitReport:
    """Classify volume growth from ball counts up to n_max.

    Fits log|B_n| against log n (polynomial, exponent D) and against n
    (exponential) over the top half of the range and keeps the better fit.
    """
    if n_max < 4:
        raise ConfigError("growth_fit needs n_max >= 4")
    _, counts = ball(ctx, n_max)
    ns = np.arange(1, n_max + 1, dtype=float)
    vols = np.array(counts[1:], dtype=float)
    lo = n_max // 2
    sel = slice(lo - 1, n_max)
    poly_slope, poly_icpt, poly_res = loglog_fit(ns[sel], vols[sel])
    exp_slope, exp_icpt, exp_res = semilog_fit(ns[sel], vols[sel])
    if ctx.is_finite and counts[-1] == ctx.order:
        kind = "finite"
    elif exp_res < poly_res and exp_slope > 0.05:
        kind = "exponential"
    else:
        kind = "polynomial"
    return FitReport(
        experiment="growth",
        measured=[{"n": int(n), "ball": int(v)} for n, v in zip(ns, vols)],
        fitted={
            "degree": poly_slope,
            "poly_residual": poly_res,
            "exp_rate": exp_slope,
            "exp_residual": exp_res,
        },
        residual=min(poly_res, exp_res),
        verdicts={"growth": kind},
        context={"group": ctx.descriptor(), "n_max": n_max, "fit_window": [lo, n_max]},
    )


def abelianize(ctx: GroupContext, g):
    """Integer vector image of g in the torsion-free abelianization."""
    return ctx.abelianize(g)
