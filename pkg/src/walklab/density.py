"""Finitely supported probability densities and exact convolution powers.

Densities are immutable sparse maps element -> weight.  Convolution is an
exact double sum with compensated (Kahan) accumulation in canonical element
order, so results are bit-reproducible.  Powers go through square-and-multiply
with an in-memory ladder cache and an optional on-disk cache.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceeded, ConfigError, GroupMismatch
from .groups import GroupContext, ZdGroup, make_group, word_metric

MASS_TOL = 1e-12
PRUNE_TOL = 1e-300  # true zeros only; no silent tail truncation
DEFAULT_SUPPORT_CAP = 1 << 26

CACHE_HEADER = "WALKLAB1"


class _Kahan:
    """Compensated accumulator, one per output element."""

    __slots__ = ("s", "c")

    def __init__(self):
        self.s = 0.0
        self.c = 0.0

    def add(self, x):
        y = x - self.c
        t = self.s + y
        self.c = (t - self.s) - y
        self.s = t


class Density:
    """Probability density with finite support on a group.

    Weights are positive floats summing to 1 within 1e-12; zero entries are
    pruned at construction.
    """

    def __init__(self, group: GroupContext, weights, check=True):
        self.group = group
        w = {}
        for g, v in weights.items() if isinstance(weights, dict) else weights:
            v = float(v)
            if v < 0:
                if v < -1e-13:
                    raise ConfigError(f"negative weight {v} at {g!r}")
                v = 0.0
            if v > PRUNE_TOL:
                w[g] = w.get(g, 0.0) + v
        self.weights = dict(sorted(w.items(), key=lambda kv: group.sort_key(kv[0])))
        if check:
            total = math.fsum(self.weights.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"density mass {total} differs from 1")
        self.assumption_record = None

    # -- basic accessors --
    def support(self):
        return list(self.weights)

    def __getitem__(self, g):
        return self.weights.get(g, 0.0)

    def __len__(self):
        return len(self.weights)

    def mass(self):
        return math.fsum(self.weights.values())

    def max_step(self):
        """Largest word-metric radius of the support."""
        return max(word_metric(self.group, g) for g in self.weights)

    def is_symmetric(self, tol=1e-12):
        inv = self.group.inv
        return all(abs(v - self.weights.get(inv(g), 0.0)) <= tol for g, v in self.weights.items())

    # -- serialization --
    def to_json(self):
        enc = self.group.encode
        return {
            "group": self.group.descriptor(),
            "entries": [[enc(g), v] for g, v in self.weights.items()],
        }

    @classmethod
    def from_json(cls, obj, group=None):
        ctx = group if group is not None else make_group(obj["group"])
        dec = ctx.decode
        return cls(ctx, {dec(e): float(v) for e, v in obj["entries"]})

    def content_hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def __repr__(self):
        return f"<Density on {self.group.kind}, |supp|={len(self.weights)}>"


def delta(group: GroupContext, g=None) -> Density:
    """Point mass at g (identity by default)."""
    if g is None:
        g = group.identity
    return Density(group, {g: 1.0})


def convolve(k1: Density, k2: Density, support_cap=DEFAULT_SUPPORT_CAP) -> Density:
    """Exact (k1 * k2)(g) = sum_h k1(h) k2(h^-1 g)."""
    if k1.group != k2.group:
        raise GroupMismatch(f"{k1.group.kind} vs {k2.group.kind}")
    ctx = k1.group
    if isinstance(ctx, ZdGroup):
        return _convolve_zd(k1, k2, support_cap)
    mul = ctx.mul
    acc = {}
    for g1, w1 in k1.weights.items():
        for g2, w2 in k2.weights.items():
            g = mul(g1, g2)
            slot = acc.get(g)
            if slot is None:
                slot = _Kahan()
                acc[g] = slot
                if len(acc) > support_cap:
                    raise BudgetExceeded("convolution support", support_cap)
            slot.add(w1 * w2)
    return Density(ctx, {g: s.s for g, s in acc.items()}, check=False)


def _convolve_zd(k1: Density, k2: Density, support_cap) -> Density:
    """Dense-box convolution on Z^d; same arithmetic, array accumulation."""
    ctx = k1.group
    d = ctx.d
    pts1 = np.array(list(k1.weights), dtype=np.int64).reshape(len(k1), d)
    pts2 = np.array(list(k2.weights), dtype=np.int64).reshape(len(k2), d)
    lo = pts1.min(axis=0) + pts2.min(axis=0)
    hi = pts1.max(axis=0) + pts2.max(axis=0)
    shape = tuple(int(x) for x in (hi - lo + 1))
    if int(np.prod(shape)) > support_cap:
        raise BudgetExceeded("convolution support", support_cap)
    box = np.zeros(shape)
    w2 = np.fromiter(k2.weights.values(), dtype=float, count=len(k2))
    for g1, v1 in k1.weights.items():
        idx = tuple((np.array(g1, dtype=np.int64) + pts2 - lo).T)
        np.add.at(box, idx, v1 * w2)
    out = {}
    nz = np.argwhere(box > PRUNE_TOL)
    for idx in nz:
        g = tuple(int(x) for x in (idx + lo))
        out[g] = float(box[tuple(idx)])
    return Density(ctx, out, check=False)


class PowerCache:
    """Ladder cache for convolution powers, optionally mirrored on disk.

    Disk entries are JSON files keyed by (group hash, density hash, n) with a
    versioned header; `verify` recomputes entries from scratch.
    """

    def __init__(self, directory=None):
        self.directory = directory or os.environ.get("WALKLAB_CACHE_DIR")
        self.memory = {}

    def _key(self, k: Density, n: int):
        return (k.content_hash(), n)

    def _path(self, k: Density, n: int):
        name = f"{k.content_hash()}_n{n}.json"
        return os.path.join(self.directory, name)

    def get(self, k: Density, n: int):
        key = self._key(k, n)
        if key in self.memory:
            return self.memory[key]
        if self.directory:
            path = self._path(k, n)
            if os.path.exists(path):
                obj = _read_cache_file(path)
                dens = Density.from_json(obj["density"], group=k.group)
                self.memory[key] = dens
                return dens
        return None

    def put(self, k: Density, n: int, kn: Density):
        self.memory[self._key(k, n)] = kn
        if self.directory:
            os.makedirs(self.directory, exist_ok=True)
            payload = kn.to_json()
            blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
            obj = {
                "header": CACHE_HEADER,
                "base_hash": k.content_hash(),
                "n": n,
                "density": payload,
                "sha256": hashlib.sha256(blob.encode()).hexdigest(),
            }
            base_path = os.path.join(self.directory, f"{k.content_hash()}_base.json")
            if not os.path.exists(base_path):
                _atomic_write(base_path, json.dumps(
                    {"header": CACHE_HEADER, "density": k.to_json()},
                    sort_keys=True))
            _atomic_write(self._path(k, n), json.dumps(obj, sort_keys=True))


def _read_cache_file(path):
    from .errors import CorruptCache

    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("header") != CACHE_HEADER:
        raise CorruptCache(f"{path}: bad header {obj.get('header')!r}")
    if "density" in obj and "sha256" in obj:
        blob = json.dumps(obj["density"], sort_keys=True, separators=(",", ":"))
        if hashlib.sha256(blob.encode()).hexdigest() != obj["sha256"]:
            raise CorruptCache(f"{path}: content hash mismatch")
    return obj


def _atomic_write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


_default_cache = PowerCache()


def power(k: Density, n: int, cache: PowerCache | None = None,
          support_cap=DEFAULT_SUPPORT_CAP) -> Density:
    """n-th convolution power by square-and-multiply with ladder caching."""
    if n < 1:
        raise ConfigError("power needs n >= 1")
    cache = cache if cache is not None else _default_cache
    if n == 1:
        return k
    hit = cache.get(k, n)
    if hit is not None:
        return hit
    half = power(k, n // 2, cache=cache, support_cap=support_cap)
    out = convolve(half, half, support_cap=support_cap)
    if n % 2:
        out = convolve(out, k, support_cap=support_cap)
    cache.put(k, n, out)
    return out


def power_sequence(k: Density, n_max: int, support_cap=DEFAULT_SUPPORT_CAP):
    """All powers K, K^(2), ..., K^(n_max) by sequential convolution.

    Cheaper than repeated square-and-multiply when every power is needed.
    """
    out = [k]
    cur = k
    for _ in range(n_max - 1):
        cur = convolve(cur, k, support_cap=support_cap)
        out.append(cur)
    return out


def adjoint(k: Density) -> Density:
    """K*(g) = K(g^-1) (unimodular group)."""
    inv = k.group.inv
    return Density(k.group, {inv(g): v for g, v in k.weights.items()}, check=False)


def adjoint_and_symmetrize(k: Density):
    """Return (K*, (K + K*)/2); the second is symmetric."""
    kstar = adjoint(k)
    acc = dict(kstar.weights)
    for g, v in k.weights.items():
        acc[g] = acc.get(g, 0.0) + v
    khat = Density(k.group, {g: v / 2.0 for g, v in acc.items()}, check=False)
    return kstar, khat


@dataclass
class AssumptionRecord:
    """Outcome of the standing hypotheses check for a density."""

    w_symmetric: bool
    w_generates: bool
    min_on_w: float
    support_finite: bool
    epsilon: float            # max eps with eps*chi_W <= K (0 if none)
    sub_gaussian_ok: bool | None   # for user-supplied (c, b); None if not asked
    details: dict

    @property
    def passed(self):
        return self.w_symmetric and self.w_generates and self.min_on_w > 0.0


def check_assumptions(k: Density, W, sub_gaussian=None) -> AssumptionRecord:
    """Check K >= eps > 0 on a symmetric generating W; record, never raise.

    `sub_gaussian`, when given, is a pair (c, b) to test
    K(g) <= c*exp(-b*dist(g)^2) on the support (used by the inhomogeneous
    suites that hypothesize uniform constants).
    """
    ctx = k.group
    W = list(dict.fromkeys(W))
    inv = ctx.inv
    wset = set(W)
    w_symmetric = all(inv(g) in wset for g in W) and ctx.identity in wset
    w_generates = _generates(ctx, W)
    eps = min((k[g] for g in W), default=0.0)
    sub_ok = None
    details = {}
    if sub_gaussian is not None:
        c, b = sub_gaussian
        sub_ok = True
        worst = 0.0
        for g, v in k.weights.items():
            bound = c * np.exp(-b * word_metric(ctx, g) ** 2)
            worst = max(worst, v - bound)
            if v > bound:
                sub_ok = False
        details["sub_gaussian_excess"] = worst
    rec = AssumptionRecord(
        w_symmetric=w_symmetric,
        w_generates=w_generates,
        min_on_w=eps,
        support_finite=True,
        epsilon=eps if (w_symmetric and w_generates) else 0.0,
        sub_gaussian_ok=sub_ok,
        details=details,
    )
    k.assumption_record = rec
    return rec


def _generates(ctx: GroupContext, W, radius_cap=64):
    """Does <W> contain the reference generating set U?  BFS over W-products."""
    targets = set(ctx.generators)
    seen = {ctx.identity}
    frontier = [ctx.identity]
    steps = [g for g in W if g != ctx.identity]
    if not steps:
        return targets <= seen
    for _ in range(radius_cap):
        targets -= seen
        if not targets:
            return True
        nxt = []
        for g in frontier:
            for u in steps:
                h = ctx.mul(u, g)
                if h not in seen:
                    seen.add(h)
                    nxt.append(h)
        if not nxt:
            break
        frontier = nxt
    return not (targets - seen)


class DensitySequence:
    """Time-inhomogeneous step distributions sharing one group.

    The uniformity record witnesses eps*chi_W <= K_n and supp K_n within W'
    for every member.
    """

    def __init__(self, densities, W=None, W_prime=None):
        densities = list(densities)
        if not densities:
            raise ConfigError("empty density sequence")
        ctx = densities[0].group
        for k in densities[1:]:
            if k.group != ctx:
                raise GroupMismatch("sequence members on different groups")
        self.group = ctx
        self.densities = densities
        self.W = list(W) if W is not None else list(ctx.generators)
        if W_prime is None:
            supp = set()
            for k in densities:
                supp |= set(k.weights)
            W_prime = sorted(supp | {ctx.inv(g) for g in supp}, key=ctx.sort_key)
        self.W_prime = list(W_prime)
        self.uniformity = self._check_uniformity()

    def _check_uniformity(self):
        eps = min(min((k[g] for g in self.W), default=0.0) for k in self.densities)
        wset = set(self.W_prime)
        inside = all(set(k.weights) <= wset for k in self.densities)
        upper_ok = eps > 0 and all(
            max(k.weights.values()) <= 1.0 / eps for k in self.densities
        )
        records = [check_assumptions(k, self.W) for k in self.densities]
        return {
            "epsilon": eps,
            "support_in_w_prime": inside,
            "upper_bounded": upper_ok,
            "all_pass": eps > 0 and inside and all(r.passed for r in records),
        }

    def __len__(self):
        return len(self.densities)

    def __getitem__(self, i):
        return self.densities[i]
