"""Drift, centeredness tests, and the multiplicative centering decomposition.

A density K with drift factors as K = delta * chi * K' where chi is the
multiplicative character chi(g) = exp(<v, ab(g)>) through the abelianization,
K' is centered, and delta = M(v) is the minimum of the strictly convex tilt
mass M(v) = sum_g K(g) exp(-<v, ab(g)>).  The minimizer is found by damped
Newton; the tilted mean is the gradient and the tilted covariance the Hessian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .density import Density, power
from .errors import HullDegenerate
from .groups import word_metric
from .operators import GFunction, TOp

NEWTON_GRAD_TOL = 1e-12
NEWTON_MAX_ITER = 200
ARMIJO_SIGMA = 1e-4


def moment_vector(k: Density) -> np.ndarray:
    """First moment of the abelianized density; zero iff K is centered."""
    r = k.group.rank
    m = np.zeros(r)
    for g, w in k.weights.items():
        m += w * np.asarray(k.group.abelianize(g), dtype=float)
    return m


def is_centered(k: Density, tol=1e-10) -> bool:
    """Vanishing abelianized mean, cross-checked through the homomorphism
    characterization K * eta = eta on the support of K^(2)."""
    m = moment_vector(k)
    if m.size and float(np.max(np.abs(m))) > tol:
        return False
    ctx = k.group
    if ctx.rank == 0:
        return True
    k2 = power(k, 2)
    diam = max((word_metric(ctx, g) for g in k2.weights), default=1)
    diam = max(diam, 1)
    t = TOp(k)
    for i in range(ctx.rank):
        eta = GFunction(ctx, {g: float(ctx.abelianize(g)[i]) for g in k2.weights
                              if ctx.abelianize(g)[i] != 0})
        # (K * eta - eta)(g) = -m_i wherever eta is defined; check on supp K^(2)
        conv = t.apply(GFunction(
            ctx, {g: float(ctx.abelianize(g)[i])
                  for g in _enlarged_support(k, k2)}))
        for g in k2.weights:
            lhs = conv.values.get(g, 0j).real - float(ctx.abelianize(g)[i])
            if abs(lhs) > tol * diam:
                return False
    return True


def _enlarged_support(k: Density, k2: Density):
    # evaluation points for K * eta on supp K^(2): need eta on supp(K)^-1 supp(K^(2))
    ctx = k.group
    out = set(k2.weights)
    for a in k.weights:
        ainv = ctx.inv(a)
        for g in k2.weights:
            out.add(ctx.mul(ainv, g))
    return out


@dataclass
class CenteringResult:
    """Tilt parameter v, leading eigenvalue delta = M(v), and the centered
    part K'; the character is chi(g) = exp(<v, ab(g)>)."""

    v: np.ndarray
    delta: float
    k_prime: Density
    iterations: int
    grad_norm: float
    chi_description: str = ""

    def chi(self, g) -> float:
        ab = np.asarray(self.k_prime.group.abelianize(g), dtype=float)
        return math.exp(float(self.v @ ab)) if self.v.size else 1.0

    def to_json(self):
        return {
            "v": [float(x) for x in self.v],
            "delta": self.delta,
            "k_prime": self.k_prime.to_json(),
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "chi": self.chi_description,
        }


def _hull_has_zero_in_relint(points: np.ndarray) -> bool:
    """Is 0 in the relative interior of conv(points)?

    Exactly when no direction w satisfies <w, p> >= 0 for all points with at
    least one strict inequality; tested by the LP max sum <w, p_i> subject to
    <w, p_i> >= 0, |w| <= 1 having optimum 0.
    """
    npts, r = points.shape
    if r == 0:
        return True
    # minimize -sum_i <w, p_i> s.t. -<w, p_i> <= 0, -1 <= w <= 1
    csum = -points.sum(axis=0)
    res = linprog(c=csum, A_ub=-points, b_ub=np.zeros(npts),
                  bounds=[(-1.0, 1.0)] * r, method="highs")
    if not res.success:
        raise RuntimeError(f"hull LP failed: {res.message}")
    return -res.fun <= 1e-9 * max(1.0, float(np.abs(points).max()))


def center_decompose(k: Density) -> CenteringResult:
    """Minimize the tilt mass by damped Newton and return the decomposition.

    Raises HullDegenerate when 0 is not in the relative interior of the
    hull of the abelianized support (no multiplicative centering exists;
    detecting the one-sided case needs the hull test, since the Hessian
    stays positive along the escape direction).
    """
    ctx = k.group
    r = ctx.rank
    support = list(k.weights)
    weights = np.fromiter(k.weights.values(), dtype=float, count=len(support))
    if r == 0:
        return CenteringResult(v=np.zeros(0), delta=1.0, k_prime=k,
                               iterations=0, grad_norm=0.0,
                               chi_description="exp(<v, ab(g)>), v = ()")
    points = np.array([ctx.abelianize(g) for g in support], dtype=float)
    if not _hull_has_zero_in_relint(points):
        raise HullDegenerate(
            "0 is not interior to the hull of the abelianized support")
    # work inside span(points) so the Hessian stays positive definite
    rank = np.linalg.matrix_rank(points, tol=1e-12) if len(support) else 0
    if rank < r:
        _, _, vt = np.linalg.svd(points, full_matrices=False)
        basis = vt[:rank].T                      # r x rank
    else:
        basis = np.eye(r)
    proj = points @ basis                        # coordinates in the span

    def mass_grad_hess(u):
        expo = np.exp(-(proj @ u))
        tw = weights * expo
        m = float(tw.sum())
        grad = -(proj.T @ tw)
        hess = (proj.T * tw) @ proj
        return m, grad, hess

    u = np.zeros(proj.shape[1])
    m, grad, hess = mass_grad_hess(u)
    iters = 0
    while np.linalg.norm(grad) > NEWTON_GRAD_TOL and iters < NEWTON_MAX_ITER:
        step = np.linalg.solve(hess, -grad)
        t = 1.0
        while t > 1e-16:
            m_new, g_new, h_new = mass_grad_hess(u + t * step)
            if m_new <= m + ARMIJO_SIGMA * t * float(grad @ step):
                break
            t /= 2.0
        u = u + t * step
        m, grad, hess = mass_grad_hess(u)
        iters += 1
    v = basis @ u
    delta = m
    expo = np.exp(-(points @ v))
    kp = Density(ctx, {g: w * e / delta
                       for g, w, e in zip(support, weights, expo)})
    return CenteringResult(
        v=v, delta=delta, k_prime=kp, iterations=iters,
        grad_norm=float(np.linalg.norm(grad)),
        chi_description=f"exp(<v, ab(g)>), v = {tuple(float(x) for x in v)}",
    )


def verify_conjugation(k: Density, res: CenteringResult, n_max: int) -> float:
    """Max pointwise error of K^(n) against delta^n chi (K')^(n), n <= n_max."""
    worst = 0.0
    for n in range(1, n_max + 1):
        kn = power(k, n)
        kpn = power(res.k_prime, n)
        dn = res.delta ** n
        elems = set(kn.weights) | set(kpn.weights)
        for g in elems:
            rhs = dn * res.chi(g) * kpn[g]
            worst = max(worst, abs(kn[g] - rhs))
    return worst
