"""Independent ground-truth engines.

Two oracles validate everything else: Fourier multipliers on Z^d (symbols of
convolution operators, with certified sup-norm evaluation and FFT powers) and
dense matrix linear algebra on finite groups (exact spectra, resolvents,
singular values).
"""

from __future__ import annotations

import math

import numpy as np
from shapely.geometry import MultiPoint, Point

from .density import Density
from .errors import ConfigError, SingularResolvent
from .groups import GroupContext, ZdGroup

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Fourier multiplier oracle on Z^d
# ---------------------------------------------------------------------------

class MultiplierOracle:
    """Symbol-based computations for a density on Z^d.

    The symbol is Khat(theta) = sum_x K(x) exp(-i <theta, x>); operator
    norms of functions of T are sups of |phi(Khat)| over the torus,
    evaluated by branch-and-bound with a Lipschitz certificate.
    """

    def __init__(self, k: Density, sup_target=1e-10, eval_budget=3_000_000):
        if not isinstance(k.group, ZdGroup):
            raise ConfigError("multiplier oracle needs a Z^d density")
        self.density = k
        self.d = k.group.d
        self.points = np.array(list(k.weights), dtype=np.int64).reshape(len(k), self.d)
        self.weights = np.fromiter(k.weights.values(), dtype=float, count=len(k))
        self.sup_target = sup_target
        self.eval_budget = eval_budget
        self.last_cert_gap = 0.0

    # -- symbol machinery --
    def _tilted_weights(self, lam, w_dir):
        if lam == 0.0 or w_dir is None:
            return self.weights
        w = np.asarray(w_dir, dtype=float)
        return self.weights * np.exp(lam * (self.points @ w))

    def symbol(self, thetas, lam=0.0, w_dir=None):
        """Khat_lambda on an (m, d) array of angles."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        phases = thetas @ self.points.T.astype(float)
        wts = self._tilted_weights(lam, w_dir)
        return np.exp(-1j * phases) @ wts.astype(complex)

    def _symbol_and_grad(self, thetas, lam, w_dir):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        phases = thetas @ self.points.T.astype(float)
        wts = self._tilted_weights(lam, w_dir).astype(complex)
        waves = np.exp(-1j * phases)
        z = waves @ wts
        # dz_j = sum_x (-i x_j) w(x) exp(-i theta.x)
        dz = waves @ (-1j * self.points.astype(float) * wts[:, None])
        return z, dz

    def _moment_bounds(self, lam, w_dir):
        wts = np.abs(self._tilted_weights(lam, w_dir))
        norms = np.linalg.norm(self.points, axis=1)
        mass = float(np.sum(wts))
        L1 = float(np.sum(norms * wts))
        L2 = float(np.sum(norms**2 * wts))
        return mass, L1, L2

    def oracle_norm(self, phi, n=1, lam=0.0, w_dir=None, t=None):
        """Certified sup over theta of |phi(Khat_lambda)|.

        phi in {"T^n", "(I-T)T^n", "T_lambda^n", "(I-T)exp"}; for the
        semigroup tag supply t.  The certificate gap is stored in
        `last_cert_gap`.
        """
        mass, L1, L2 = self._moment_bounds(lam, w_dir)
        tilted = self._tilted_weights(lam, w_dir)
        if phi in ("T^n", "T_lambda^n") and np.all(tilted >= 0):
            # nonnegative kernel: |Khat| peaks at theta = 0 with value = mass
            self.last_cert_gap = 0.0
            return mass ** n
        if lam == 0.0 and self.density.is_symmetric() and np.all(tilted >= 0):
            # real symbol: reduce to a 1d extremum over the attained range
            return self._real_symbol_norm(phi, n, t, mass, L2)

        # work with the squared modulus F = |phi|^2: value and gradient are
        # exact; per-box Hessian bounds use the local symbol size s so that
        # boxes far from the |z| ridge prune immediately
        def hess_pn(s):
            # Hessian bound of |z|^(2n) where |z| <= s on the box
            sp = s ** (2 * max(n - 1, 0))
            return sp * (4.0 * n * max(n - 1, 0) * L1**2 + 2.0 * n * (L1**2 + s * L2))

        def grad_pn(s):
            return 2.0 * n * s ** (2 * n - 1) * L1 if n >= 1 else 0.0

        if phi in ("T^n", "T_lambda^n"):
            def f2grad(thetas):
                z, dz = self._symbol_and_grad(thetas, lam, w_dir)
                P = (z * z.conj()).real
                gradP = 2.0 * (z.conj()[:, None] * dz).real
                F = P**n
                gradF = (n * P ** (n - 1))[:, None] * gradP if n > 1 else gradP
                return F, gradF, np.abs(z)

            def m2_of(s):
                return hess_pn(s)
            cap = mass**n
        elif phi == "(I-T)T^n":
            def f2grad(thetas):
                z, dz = self._symbol_and_grad(thetas, lam, w_dir)
                P = (z * z.conj()).real
                gradP = 2.0 * (z.conj()[:, None] * dz).real
                one = 1.0 - z
                G = (one * one.conj()).real
                gradG = -2.0 * (one.conj()[:, None] * dz).real
                Pn = P**n
                gPn_val = n * P ** (n - 1) if n > 1 else np.ones_like(P)
                F = G * Pn
                gradF = gradG * Pn[:, None] + (G * gPn_val)[:, None] * gradP
                return F, gradF, np.abs(z)

            def m2_of(s):
                gs = 1.0 + s
                hG = 2.0 * (L1**2 + gs * L2)
                gG = 2.0 * gs * L1
                return (hG * s ** (2 * n) + 2.0 * gG * grad_pn(s)
                        + gs**2 * hess_pn(s))
            cap = (1.0 + mass) * mass**n
        elif phi == "(I-T)exp":
            if t is None:
                raise ConfigError("semigroup tag needs t")

            def f2grad(thetas):
                z, dz = self._symbol_and_grad(thetas, lam, w_dir)
                one = 1.0 - z
                G = (one * one.conj()).real
                gradG = -2.0 * (one.conj()[:, None] * dz).real
                E = np.exp(-2.0 * t * (1.0 - z.real))
                gradE = (2.0 * t * E)[:, None] * dz.real
                F = G * E
                gradF = gradG * E[:, None] + G[:, None] * gradE
                return F, gradF, np.abs(z)

            def m2_of(s):
                gs = 1.0 + s
                es = math.exp(-2.0 * t * (1.0 - min(s, mass)))
                hG = 2.0 * (L1**2 + gs * L2)
                gG = 2.0 * gs * L1
                gE = 2.0 * t * L1 * es
                hE = ((2.0 * t * L1) ** 2 + 2.0 * t * L2) * es
                return hG * es + 2.0 * gG * gE + gs**2 * hE
            cap = (1.0 + mass) * math.exp(t * max(mass - 1.0, 0.0))
        else:
            raise ConfigError(f"unknown multiplier tag {phi!r}")

        value, gap = _certified_sup(
            f2grad, m2_of, cap, self.d, sym_lip=L1, sym_cap=mass,
            target=self.sup_target, budget=self.eval_budget,
        )
        self.last_cert_gap = gap
        return value

    def _real_symbol_norm(self, phi, n, t, mass, L2):
        """Sup of |phi| for a real symbol via its certified attained range.

        A symmetric density has symbol z(theta) real with max z = mass at 0;
        the attained range is the interval [zmin, mass], so the sup reduces
        to a 1d extremum with known critical points.
        """
        zmin_lb, zmin_ub = self._symbol_min_bracket(L2)

        def phi1(s):
            if phi in ("T^n", "T_lambda^n"):
                return abs(s) ** n
            if phi == "(I-T)T^n":
                return abs(1.0 - s) * abs(s) ** n
            return abs(1.0 - s) * math.exp(-t * (1.0 - s))

        def interval_max(a, b):
            cands = [a, b]
            if phi == "(I-T)T^n":
                star = n / (n + 1.0)
                if a <= star <= b:
                    cands.append(star)
            elif phi == "(I-T)exp" and t > 0:
                star = 1.0 - 1.0 / t
                if a <= star <= b:
                    cands.append(star)
            return max(phi1(s) for s in cands)

        value = interval_max(zmin_ub, mass)
        upper = interval_max(zmin_lb, mass)
        self.last_cert_gap = max(upper - value, 0.0)
        return value

    def _symbol_min_bracket(self, L2, target=1e-6, budget=250_000):
        """Certified bracket for min_theta of a real symbol (Hessian <= L2)."""
        def f2grad(thetas):
            z, dz = self._symbol_and_grad(thetas, 0.0, None)
            return -z.real, -dz.real, np.abs(z)

        lb, gap = _certified_sup(
            f2grad, lambda s: L2, cap=float(np.sum(np.abs(self.weights))),
            dim=self.d, sym_lip=0.0, sym_cap=1.0, target=target, budget=budget,
            squared=False,
        )
        return -lb - gap, -lb

    def oracle_power(self, n: int) -> Density:
        """Exact K^(n) via FFT on a lattice box exceeding the support spread."""
        if n < 1:
            raise ConfigError("oracle_power needs n >= 1")
        lo = self.points.min(axis=0) * n
        hi = self.points.max(axis=0) * n
        shape = tuple(int(x) for x in (hi - lo + 1))
        base = np.zeros(shape)
        for x, w in zip(self.points, self.weights):
            base[tuple(x - self.points.min(axis=0))] = w
        spec = np.fft.fftn(base, s=shape, axes=tuple(range(self.d)))
        powd = np.fft.ifftn(spec ** n).real
        out = {}
        for idx in np.argwhere(powd > 1e-14):
            g = tuple(int(v) for v in (idx + lo))
            out[g] = float(powd[tuple(idx)])
        return Density(self.density.group, out, check=False)


def _certified_sup(f2grad, m2_of, cap, dim, sym_lip=0.0, sym_cap=1.0,
                   target=1e-10, budget=3_000_000, max_active=200_000,
                   squared=True):
    """Branch-and-bound sup of sqrt(F) (or F itself) over [-pi, pi]^dim.

    `f2grad(thetas)` returns (F, gradF, |z|) for the squared modulus F;
    each box carries the Taylor bound F(c) + |gradF(c)| r + m2(s) r^2 / 2
    with r the box circumradius and s a bound on |z| over the box
    (|z(c)| + sym_lip * r, clipped at sym_cap).  Returns (best value of
    sqrt(F) found, certificate gap); with squared=False the function F is
    optimized directly.
    """
    m0 = 1 << 14 if dim == 1 else 1 << 9
    axis = (np.arange(m0) + 0.5) / m0 * TWO_PI - math.pi
    if dim == 1:
        centers = axis.reshape(-1, 1)
    else:
        xs, ys = np.meshgrid(axis, axis, indexing="ij")
        centers = np.column_stack([xs.ravel(), ys.ravel()])
    h = math.pi / m0
    cap2 = cap * cap if squared else cap

    def box_ubs(cents, halfw):
        F, gradF, absz = f2grad(cents)
        r = halfw * math.sqrt(dim)
        gnorm = np.linalg.norm(gradF, axis=1)
        s = np.minimum(absz + sym_lip * r, sym_cap)
        m2 = np.array([m2_of(float(v)) for v in s]) if len(s) < 4096 else _m2_vec(m2_of, s)
        ub = np.minimum(F + gnorm * r + 0.5 * m2 * r * r, cap2)
        return F, ub

    evals = len(centers)
    F, ubs = box_ubs(centers, h)
    lbF = float(F.max())
    dropped_ub = 0.0
    boxes = centers

    def threshold(lbF_now):
        if not squared:
            return lbF_now + target
        return (math.sqrt(max(lbF_now, 0.0)) + target) ** 2

    keep = ubs > threshold(lbF)
    boxes, ubs = boxes[keep], ubs[keep]
    while len(boxes) and evals < budget:
        if len(boxes) > max_active:
            order = np.argsort(ubs)[::-1]
            dropped_ub = max(dropped_ub, float(ubs[order[max_active]]))
            boxes = boxes[order[:max_active]]
        h /= 2.0
        offsets = np.array(
            [off for off in np.ndindex(*(2,) * dim)], dtype=float) * 2.0 - 1.0
        children = (boxes[:, None, :] + h * offsets[None, :, :]).reshape(-1, dim)
        evals += len(children)
        F, ubs = box_ubs(children, h)
        lbF = max(lbF, float(F.max()))
        keep = ubs > threshold(lbF)
        boxes, ubs = children[keep], ubs[keep]
    ubF = lbF if not len(boxes) else float(ubs.max())
    ubF = max(ubF, dropped_ub, lbF)
    if not squared:
        return lbF, max(ubF - lbF, 0.0)
    lb = math.sqrt(max(lbF, 0.0))
    return lb, max(math.sqrt(ubF) - lb, 0.0)


def _m2_vec(m2_of, s):
    # monotone in s: interpolate on a log-spaced table instead of 1e6 calls
    smax = float(s.max())
    grid = np.linspace(0.0, smax, 512)
    table = np.array([m2_of(float(v)) for v in grid])
    idx = np.minimum(np.searchsorted(grid, s), len(grid) - 1)
    return table[idx]


# ---------------------------------------------------------------------------
# dense matrix oracle on finite groups
# ---------------------------------------------------------------------------

MATRIX_ORACLE_CAP = 5040


class MatrixOracle:
    """Dense |G| x |G| realizations of convolution operators on a finite group."""

    def __init__(self, ctx: GroupContext):
        if not ctx.is_finite:
            raise ConfigError("matrix oracle needs a finite group")
        if ctx.order > MATRIX_ORACLE_CAP:
            raise ConfigError(f"group order {ctx.order} exceeds cap {MATRIX_ORACLE_CAP}")
        self.ctx = ctx
        self.elements = ctx.elements()
        self.index = {g: i for i, g in enumerate(self.elements)}
        self.n = len(self.elements)

    def translation_matrix(self, g):
        """Matrix of L(g): (L(g)f)(h) = f(g^-1 h)."""
        M = np.zeros((self.n, self.n))
        for j, x in enumerate(self.elements):
            M[self.index[self.ctx.mul(g, x)], j] = 1.0
        return M

    def markov_matrix(self, k: Density):
        M = np.zeros((self.n, self.n))
        for g, w in k.weights.items():
            for j, x in enumerate(self.elements):
                M[self.index[self.ctx.mul(g, x)], j] += w
        return M

    def matrix_of(self, expr):
        """Dense matrix of an OperatorExpr (via its action on basis vectors)."""
        from .operators import GFunction, apply_expr

        cols = []
        for g in self.elements:
            f = GFunction(self.ctx, {g: 1.0})
            out = apply_expr(expr, f)
            col = np.zeros(self.n, dtype=complex)
            for h, v in out.values.items():
                col[self.index[h]] = v
            cols.append(col)
        M = np.column_stack(cols)
        if np.max(np.abs(M.imag)) < 1e-300:
            M = M.real
        return M

    def eigenvalues(self, M):
        return np.linalg.eigvals(M)

    def operator_norm(self, M):
        return float(np.linalg.norm(M, 2))

    def resolvent_norm(self, M, lam):
        """Exact ||(lam I - M)^{-1}||_2 = 1/sigma_min(lam I - M)."""
        A = lam * np.eye(self.n, dtype=complex) - M
        smin = float(np.linalg.svd(A, compute_uv=False)[-1])
        if smin < 1e-13:
            raise SingularResolvent(f"lambda={lam} is within 1e-13 of the spectrum")
        return 1.0 / smin

    def numerical_range_hull(self, M, samples=4096, seed=0):
        """Convex hull of sampled numerical-range points plus eigenvalues."""
        rng = np.random.default_rng(seed)
        pts = []
        for _ in range(samples):
            f = rng.standard_normal(self.n) + 1j * rng.standard_normal(self.n)
            f /= np.linalg.norm(f)
            pts.append(complex(np.vdot(f, M @ f)))
        pts.extend(complex(z) for z in np.linalg.eigvals(M))
        return MultiPoint([(z.real, z.imag) for z in pts]).convex_hull

    def spectrum_and_resolvent(self, expr_or_matrix, lam_grid, n_grid=(),
                               range_samples=4096, seed=0):
        """Eigenvalues, resolvent norms with hull-based bounds, and
        ||(I-T)T^n|| singular values.

        Returns a dict; `hull_slack` flags how far the sampled-hull bound
        d_lambda^{-1} sits from the exact resolvent norm (negative slack
        means the sampled hull under-approximates the numerical range).
        """
        M = expr_or_matrix if isinstance(expr_or_matrix, np.ndarray) \
            else self.matrix_of(expr_or_matrix)
        eigs = self.eigenvalues(M)
        hull = self.numerical_range_hull(M, samples=range_samples, seed=seed)
        rows = []
        for lam in lam_grid:
            lamc = complex(lam)
            exact = self.resolvent_norm(M, lamc)
            d_lam = hull.distance(Point(lamc.real, lamc.imag))
            bound = 1.0 / d_lam if d_lam > 0 else math.inf
            rows.append({
                "lambda_re": lamc.real,
                "lambda_im": lamc.imag,
                "resolvent_norm": exact,
                "hull_distance": d_lam,
                "hull_bound": bound,
                "hull_slack": bound - exact,
            })
        powers = []
        if n_grid:
            eye = np.eye(self.n)
            Mn = eye.copy()
            want = set(int(n) for n in n_grid)
            for n in range(1, max(want) + 1):
                Mn = Mn @ M
                if n in want:
                    powers.append({
                        "n": n,
                        "analytic_norm": self.operator_norm((eye - M) @ Mn),
                    })
        return {
            "eigenvalues": [complex(z) for z in eigs],
            "resolvent": rows,
            "analytic_powers": powers,
        }
