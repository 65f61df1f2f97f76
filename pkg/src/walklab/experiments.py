"""Measurement suites for the decay laws obeyed by centered walks.

Each suite measures a family of operator norms or kernel values on a grid,
fits the constants in the expected functional form, and reports verdicts
against configurable thresholds.  Derived envelopes are always checked
against directly measured quantities (envelope soundness), and violations
are counted rather than silently absorbed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .centering import is_centered, moment_vector
from .density import Density, DensitySequence, adjoint_and_symmetrize, power, power_sequence
from .errors import ConfigError, DegenerateFunction, NotCentered, UniformityFailed
from .groups import GroupContext, ball, growth_fit, word_metric
from .operators import (
    Compose,
    Diff,
    GFunction,
    IdentityOp,
    InhomProduct,
    PowerOp,
    PredicateSet,
    SemigroupOp,
    TOp,
    TPerturbed,
    WeightFn,
    gradient,
    norm_restricted,
    set_to_set_norm,
)
from .oracles import MultiplierOracle
from .reporting import FitReport, linear_fit, loglog_fit, r_squared


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class Grids:
    """Default measurement grids; override per group and experiment."""

    n_grid: tuple = (1, 2, 4, 8, 16, 32)
    lambda_grid: tuple = (-1.6, -0.8, -0.4, -0.2, -0.1, -0.05,
                          0.05, 0.1, 0.2, 0.4, 0.8, 1.6)
    t_grid: tuple = (1.0, 2.0, 5.0, 10.0, 100.0)
    r_sweep: tuple = (8, 12, 16, 24)
    sweep_tol: float = 1e-3
    norm_tol: float = 1e-8
    tent_radii: tuple = (8, 16, 32, 64, 128)
    seed: int = 7
    threads: int = 1


def _pool_map(fn, jobs, threads):
    """Deterministic map over independent grid jobs (order preserved)."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


@dataclass
class Thresholds:
    """Verdict cutoffs; the estimators are documented in each suite."""

    analytic_sup_max: float = 3.0       # sup n*a_n for "analytic" verdict
    analytic_growth_slope: float = 0.15  # max log-log slope of n*a_n
    gradient_ratio_max: float = 25.0
    gradient_growth_max: float = 2.0    # ratio across tent scales
    omega_max: float = 2.0
    pert_curvature_max: float = 3.0     # max (||T_lam|| - 1)/lam^2
    linear_slope_tol: float = 0.02      # |d log||T_lam||/d lam| at 0, centered
    offdiag_b_min: float = 0.3    # weakest per-series Gaussian slope
    envelope_slack: float = 1e-9
    gaussian_r2_min: float = 0.95
    gaussian_window: float = 12.0       # fit window rho^2/n <= window
    sectorial_max: float = 100.0
    finite_sup_max: float = 1e6


DEFAULT_GRIDS = Grids()
DEFAULT_THRESHOLDS = Thresholds()


def _nan_slope_rows(rows, xkey, ykey):
    xs = [r[xkey] for r in rows if r[ykey] > 0]
    ys = [r[ykey] for r in rows if r[ykey] > 0]
    if len(xs) < 2:
        return float("nan"), float("nan"), float("nan")
    return loglog_fit(xs, ys)


# ---------------------------------------------------------------------------
# test function families
# ---------------------------------------------------------------------------

class TestFunctionFamily:
    """Generators of probe functions used by the ratio suites."""

    @staticmethod
    def delta(ctx: GroupContext) -> GFunction:
        return GFunction.delta(ctx)

    @staticmethod
    def tent(ctx: GroupContext, R: int) -> GFunction:
        elems, _ = ball(ctx, R - 1)
        table = ctx.word_metric_table()
        return GFunction(ctx, {g: 1.0 - table.dist[g] / R for g in elems})

    @staticmethod
    def random_ball(ctx: GroupContext, R: int, seed: int, count: int = 8):
        elems, _ = ball(ctx, R)
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(count):
            vals = rng.standard_normal(len(elems)) + 1j * rng.standard_normal(len(elems))
            out.append(GFunction(ctx, dict(zip(elems, vals))))
        return out

    @staticmethod
    def character_window(ctx: GroupContext, theta, R: int) -> GFunction:
        elems, _ = ball(ctx, R - 1)
        table = ctx.word_metric_table()
        theta = np.asarray(theta, dtype=float)
        vals = {}
        for g in elems:
            ab = np.asarray(ctx.abelianize(g), dtype=float)
            vals[g] = (1.0 - table.dist[g] / R) * np.exp(1j * float(theta @ ab))
        return GFunction(ctx, vals)

    @staticmethod
    def default_family(ctx: GroupContext, grids: Grids, max_ball=20000):
        """Labeled probes: point mass, tents, slow character windows
        (wavelength matched to the window, the probes that see drift),
        and random ball functions.  Radii are capped so probe supports stay
        under max_ball elements (exponential-growth groups)."""
        fam = [("delta", TestFunctionFamily.delta(ctx))]
        radii = [r for r in grids.tent_radii if ctx.rank >= 1] or [2, 3]
        if ctx.is_finite:
            radii = []
        radii = capped_radii(ctx, radii, max_ball)
        for r in radii:
            fam.append((f"tent_{r}", TestFunctionFamily.tent(ctx, r)))
        if ctx.rank >= 1:
            for r in radii:
                theta = [0.0] * ctx.rank
                theta[0] = math.pi / r
                fam.append((f"window_{r}",
                            TestFunctionFamily.character_window(ctx, theta, r)))
        for i, f in enumerate(TestFunctionFamily.random_ball(
                ctx, min(6, max(radii, default=4)), grids.seed, count=4)):
            fam.append((f"random_{i}", f))
        return fam


def capped_radii(ctx: GroupContext, radii, max_ball=20000):
    """Largest prefix of radii whose balls stay under max_ball elements.

    Grows the shared metric table layer by layer, so exponential groups
    never enumerate a ball far past the cap.
    """
    table = ctx.word_metric_table()
    out = []
    for r in sorted(set(radii)):
        while table.radius < r and not table._closed:
            if len(table.dist) > max_ball:
                break
            table.extend(table.radius + 1)
        if table.radius < r:
            break
        size = sum(len(table.layers[i]) for i in range(r + 1))
        if size > max_ball:
            break
        out.append(r)
    if not out and radii:
        out = [2]
    return out


def default_psi_library(ctx: GroupContext, grids: Grids):
    """The weight library quantified over by the perturbation suites."""
    psis = [WeightFn(ctx, "rho")]
    base = ball(ctx, 2)[0]
    psis.append(WeightFn(ctx, "dist_to_set", target=base))
    if ctx.rank >= 1:
        w = [0.0] * ctx.rank
        w[0] = 1.0
        try:
            psi = WeightFn(ctx, "linear", vector=w)
            psi.validate_on(ball(ctx, 2)[0])
            psis.append(psi)
        except ConfigError:
            pass
    return psis


# ---------------------------------------------------------------------------
# analyticity
# ---------------------------------------------------------------------------

def analyticity_scan(k: Density, n_grid=None, r_policy=None,
                     grids: Grids = DEFAULT_GRIDS,
                     thresholds: Thresholds = DEFAULT_THRESHOLDS) -> FitReport:
    """Decay of a_n = ||(I - T) T^n|| on the ball-restricted domain.

    Reports sup n*a_n, the log-log slope of a_n, and an analyticity verdict
    (bounded n*a_n that is not growing across the measured range).
    """
    ks = k if isinstance(k, (list, tuple)) else [k]
    ctx = ks[0].group
    n_grid = tuple(n_grid or grids.n_grid)
    sweep = list(r_policy or grids.r_sweep)

    def job(n):
        per_k = []
        for kk in ks:
            t = TOp(kk)
            expr = Compose(IdentityOp(ctx) - t, PowerOp(t, n))
            per_k.append(norm_restricted(
                expr, p=2, sweep=sweep, tol=grids.norm_tol,
                sweep_tol=grids.sweep_tol, seed=grids.seed))
        return per_k

    results = _pool_map(job, list(n_grid), grids.threads)
    rows = []
    sweeps = {}
    for n, per_k in zip(n_grid, results):
        worst = max(est.value for est in per_k)
        for i, est in enumerate(per_k):
            sweeps[f"n={n},k={i}"] = est.sweep
        rows.append({"n": n, "a_n": worst, "n_a_n": n * worst})
    slope, icpt, resid = _nan_slope_rows(rows, "n", "a_n")
    sup_nan = max(r["n_a_n"] for r in rows)
    top = rows[len(rows) // 2:]  # judge growth past the small-n transient
    growth_slope, _, _ = _nan_slope_rows(top, "n", "n_a_n") \
        if all(r["n_a_n"] > 0 for r in top) else (0.0, 0.0, 0.0)
    verdict = (sup_nan <= thresholds.analytic_sup_max
               and (math.isnan(growth_slope)
                    or growth_slope <= thresholds.analytic_growth_slope))
    return FitReport(
        experiment="analyticity",
        measured=rows,
        fitted={"sup_n_a_n": sup_nan, "slope": slope, "intercept": icpt},
        residual=resid,
        sweeps=sweeps,
        verdicts={"analytic": verdict},
        context={"group": ctx.descriptor(), "n_grid": list(n_grid),
                 "r_policy": sweep, "family_size": len(ks),
                 "csv_columns": {"n": "power index",
                                 "a_n": "restricted norm of (I-T)T^n",
                                 "n_a_n": "n times a_n"}},
    )


# ---------------------------------------------------------------------------
# gradient form ratios
# ---------------------------------------------------------------------------

def gradient_form_suite(k: Density, family=None, grids: Grids = DEFAULT_GRIDS,
                        thresholds: Thresholds = DEFAULT_THRESHOLDS) -> FitReport:
    """Ratios comparing the Dirichlet-type form against squared gradients.

    Measures |((I-T)f, f)| / Gamma_2(f)^2 and the real-part two-sided
    version over the probe family, the mixed Gamma_inf * Gamma_1 pairing,
    and the pairing of (I-T) against Lipschitz weights normalized by
    Gamma_1(f).
    """
    ctx = k.group
    family = family or TestFunctionFamily.default_family(ctx, grids)
    family = [f if isinstance(f, tuple) else (f"f{i}", f)
              for i, f in enumerate(family)]
    t = TOp(k)
    ident = IdentityOp(ctx)
    lap = ident - t
    rows = []
    for label, f in family:
        g2 = gradient(f, 2)
        if g2 == 0:
            continue
        lf = lap.apply(f)
        pairing = lf.inner(f)
        rows.append({
            "f": label,
            "support": len(f),
            "ratio_abs": abs(pairing) / g2**2,
            "ratio_re": pairing.real / g2**2,
            "gamma2": g2,
        })
    if not rows:
        raise DegenerateFunction("every probe function has zero gradient")
    mixed = []
    for _, f1 in family[:4]:
        for _, f2 in family[:4]:
            gi, g1 = gradient(f1, math.inf), gradient(f2, 1)
            if gi == 0 or g1 == 0:
                continue
            mixed.append(abs(lap.apply(f1).inner(f2)) / (gi * g1))
    psi_rows = []
    for psi in default_psi_library(ctx, grids):
        for label, f in family:
            g1 = gradient(f, 1)
            if g1 == 0:
                continue
            # ((I-T)psi, f) needs psi on supp f and its K-shifts
            val = 0j
            for g, fv in f.values.items():
                lap_psi = psi(g) - math.fsum(
                    w * psi(ctx.mul(ctx.inv(a), g)) for a, w in k.weights.items())
                val += lap_psi * fv.conjugate()
            psi_rows.append({"psi": psi.label, "f": label,
                             "ratio_psi": abs(val) / g1})
    sup_abs = max(r["ratio_abs"] for r in rows)
    re_vals = [r["ratio_re"] for r in rows]

    def scale_growth(prefix):
        scaled = [r for r in rows if str(r["f"]).startswith(prefix)]
        if len(scaled) < 2 or scaled[0]["ratio_abs"] <= 0:
            return 1.0
        return scaled[-1]["ratio_abs"] / scaled[0]["ratio_abs"]

    growth = max(scale_growth("tent_"), scale_growth("window_"))
    verdict = (sup_abs <= thresholds.gradient_ratio_max
               and growth <= thresholds.gradient_growth_max)
    return FitReport(
        experiment="gradient_form",
        measured=rows + psi_rows,
        fitted={
            "sup_ratio": sup_abs,
            "re_ratio_min": min(re_vals),
            "re_ratio_max": max(re_vals),
            "mixed_ratio_max": max(mixed) if mixed else float("nan"),
            "psi_ratio_max": max((r["ratio_psi"] for r in psi_rows),
                                 default=float("nan")),
            "tent_scale_growth": growth,
        },
        verdicts={"form_bounded": verdict},
        context={"group": ctx.descriptor(), "family_size": len(family),
                 "csv_columns": {"f": "probe index",
                                 "ratio_abs": "|((I-T)f,f)|/Gamma_2^2",
                                 "ratio_re": "Re((I-T)f,f)/Gamma_2^2",
                                 "ratio_psi": "|((I-T)psi,f)|/Gamma_1(f)"}},
    )


# ---------------------------------------------------------------------------
# weighted perturbation growth
# ---------------------------------------------------------------------------

def davies_gaffney_fit(k: Density, psi_list=None, lambda_grid=None, n_grid=None,
                       r_policy=None, grids: Grids = DEFAULT_GRIDS,
                       thresholds: Thresholds = DEFAULT_THRESHOLDS) -> FitReport:
    """Growth of the weighted norms ||e^{lam psi} T^n e^{-lam psi}||.

    omega_hat is the max of log||T_lam^n|| / (lam^2 n) over the grid; the
    near-zero expansion ||T_lam|| ~ 1 + s lam + c lam^2 is fitted from the
    smallest lambdas (s detects drift).  The l1 distance from T_lam to T and
    the quadratic-form perturbation ratios are reported alongside.
    """
    ctx = k.group
    psis = psi_list or default_psi_library(ctx, grids)
    lams = tuple(lambda_grid or grids.lambda_grid)
    ns = tuple(n_grid or grids.n_grid)
    sweep = list(r_policy or grids.r_sweep)
    jobs = [(psi, lam, n) for psi in psis for lam in lams for n in ns]

    def job(args):
        psi, lam, n = args
        expr = PowerOp(TPerturbed(k, psi, lam), n)
        est = norm_restricted(expr, p=2, sweep=sweep, tol=grids.norm_tol,
                              sweep_tol=grids.sweep_tol, seed=grids.seed)
        return {"psi": psi.label, "lambda": lam, "n": n,
                "norm": est.value,
                "log_norm_rate": math.log(max(est.value, 1e-300))
                / (lam * lam * n)}

    rows = _pool_map(job, jobs, grids.threads)
    omega_hat = max(max(r["log_norm_rate"], 0.0) for r in rows)
    # near-zero expansion of ||T_lam|| from the smallest |lambda| pairs
    small = sorted({abs(l) for l in lams})[:3]
    fit_pts = [(lam, math.log(max(r["norm"], 1e-300)))
               for r in rows if r["n"] == ns[0] and abs(r["lambda"]) in small
               and r["psi"] == psis[-1].label
               for lam in [r["lambda"]]]
    if len(fit_pts) >= 3:
        xs = np.array([p[0] for p in fit_pts])
        ys = np.array([p[1] for p in fit_pts])
        coef = np.polyfit(xs, ys, 2)
        slope0 = float(coef[1])
        curv0 = float(coef[0])
    else:
        slope0, curv0 = float("nan"), float("nan")
    curvature = max((r["norm"] - 1.0) / (r["lambda"] ** 2)
                    for r in rows if r["n"] == ns[0])
    # l1 kernel distance bound for the linear weight (exact tilted kernel)
    l1_rows = []
    if ctx.rank >= 1 and any(p.kind == "linear" for p in psis):
        psi_lin = next(p for p in psis if p.kind == "linear")
        for lam in lams:
            dist = math.fsum(w * abs(math.exp(lam * psi_lin(g)) - 1.0)
                             for g, w in k.weights.items())
            bound = abs(lam) * math.exp(max(omega_hat, 0.1) * lam * lam)
            l1_rows.append({"lambda": lam, "l1_distance": dist,
                            "l1_c": dist / bound if bound > 0 else 0.0})
    # quadratic form perturbation ratios over a probe family (eps = 1/2)
    fam = [f for _, f in TestFunctionFamily.default_family(ctx, grids)[:6]]
    q_rows = []
    for lam in [l for l in lams if abs(l) <= 1.0][:6]:
        for i, f in enumerate(fam):
            g2 = gradient(f, 2)
            n2 = f.norm(2)
            if g2 == 0 or n2 == 0:
                continue
            t = TOp(k)
            q = n2**2 - t.apply(f).norm(2) ** 2
            tl = TPerturbed(k, psis[0], lam)
            ql = n2**2 - tl.apply(f).norm(2) ** 2
            cprime = (abs(q - ql) - 0.5 * q) / (3.0 * lam * lam * n2 * n2)
            q_rows.append({"lambda": lam, "f": i, "q": q, "q_lambda": ql,
                           "q_ratio": q / g2**2, "c_prime": max(cprime, 0.0)})
    verdict_omega = omega_hat <= thresholds.omega_max
    verdict_slope = abs(slope0) <= thresholds.linear_slope_tol \
        if not math.isnan(slope0) else True
    verdict_curv = curvature <= thresholds.pert_curvature_max
    return FitReport(
        experiment="davies_gaffney",
        measured=rows + l1_rows + q_rows,
        fitted={
            "omega_hat": omega_hat,
            "slope_at_zero": slope0,
            "curvature_at_zero": curv0,
            "curvature_sup": curvature,
            "l1_c": max((r["l1_c"] for r in l1_rows), default=float("nan")),
            "q_ratio_min": min((r["q_ratio"] for r in q_rows), default=float("nan")),
            "q_ratio_max": max((r["q_ratio"] for r in q_rows), default=float("nan")),
            "c_prime": max((r["c_prime"] for r in q_rows), default=float("nan")),
        },
        verdicts={"omega_finite": verdict_omega,
                  "zero_slope": verdict_slope,
                  "quadratic_curvature": verdict_curv,
                  "weighted_growth": verdict_omega and verdict_slope and verdict_curv},
        context={"group": ctx.descriptor(),
                 "psi_library": [p.label for p in psis],
                 "lambda_grid": list(lams), "n_grid": list(ns),
                 "r_policy": sweep,
                 "csv_columns": {"psi": "weight", "lambda": "tilt",
                                 "n": "power", "norm": "restricted norm",
                                 "log_norm_rate": "log norm / (lam^2 n)"}},
    )


# ---------------------------------------------------------------------------
# set-to-set bounds
# ---------------------------------------------------------------------------

def default_pair_family(ctx: GroupContext, d_values=(2, 4, 6, 8), f_radius=1,
                        n_grid=()):
    """Labeled pair series at exact distances d.

    "annulus": word-metric annuli over the n grid.  "half+/-": one-sided
    half spaces through the first abelianization coordinate.  "comove+/-":
    half-space cuts co-moving with d ~ n/3, the probes where a drifting
    walk's mass crosses the cut (the regime separating Gaussian decay from
    ballistic transport); each entry lists the n values it is measured at.
    """
    F = ball(ctx, f_radius)[0]
    ns = tuple(n_grid)
    pairs = []
    for d in d_values:
        cut = d + f_radius

        def mk_annulus(cc=cut):
            return PredicateSet(
                lambda g, cc=cc: word_metric(ctx, g) >= cc, label=f"rho>={cc}")
        pairs.append({"d": d, "E": mk_annulus(), "F": F, "series": "annulus",
                      "label": f"annulus d={d}", "n_values": ns})

    def mk_half(cc, s):
        return PredicateSet(
            lambda g, cc=cc, s=s: s * ctx.abelianize(g)[0] >= cc,
            label=f"half{'+' if s > 0 else '-'}>={cc}")

    if ctx.rank >= 1:
        for d in d_values:
            for sign in (+1, -1):
                tag = "half+" if sign > 0 else "half-"
                pairs.append({"d": d, "E": mk_half(d + f_radius, sign), "F": F,
                              "series": tag, "label": f"{tag} d={d}",
                              "n_values": ns})
        for n in ns:
            if n < 8:
                continue  # the ballistic-vs-diffusive regime needs n >> 1
            d = max(2, int(round(n / 3)))
            for sign in (+1, -1):
                tag = "comove+" if sign > 0 else "comove-"
                pairs.append({"d": d, "E": mk_half(d + f_radius, sign), "F": F,
                              "series": tag, "label": f"{tag} d={d},n={n}",
                              "n_values": (n,)})
    return pairs


def offdiagonal_suite(k: Density, n_grid=None, pair_family=None, omega_hat=None,
                      grids: Grids = DEFAULT_GRIDS,
                      thresholds: Thresholds = DEFAULT_THRESHOLDS,
                      envelope_c=1.0, davies_kwargs=None) -> FitReport:
    """Measured ||chi_E T^n chi_F|| against the derived Gaussian envelope.

    The envelope c*exp(-d^2/(16 omega n)) comes from the measured weighted
    growth rate omega via the optimal tilt lam = d/(4 omega n) against the
    distance weight of F; violations are counted, never absorbed.  The
    converse reconstruction bounds the weighted norm by block sums of
    set-to-set norms and is reported for comparison.
    """
    ctx = k.group
    ns = tuple(n_grid or grids.n_grid)
    pairs = pair_family or default_pair_family(ctx, n_grid=ns)
    if omega_hat is None:
        fit = davies_gaffney_fit(k, grids=grids, thresholds=thresholds,
                                 **(davies_kwargs or {}))
        omega_hat = max(fit.fitted["omega_hat"], 1e-6)
    rows = []
    violations = 0
    for pair in pairs:
        d = pair["d"]
        for n in pair.get("n_values", ns):
            est = set_to_set_norm(k, n, pair["E"], pair["F"], p=2)
            envelope = envelope_c * math.exp(-d * d / (16.0 * omega_hat * n))
            ok = est.value <= envelope * (1.0 + thresholds.envelope_slack)
            violations += 0 if ok else 1
            rows.append({"pair": pair["label"], "series": pair["series"],
                         "d": d, "n": n,
                         "norm": est.value, "envelope": envelope,
                         "within": ok})
    # per-series Gaussian slopes of log norm against u = d^2/n; the verdict
    # takes the weakest series (a co-moving cut stays flat under drift)
    series_fits = {}
    for series in sorted({r["series"] for r in rows}):
        pts = [(r["d"] ** 2 / r["n"], math.log(r["norm"]))
               for r in rows if r["series"] == series and r["norm"] > 1e-300]
        us = [p[0] for p in pts]
        # a slope needs at least three points spanning a factor of 2 in u
        if len(pts) >= 3 and max(us) >= 2.0 * min(us):
            slope_fit, log_c, _ = linear_fit(us, [p[1] for p in pts])
            series_fits[series] = {"b": -slope_fit,
                                   "c": math.exp(log_c),
                                   "points": len(pts)}
    b_min_series = min((f["b"] for f in series_fits.values()),
                       default=float("nan"))
    pts = [(r["d"] ** 2 / r["n"], math.log(r["norm"]))
           for r in rows if r["norm"] > 1e-300]
    if len(pts) >= 2:
        slope_fit, log_c, resid = linear_fit([p[0] for p in pts],
                                             [p[1] for p in pts])
        b_hat = -slope_fit
        fit_r2 = r_squared([p[0] for p in pts], [p[1] for p in pts],
                           slope_fit, log_c)
    else:
        b_hat, log_c, resid, fit_r2 = (float("nan"),) * 4
    # converse: reconstruct the weighted-norm bound from block norms
    recon = _block_reconstruction(k, ns[min(2, len(ns) - 1)], grids)
    verdict = (violations == 0
               and (math.isnan(b_min_series)
                    or b_min_series >= thresholds.offdiag_b_min))
    return FitReport(
        experiment="offdiagonal",
        measured=rows,
        fitted={"omega_hat": omega_hat, "b_hat": b_hat,
                "c_hat": math.exp(log_c) if not math.isnan(log_c) else float("nan"),
                "fit_r2": fit_r2,
                "series_b": {s: f["b"] for s, f in series_fits.items()},
                "b_min_series": b_min_series,
                "violations": violations,
                "reconstructed_omega": recon["omega"],
                "reconstruction_ratio": recon["ratio"]},
        residual=resid,
        verdicts={"envelope_sound": violations == 0,
                  "gaussian_decay": verdict},
        context={"group": ctx.descriptor(), "n_grid": list(ns),
                 "envelope_c": envelope_c,
                 "csv_columns": {"pair": "set pair", "d": "distance",
                                 "n": "power", "norm": "exact norm",
                                 "envelope": "derived bound"}},
    )


def _block_reconstruction(k: Density, n: int, grids: Grids, lam=0.4, window=None):
    """Bound ||e^{lam rho} T^n e^{-lam rho}|| by block sums of set norms.

    Blocks are the annuli {j sqrt(n) <= rho < (j+1) sqrt(n)} intersected
    with a stated window ball; the row/column sums of the weighted block
    norms bound the weighted norm (restricted comparison value reported).
    """
    ctx = k.group
    step = max(1, int(math.isqrt(n)))
    reach = k.max_step() * n
    if window is None:
        window = 4 * step + reach
        # keep the stated window ball small enough for the block Gram solves
        fit = capped_radii(ctx, range(1, window + 1), max_ball=600)
        window = min(window, max(fit) if fit else 2)
    table = ctx.word_metric_table()
    table.extend(window)
    kmax = window // step
    blocks = []
    for j in range(kmax + 1):
        lo, hi = j * step, (j + 1) * step
        members = [g for g in ball(ctx, min(hi - 1, window))[0]
                   if lo <= table.dist[g] < hi]
        blocks.append(members)
    a = np.zeros((len(blocks), len(blocks)))
    for j, Fj in enumerate(blocks):
        if not Fj:
            continue
        for i, Ei in enumerate(blocks):
            if not Ei or abs(i - j) * step - step > reach:
                continue
            est = set_to_set_norm(k, n, set(Ei), Fj, p=2)
            a[i, j] = math.exp(lam * (abs(i - j) + 1) * step) * est.value
    row = float(a.sum(axis=1).max())
    col = float(a.sum(axis=0).max())
    bound = math.sqrt(row * col)
    direct = norm_restricted(
        PowerOp(TPerturbed(k, WeightFn(ctx, "rho"), lam), n), p=2,
        sweep=[min(8, window)], tol=grids.norm_tol, seed=grids.seed).value
    omega = math.log(max(bound, 1e-300)) / (lam * lam * n)
    return {"omega": omega, "bound": bound, "direct": direct,
            "ratio": bound / max(direct, 1e-300)}


# ---------------------------------------------------------------------------
# pointwise kernel bounds
# ---------------------------------------------------------------------------

def pointwise_gaussian(k: Density, n_grid=None, grids: Grids = DEFAULT_GRIDS,
                       thresholds: Thresholds = DEFAULT_THRESHOLDS,
                       growth_n_max=12, chain_lambdas=(0.0, 0.2, 0.4, 0.8, 1.6),
                       chain_r_end=None) -> FitReport:
    """On-diagonal decay, Gaussian shape regression, tail sums, and the
    weighted-factorization envelope for convolution powers.

    Requires a centered density.  The envelope multiplies the measured
    2->inf, 2->2 (power n-2) and 1->2 weighted factors and must dominate
    K^(n) pointwise; the check is flagged exploratory on exponential-growth
    groups, where only super-polynomial on-diagonal decay is asserted.
    """
    if not is_centered(k, 1e-10):
        raise NotCentered("pointwise Gaussian suite needs a centered density")
    ctx = k.group
    ns = sorted(set(n_grid or grids.n_grid))
    n_max = max(ns)
    powers = power_sequence(k, n_max + 1)
    growth = growth_fit(ctx, growth_n_max) if not ctx.is_finite else None
    growth_kind = growth.verdicts["growth"] if growth else "finite"
    degree = growth.fitted["degree"] if growth else 0.0
    table = ctx.word_metric_table()
    step = k.max_step()
    table.extend(n_max * step + 1)

    rows = [{"n": n, "on_diag": powers[n - 1][ctx.identity],
             "n_scaled": n ** (degree / 2.0) * powers[n - 1][ctx.identity]}
            for n in ns]
    diag_slope, _, diag_resid = _nan_slope_rows(rows, "n", "on_diag")

    # Gaussian envelope regression on shell maxima: the bound is an upper
    # envelope, so fit log max_{rho(g)=rho} K^(n)(g) + (D/2) log n
    # against rho^2/n
    shell = {}
    for n in ns:
        if n < 4:
            continue
        kn = powers[n - 1]
        for g, v in kn.weights.items():
            rho = table.dist[g]
            key = (n, rho)
            if v > shell.get(key, 0.0):
                shell[key] = v
    xs, ys = [], []
    for (n, rho), v in shell.items():
        u = rho * rho / n
        if u > thresholds.gaussian_window or v <= 0:
            continue
        xs.append(u)
        ys.append(math.log(v) + (degree / 2.0) * math.log(n))
    if len(xs) >= 8:
        slope_b, icpt_b, _ = linear_fit(xs, ys)
        b_hat = -slope_b
        r2 = r_squared(xs, ys, slope_b, icpt_b)
    else:
        b_hat, r2 = float("nan"), float("nan")

    # escape tails: sum over rho >= r of K^(n) against c e^{-b r^2 / n}
    tail_rows = []
    for n in ns:
        if n < 4:
            continue
        kn = powers[n - 1]
        by_rho = {}
        for g, v in kn.weights.items():
            by_rho.setdefault(table.dist[g], []).append(v)
        radii = sorted(by_rho)
        acc = 0.0
        for rho in reversed(radii):
            acc += math.fsum(by_rho[rho])
            if rho >= 1 and acc > 1e-280:
                tail_rows.append({"n": n, "r": rho, "tail": acc,
                                  "u": rho * rho / n})
    tail_pts = [(t["u"], math.log(t["tail"])) for t in tail_rows
                if 0.5 <= t["u"] <= thresholds.gaussian_window]
    if len(tail_pts) >= 4:
        tb, ti, _ = linear_fit([p[0] for p in tail_pts], [p[1] for p in tail_pts])
        tail_b = -tb
    else:
        tail_b = float("nan")

    # weighted factorization envelope with psi = rho
    env_rows, violations = _chain_envelope(
        k, powers, ns, table, chain_lambdas, grids,
        r_end=chain_r_end) if growth_kind != "exponential" or True else ([], 0)

    # super-polynomial check: slope over the top half vs bottom half
    half = len(ns) // 2
    lo_slope, _, _ = _nan_slope_rows(rows[: half + 1], "n", "on_diag")
    hi_slope, _, _ = _nan_slope_rows(rows[half:], "n", "on_diag")
    superpoly = hi_slope < lo_slope - 0.1 if not math.isnan(hi_slope) else False

    verdicts = {
        "envelope_sound": violations == 0,
        "gaussian_fit": (not math.isnan(r2)) and r2 >= thresholds.gaussian_r2_min
        and b_hat > 0,
    }
    if growth_kind == "exponential":
        verdicts["superpolynomial_diag"] = superpoly
        verdicts["escape_exploratory"] = True
    return FitReport(
        experiment="pointwise_gaussian",
        measured=rows + tail_rows + env_rows,
        fitted={"diag_slope": diag_slope, "degree": degree, "b_hat": b_hat,
                "r_squared": r2, "tail_b": tail_b,
                "chain_violations": violations},
        residual=diag_resid,
        verdicts=verdicts,
        context={"group": ctx.descriptor(), "growth": growth_kind,
                 "n_grid": list(ns),
                 "gaussian_window": thresholds.gaussian_window,
                 "csv_columns": {"n": "power", "on_diag": "K^(n)(e)",
                                 "r": "radius", "tail": "mass beyond r"}},
    )


def _chain_envelope(k, powers, ns, table, lambdas, grids, r_end=None):
    """Pointwise envelope from the weighted factorization.

    K^(n)(g) <= min over lam of e^{-lam (rho(g)-1)} * ||T~_lam||_{2->inf}
    * ||T~_lam||_{2->2}^{n-2} * ||T~_lam||_{1->2} with psi = rho; the end
    factors are suprema of weighted column/row l2 masses over a stated ball.
    """
    ctx = k.group
    psi = WeightFn(ctx, "rho")
    step = k.max_step()
    r_end = r_end or (2 * step + 4)
    probe, _ = ball(ctx, r_end)
    factors = {}
    for lam in lambdas:
        two_inf = 0.0
        one_two = 0.0
        for y in probe:
            s = math.fsum(
                w * w * math.exp(2 * lam * (table.dist[y]
                                            - word_metric(ctx, ctx.mul(ctx.inv(a), y))))
                for a, w in k.weights.items())
            two_inf = max(two_inf, s)
            s2 = math.fsum(
                w * w * math.exp(2 * lam * (word_metric(ctx, ctx.mul(a, y))
                                            - table.dist[y]))
                for a, w in k.weights.items())
            one_two = max(one_two, s2)
        mid = norm_restricted(TPerturbed(k, psi, lam), p=2,
                              sweep=list(grids.r_sweep), tol=grids.norm_tol,
                              sweep_tol=grids.sweep_tol, seed=grids.seed).value
        factors[lam] = (math.sqrt(two_inf), mid, math.sqrt(one_two))
    rows = []
    violations = 0
    for n in ns:
        if n < 3:
            continue
        kn = powers[n - 1]
        worst_ratio = 0.0
        worst_g = None
        for g, v in kn.weights.items():
            rho = table.dist[g]
            env = min(
                math.exp(-lam * (rho - 1)) * fi * (mid ** (n - 2)) * fo
                for lam, (fi, mid, fo) in factors.items())
            ratio = v / env if env > 0 else math.inf
            if ratio > worst_ratio:
                worst_ratio = ratio
                worst_g = rho
        ok = worst_ratio <= 1.0 + 1e-9
        violations += 0 if ok else 1
        rows.append({"n": n, "chain_worst_ratio": worst_ratio,
                     "chain_worst_rho": worst_g, "chain_ok": ok})
    return rows, violations


# ---------------------------------------------------------------------------
# difference regularity
# ---------------------------------------------------------------------------

def difference_regularity(k: Density, n_grid=None, h_list=None, psi=None,
                          lambda_grid=(0.0, 0.2, 0.4), b_hat=None,
                          grids: Grids = DEFAULT_GRIDS,
                          thresholds: Thresholds = DEFAULT_THRESHOLDS,
                          r_policy=None) -> FitReport:
    """Spatial and time difference decay of the iterated operators.

    Fits c in ||diff_h T_lam^n|| ~ c rho(h) n^{-1/2} e^{omega lam^2 n} and
    reports the scaled time-difference supremum
    n^{1 + D/2} |K^(n) - K^(n+1)| e^{b rho^2 / n}.
    """
    if not is_centered(k, 1e-10):
        raise NotCentered("difference regularity needs a centered density")
    ctx = k.group
    ns = tuple(n_grid or grids.n_grid)
    hs = h_list or [u for u in ctx.generators if u != ctx.identity][:2]
    psi = psi or default_psi_library(ctx, grids)[0]
    sweep = list(r_policy or grids.r_sweep)
    rows = []
    for h in hs:
        rho_h = word_metric(ctx, h)
        for lam in lambda_grid:
            base = TPerturbed(k, psi, lam) if lam != 0.0 else TOp(k)
            for n in ns:
                expr = Compose(Diff(ctx, h), PowerOp(base, n))
                est = norm_restricted(expr, p=2, sweep=sweep,
                                      tol=grids.norm_tol,
                                      sweep_tol=grids.sweep_tol,
                                      seed=grids.seed)
                c_val = est.value * math.sqrt(n) / rho_h
                rows.append({"h": str(ctx.encode(h)), "lambda": lam, "n": n,
                             "norm": est.value, "c_scaled": c_val})
        # one-step analytic decay under the same tilt
        for lam in lambda_grid:
            base = TPerturbed(k, psi, lam) if lam != 0.0 else TOp(k)
            for n in ns:
                expr = Compose(IdentityOp(ctx) - base, PowerOp(base, n))
                rows.append({"h": "(I-T)", "lambda": lam, "n": n,
                             "norm": norm_restricted(
                                 expr, p=2, sweep=sweep, tol=grids.norm_tol,
                                 sweep_tol=grids.sweep_tol,
                                 seed=grids.seed).value,
                             "c_scaled": float("nan")})
    zero = [r for r in rows if r["lambda"] == 0.0 and r["h"] != "(I-T)"]
    c_vals = [r["c_scaled"] for r in zero]
    stability = max(c_vals) / min(c_vals) if c_vals else float("nan")
    # time differences, scaled by the Gaussian weight
    degree = growth_fit(ctx, 10).fitted["degree"] if not ctx.is_finite else 0.0
    if b_hat is None:
        b_hat = 0.0
    table = ctx.word_metric_table()
    td_rows = []
    powers = power_sequence(k, max(ns) + 1)
    for n in ns:
        kn, kn1 = powers[n - 1], powers[n]
        sup_val = 0.0
        for g in set(kn.weights) | set(kn1.weights):
            u = table.dist[g] ** 2 / n
            w = math.exp(min(b_hat * u, 600.0))
            sup_val = max(sup_val, abs(kn[g] - kn1[g]) * w)
        td_rows.append({"n": n,
                        "time_diff_scaled": n ** (1.0 + degree / 2.0) * sup_val})
    td_sup = max(r["time_diff_scaled"] for r in td_rows)
    verdict = (stability <= 1.25 if c_vals else True) \
        and td_sup <= thresholds.finite_sup_max
    return FitReport(
        experiment="difference_regularity",
        measured=rows + td_rows,
        fitted={"c_scaled_min": min(c_vals) if c_vals else float("nan"),
                "c_scaled_max": max(c_vals) if c_vals else float("nan"),
                "c_stability": stability,
                "time_diff_sup": td_sup,
                "b_hat_used": b_hat, "degree": degree},
        verdicts={"difference_decay": verdict},
        context={"group": ctx.descriptor(), "psi": psi.label,
                 "n_grid": list(ns),
                 "csv_columns": {"h": "difference direction",
                                 "norm": "restricted norm",
                                 "c_scaled": "norm * sqrt(n)/rho(h)"}},
    )


# ---------------------------------------------------------------------------
# semigroup analyticity
# ---------------------------------------------------------------------------

def semigroup_analyticity(k: Density, t_grid=None, family=None,
                          grids: Grids = DEFAULT_GRIDS,
                          thresholds: Thresholds = DEFAULT_THRESHOLDS,
                          r_policy=None) -> FitReport:
    """t ||(I-T) e^{-t(I-T)}|| over a time grid plus the sectoriality ratio."""
    if not is_centered(k, 1e-10):
        raise NotCentered("semigroup analyticity needs a centered density")
    ctx = k.group
    ts = tuple(t_grid or grids.t_grid)
    sweep = list(r_policy or grids.r_sweep)
    ident = IdentityOp(ctx)
    t_op = TOp(k)
    rows = []
    for t in ts:
        expr = Compose(ident - t_op, SemigroupOp(k, t))
        est = norm_restricted(expr, p=2, sweep=sweep, tol=grids.norm_tol,
                              sweep_tol=grids.sweep_tol, seed=grids.seed)
        rows.append({"t": t, "norm": est.value, "t_norm": t * est.value})
    family = family or [f for _, f in TestFunctionFamily.default_family(ctx, grids)]
    lap = ident - t_op
    sect = 0.0
    for f in family:
        lf = lap.apply(f)
        pairing = lf.inner(f)
        re = pairing.real
        if re > 1e-14:
            sect = max(sect, abs(pairing) / re)
    sup_tnorm = max(r["t_norm"] for r in rows)
    return FitReport(
        experiment="semigroup",
        measured=rows,
        fitted={"sup_t_norm": sup_tnorm, "sectorial_ratio": sect},
        verdicts={"semigroup_analytic": sup_tnorm <= thresholds.analytic_sup_max
                  and sect <= thresholds.sectorial_max},
        context={"group": ctx.descriptor(), "t_grid": list(ts),
                 "csv_columns": {"t": "time", "norm": "restricted norm",
                                 "t_norm": "t times norm"}},
    )


# ---------------------------------------------------------------------------
# the centered / non-centered battery
# ---------------------------------------------------------------------------

def _pushforward_to_z(k: Density, coord=0):
    """Image of the density on Z under one abelianization coordinate."""
    from .groups import ZdGroup

    z1 = ZdGroup(1)
    out = {}
    for g, w in k.weights.items():
        x = (int(k.group.abelianize(g)[coord]),)
        out[x] = out.get(x, 0.0) + w
    return Density(z1, out)


AMENABLE_KINDS = ("zd", "heisenberg3", "lamplighter", "cyclic", "symmetric",
                  "product")


def dichotomy_battery(k: Density, grids: Grids = DEFAULT_GRIDS,
                      thresholds: Thresholds = DEFAULT_THRESHOLDS,
                      n_grid=None, r_policy=None, lambda_grid=None,
                      tnorm_r=None) -> FitReport:
    """Runs the six-way battery and reports the consistency verdict.

    On amenable groups the six condition verdicts must match centeredness;
    on free groups the operator norm stays below 1 and the growth
    conditions pass regardless.  The pushforward comparison against the
    lattice multiplier value is reported (a lower bound on amenable groups).
    """
    ctx = k.group
    kind = ctx.descriptor()["kind"]
    amenable = kind in AMENABLE_KINDS
    ns = tuple(n_grid or grids.n_grid)
    sweep = list(r_policy or grids.r_sweep)
    lams = tuple(lambda_grid or grids.lambda_grid)
    sub_grids = replace(grids, n_grid=ns, r_sweep=tuple(sweep),
                        lambda_grid=lams)

    centered = is_centered(k, 1e-10)
    analytic = analyticity_scan(k, grids=sub_grids, thresholds=thresholds)
    gradform = gradient_form_suite(k, grids=sub_grids, thresholds=thresholds)
    davies = davies_gaffney_fit(k, grids=sub_grids, thresholds=thresholds)
    offdiag = offdiagonal_suite(k, grids=sub_grids, thresholds=thresholds,
                                omega_hat=max(davies.fitted["omega_hat"], 1e-6))

    conditions = {
        "I_centered": centered,
        "II_analytic": analytic.verdicts["analytic"],
        "III_form_bounded": gradform.verdicts["form_bounded"],
        "IV_weighted_growth": davies.verdicts["omega_finite"],
        # the norm expansion condition is one-sided: norms below 1 satisfy it
        "V_quadratic_norm": davies.verdicts["quadratic_curvature"],
        "VI_offdiagonal": offdiag.verdicts["gaussian_decay"],
    }
    flags = [conditions[c] for c in conditions]
    unanimous = all(flags) or not any(flags)

    t_norm = norm_restricted(TOp(k), p=2,
                             sweep=[tnorm_r] if tnorm_r else sweep,
                             tol=grids.norm_tol, seed=grids.seed)
    # lattice comparison through the first abelianization coordinate; the
    # group-side value is a ball-restricted lower bound, so the comparison
    # carries an explicit allowance for the remaining restriction deficit
    push_rows = []
    if ctx.rank >= 1:
        push = _pushforward_to_z(k)
        orc = MultiplierOracle(push)
        for row in analytic.measured:
            n = row["n"]
            lattice = orc.oracle_norm("(I-T)T^n", n=n)
            key = f"n={n},k=0"
            sw = analytic.sweeps.get(key, [])
            residual = abs(sw[-1]["value"] - sw[-2]["value"]) if len(sw) >= 2 \
                else 0.05 * row["a_n"]
            allowance = max(1e-6, 3.0 * residual + 0.05 * row["a_n"])
            push_rows.append({"n": n, "lattice_a_n": lattice,
                              "group_a_n": row["a_n"],
                              "allowance": allowance,
                              "lower_bound_ok": lattice <= row["a_n"] + allowance})
    transfer_ok = all(r["lower_bound_ok"] for r in push_rows) if push_rows else None

    if amenable:
        consistent = unanimous
    else:
        consistent = t_norm.value < 1.0 and all(
            conditions[c] for c in conditions if c != "I_centered")
    return FitReport(
        experiment="dichotomy",
        measured=[{"condition": name, "holds": bool(val)}
                  for name, val in conditions.items()] + push_rows,
        fitted={
            "operator_norm": t_norm.value,
            "a_n_slope": analytic.fitted["slope"],
            "sup_n_a_n": analytic.fitted["sup_n_a_n"],
            "omega_hat": davies.fitted["omega_hat"],
            "slope_at_zero": davies.fitted["slope_at_zero"],
            "offdiag_b_hat": offdiag.fitted["b_hat"],
        },
        verdicts={
            **{name: bool(val) for name, val in conditions.items()},
            "unanimous": unanimous,
            "consistent": consistent,
            "amenable_model": amenable,
            **({"transference_lower_bound": transfer_ok}
               if transfer_ok is not None else {}),
        },
        context={"group": ctx.descriptor(), "n_grid": list(ns),
                 "csv_columns": {"condition": "battery condition",
                                 "holds": "verdict"}},
    )


# ---------------------------------------------------------------------------
# inhomogeneous walks
# ---------------------------------------------------------------------------

def inhomogeneous_suite(seq: DensitySequence, m_grid=(0, 8), n_grid=None,
                        lambda_grid=(0.2, 0.4, 0.8), psi=None,
                        grids: Grids = DEFAULT_GRIDS,
                        thresholds: Thresholds = DEFAULT_THRESHOLDS,
                        r_policy=None) -> FitReport:
    """Weighted norms and kernels of time-inhomogeneous products.

    Measures ||e^{lam psi} T_{m+n} ... T_{m+1} e^{-lam psi}|| over (m, n,
    lam), reporting the fitted growth rate per m and its spread, and fits
    the on-diagonal decay of the product kernels.
    """
    if not seq.uniformity["all_pass"]:
        raise UniformityFailed(f"sequence uniformity record: {seq.uniformity}")
    for i, k in enumerate(seq.densities):
        if not is_centered(k, 1e-10):
            raise NotCentered(f"member {i} is not centered")
    ctx = seq.group
    ns = tuple(n_grid or tuple(n for n in grids.n_grid if n <= 16))
    psi = psi or default_psi_library(ctx, grids)[0]
    sweep = list(r_policy or grids.r_sweep)
    rows = []
    omegas = {}
    for m in m_grid:
        vals = []
        for n in ns:
            if m + n > len(seq):
                continue
            for lam in lambda_grid:
                factors = [TPerturbed(seq[i], psi, lam)
                           for i in range(m, m + n)]
                expr = factors[-1]
                for op in reversed(factors[:-1]):
                    expr = Compose(expr, op)
                est = norm_restricted(expr, p=2, sweep=sweep,
                                      tol=grids.norm_tol,
                                      sweep_tol=grids.sweep_tol,
                                      seed=grids.seed)
                rate = math.log(max(est.value, 1e-300)) / (lam * lam * n)
                rows.append({"m": m, "n": n, "lambda": lam,
                             "norm": est.value, "rate": rate})
                vals.append(rate)
        if vals:
            omegas[m] = max(max(vals), 0.0)
    # product kernels and their on-diagonal decay
    diag_rows = []
    for m in m_grid:
        f = GFunction.delta(ctx)
        for n in range(1, max(ns) + 1):
            if m + n > len(seq):
                break
            f = TOp(seq[m + n - 1]).apply(f)
            if n in ns:
                diag_rows.append({"m": m, "n": n,
                                  "on_diag": f.values.get(ctx.identity, 0j).real})
    slopes = {}
    for m in m_grid:
        pts = [(r["n"], r["on_diag"]) for r in diag_rows
               if r["m"] == m and r["on_diag"] > 0]
        if len(pts) >= 2:
            s, _, _ = loglog_fit([p[0] for p in pts], [p[1] for p in pts])
            slopes[m] = s
    omega_vals = list(omegas.values())
    omega_spread = (max(omega_vals) - min(omega_vals)) / max(max(omega_vals), 1e-9) \
        if len(omega_vals) >= 2 else 0.0
    verdict = (max(omega_vals, default=0.0) <= thresholds.omega_max
               and omega_spread <= 0.15)
    return FitReport(
        experiment="inhomogeneous",
        measured=rows + diag_rows,
        fitted={"omega_by_m": {str(m): o for m, o in omegas.items()},
                "omega_max": max(omega_vals, default=float("nan")),
                "omega_spread": omega_spread,
                "diag_slopes": {str(m): s for m, s in slopes.items()}},
        verdicts={"uniform_growth": verdict},
        context={"group": ctx.descriptor(), "m_grid": list(m_grid),
                 "n_grid": list(ns), "psi": psi.label,
                 "uniformity": seq.uniformity,
                 "csv_columns": {"m": "time offset", "n": "window length",
                                 "norm": "restricted weighted norm",
                                 "on_diag": "product kernel at e"}},
    )
