"""Measurement reports and least-squares fit helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FitReport:
    """Measured grid values plus fitted constants and verdict flags.

    Every fitted constant is reproducible from `measured` by the documented
    transform; verdicts only speak about the measured range.
    """

    experiment: str
    measured: list = field(default_factory=list)   # list of row dicts
    fitted: dict = field(default_factory=dict)
    residual: float | None = None
    sweeps: dict = field(default_factory=dict)     # e.g. R-sweep diagnostics
    verdicts: dict = field(default_factory=dict)
    context: dict = field(default_factory=dict)    # grids, seeds, descriptors

    def to_json(self):
        return {
            "experiment": self.experiment,
            "measured": self.measured,
            "fitted": self.fitted,
            "residual": self.residual,
            "sweeps": self.sweeps,
            "verdicts": self.verdicts,
            "context": self.context,
        }

    def columns(self):
        cols = []
        for row in self.measured:
            for k in row:
                if k not in cols:
                    cols.append(k)
        return cols


def linear_fit(x, y):
    """Least squares y ~ a*x + b; returns (a, b, rms residual)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        return float("nan"), float(y[0]) if len(y) else float("nan"), 0.0
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    rms = float(np.sqrt(np.mean(resid**2)))
    return float(coef[0]), float(coef[1]), rms


def loglog_fit(x, y):
    """Fit log y ~ slope*log x + intercept (power law)."""
    return linear_fit(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)))


def semilog_fit(x, y):
    """Fit log y ~ rate*x + intercept (exponential law)."""
    return linear_fit(np.asarray(x, dtype=float), np.log(np.asarray(y, dtype=float)))


def r_squared(x, y, slope, intercept):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - ss_res / ss_tot
