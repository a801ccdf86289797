"""Per-node diagnostics containers and the small fitting helpers they use."""

from dataclasses import dataclass, field

import numpy as np


def jbracket(x):
    """<x> = sqrt(1 + x^2)."""
    return np.sqrt(1.0 + np.asarray(x, dtype=float) ** 2)


def loglog_slope(x, y, floor=0.0):
    """Least-squares slope of log y against log x over points with y > floor."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > floor) & np.isfinite(y)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def log_exponent(s, norm, min_bracket=1.05):
    """Exponent k in norm(s) ~ C <ln s>^k, fitted with a free constant.

    Nodes with <ln s> below ``min_bracket`` carry no leverage and are
    skipped.  A norm that is constant along the run returns exactly 0.
    """
    s = np.asarray(s, dtype=float)
    norm = np.asarray(norm, dtype=float)
    ok = (norm > 0) & np.isfinite(norm)
    if ok.sum() < 2:
        return 0.0
    if np.all(norm[ok] == norm[ok][0]):
        return 0.0
    b = jbracket(np.log(s[ok]))
    lever = b >= min_bracket
    if lever.sum() < 2:
        return 0.0
    x = np.log(b)
    y = np.log(norm[ok])
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class DiagnosticsRecord:
    """Norm timeline of one run; ``columns`` maps a quantity name to a per-node array."""

    s: np.ndarray
    columns: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.columns[key]

    def rows(self, names):
        return np.column_stack([self.s] + [self.columns[n] for n in names])

    def to_dict(self):
        return {
            "s": self.s.tolist(),
            "columns": {k: np.asarray(v).tolist() for k, v in self.columns.items()},
            "fits": self.fits,
            "checks": self.checks,
            "notes": list(self.notes),
        }
