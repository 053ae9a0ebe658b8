"""Posterior summaries: means, credible intervals, inefficiency factors.

The inefficiency factor 1 + 2 sum_g rho(g) is truncated at the first
negative sample autocorrelation (capped at n/3); the effective sample size
is n divided by the factor. Interval endpoints are the 2.5% / 97.5%
empirical quantiles with linear interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import Parameters
from .mcmc import ChainStore

__all__ = ["inefficiency_factor", "summarize", "SummaryRow", "format_table"]


def _autocorrelations(x: np.ndarray, max_lag: int) -> np.ndarray:
    n = x.shape[0]
    xc = x - x.mean()
    # FFT autocovariance
    m = 1
    while m < 2 * n:
        m <<= 1
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[: max_lag + 1].real / n
    if acov[0] <= 0:
        raise ValueError("zero-variance draws")
    return acov / acov[0]


def inefficiency_factor(draws: np.ndarray) -> tuple[float, float]:
    """(inefficiency factor, effective sample size) of a scalar draw sequence."""
    x = np.asarray(draws, dtype=float).ravel()
    n = x.shape[0]
    if n < 10:
        raise ValueError("need at least 10 draws")
    if np.var(x) == 0:
        raise ValueError("zero-variance draws")
    max_lag = max(n // 3, 1)
    rho = _autocorrelations(x, max_lag)
    total = 0.0
    for g in range(1, max_lag + 1):
        if rho[g] < 0:
            break
        total += rho[g]
    factor = 1.0 + 2.0 * total
    return factor, n / factor


@dataclass
class SummaryRow:
    name: str
    mean: float
    lower: float
    upper: float
    inefficiency: float
    ess: float
    true: float | None = None
    covered: bool | None = None


_TRUTH_ATTR = {
    "alpha": "alpha",
    "beta": "beta",
    "mu": "mu",
    "gamma": "gamma",
    "phi": "phi",
    "psi": "psi",
    "rho": "rho",
    "sigma_eta": "sigma_eta",
    "sigma_nu": "sigma_nu",
    "delta": "delta",
}


def _truth_value(truth: Parameters, label: str) -> float:
    head, *idx = label.split(".")
    arr = getattr(truth, _TRUTH_ATTR[head])
    if head == "delta":
        return float(arr)
    if head in ("alpha", "beta"):
        return float(np.asarray(arr)[int(idx[0]) - 1, int(idx[1]) - 1])
    return float(np.asarray(arr)[int(idx[0]) - 1])


def summarize(store: ChainStore, truth: Parameters | None = None) -> list[SummaryRow]:
    """Per-parameter posterior mean, central 95% interval and inefficiency."""
    rows = []
    for label in store.all_labels():
        x = store.column(label)
        mean = float(x.mean())
        if x.shape[0] >= 2 and np.var(x) > 0 and x.shape[0] >= 10:
            lo, hi = np.quantile(x, [0.025, 0.975])
            factor, ess = inefficiency_factor(x)
        else:
            lo = hi = float(x[0]) if x.shape[0] == 1 else float(np.min(x))
            if x.shape[0] == 1:
                mean = float(x[0])
            factor, ess = float("nan"), float(x.shape[0])
        assert lo <= hi
        row = SummaryRow(
            name=label, mean=mean, lower=float(lo), upper=float(hi),
            inefficiency=float(factor), ess=float(ess),
        )
        if truth is not None:
            row.true = _truth_value(truth, label)
            row.covered = bool(row.lower <= row.true <= row.upper)
        rows.append(row)
    return rows


def format_table(rows: list[SummaryRow], fmt: str = "text") -> str:
    """Render summary rows as aligned text, CSV or JSON."""
    if fmt == "json":
        return json.dumps([row.__dict__ for row in rows], indent=2)
    header = ["parameter", "mean", "lower95", "upper95", "IF", "ESS"]
    has_truth = any(r.true is not None for r in rows)
    if has_truth:
        header += ["true", "covered"]
    lines = []
    table = []
    for r in rows:
        rec = [r.name, f"{r.mean:.4g}", f"{r.lower:.4g}", f"{r.upper:.4g}",
               f"{r.inefficiency:.1f}", f"{r.ess:.0f}"]
        if has_truth:
            rec += [f"{r.true:.4g}" if r.true is not None else "",
                    "yes" if r.covered else "no"]
        table.append(rec)
    if fmt == "csv":
        lines.append(",".join(header))
        lines.extend(",".join(rec) for rec in table)
        return "\n".join(lines)
    widths = [max(len(h), *(len(rec[c]) for rec in table)) if table else len(h)
              for c, h in enumerate(header)]
    lines.append("  ".join(h.ljust(widths[c]) for c, h in enumerate(header)))
    for rec in table:
        lines.append("  ".join(rec[c].ljust(widths[c]) for c in range(len(header))))
    return "\n".join(lines)
