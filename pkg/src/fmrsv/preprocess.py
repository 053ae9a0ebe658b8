"""Bias correction of realized volatilities and realized correlation matrices.

Raw realized measures computed from intraday returns underestimate
close-to-close variation (overnight returns are missed) and high-frequency
correlations are biased by market microstructure (the Epps effect). Both
biases are removed with daily-return information before estimation:

* volatilities are rescaled per asset so the time average of the corrected
  series equals the daily sample variance (Hansen-Lunde style);
* correlation matrices are shifted in log-matrix space by a constant matrix
  C so their average log matches the log of the daily sample correlation,
  then mapped back to valid correlation matrices by the diagonal-adjustment
  fixed point of Archakov-Hansen.

Corrected covariances are reassembled as D^{1/2} R D^{1/2}.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .matrix_stats import mat_exp_sym, mat_log_sym, sym_eigen

__all__ = [
    "BiasCorrection",
    "correct_volatilities",
    "correct_correlations",
    "reconstruct_correlation",
    "assemble_rcov",
    "correct_dataset_rcov",
    "cov_to_corr",
]

logger = logging.getLogger(__name__)

# Fixed point iteration for the diagonal adjustment; convergence is normally
# reached in a handful of iterations.
RECON_TOL = 1e-12
RECON_MAX_ITER = 100

# Floor applied to eigenvalues of PSD-but-singular raw correlation matrices
# before taking the matrix log.
CORR_EIG_FLOOR = 1e-8


@dataclass
class BiasCorrection:
    """Correction constants: volatility scales c and log-correlation shift C."""

    c: np.ndarray
    C: np.ndarray
    LR_daily: np.ndarray


def sample_variance(y: np.ndarray, ddof: int = 0) -> np.ndarray:
    """Column variances; the 1/T (population) divisor is the default."""
    return np.var(np.asarray(y, dtype=float), axis=0, ddof=ddof)


def correct_volatilities(
    daily_returns: np.ndarray, raw_rv: np.ndarray, *, ddof: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Scale raw realized variances so their mean equals the daily sample variance.

    c_i = s_i^2 / mean_t(raw_rv[:, i]); the corrected series is c_i * raw_rv.
    """
    daily_returns = np.asarray(daily_returns, dtype=float)
    raw_rv = np.asarray(raw_rv, dtype=float)
    if daily_returns.shape != raw_rv.shape:
        raise ValueError("daily_returns and raw_rv must have equal shapes")
    if daily_returns.shape[0] < 2:
        raise ValueError("need T >= 2 observations")
    if np.any(raw_rv <= 0.0):
        raise ValueError("raw realized variances must be strictly positive")
    mean_rv = raw_rv.mean(axis=0)
    c = sample_variance(daily_returns, ddof=ddof) / mean_rv
    return c, raw_rv * c


def cov_to_corr(S: np.ndarray) -> np.ndarray:
    """Correlation matrix of a covariance matrix."""
    d = np.sqrt(np.diag(S))
    if np.any(d <= 0):
        raise ValueError("covariance has non-positive variance on the diagonal")
    R = S / np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return 0.5 * (R + R.T)


def _safe_corr_log(R: np.ndarray, where: str) -> np.ndarray:
    eig = sym_eigen(R)
    vals = eig.values
    if vals.min() <= 0.0:
        if vals.min() < -1e-8:
            raise ValueError(f"{where}: correlation matrix is not PSD (min eig {vals.min():.3e})")
        logger.warning(
            "%s: flooring near-zero eigenvalues at %.1e before matrix log", where, CORR_EIG_FLOOR
        )
        vals = np.maximum(vals, CORR_EIG_FLOOR)
    out = (eig.vectors * np.log(vals)) @ eig.vectors.T
    return 0.5 * (out + out.T)


def reconstruct_correlation(LR: np.ndarray) -> np.ndarray:
    """Correlation matrix whose matrix log has the given off-diagonal entries.

    Iteratively retunes the diagonal x of LR: x <- x - log diag(exp(LR))
    until exp(LR) has a unit diagonal, then copies the off-diagonal of
    exp(LR) into an identity matrix.
    """
    LR = np.asarray(LR, dtype=float)
    if not np.allclose(LR, LR.T, atol=1e-10):
        raise ValueError("LR must be symmetric")
    work = 0.5 * (LR + LR.T)
    for _ in range(RECON_MAX_ITER):
        E = mat_exp_sym(work)
        delta = np.log(np.diag(E))
        work[np.diag_indices_from(work)] -= delta
        if np.max(np.abs(delta)) < RECON_TOL:
            R = mat_exp_sym(work)
            out = np.eye(LR.shape[0])
            off = ~np.eye(LR.shape[0], dtype=bool)
            out[off] = R[off]
            return out
    raise ValueError(f"diagonal adjustment did not converge in {RECON_MAX_ITER} iterations")


def correct_correlations(
    daily_corr: np.ndarray, raw_corrs: np.ndarray
) -> tuple[BiasCorrection, np.ndarray]:
    """Shift raw correlation logs by C = log(daily) - mean_t log(raw_t).

    Returns the correction constants and the corrected correlation matrices
    (valid correlation matrices: unit diagonal, positive definite).
    """
    raw_corrs = np.asarray(raw_corrs, dtype=float)
    T = raw_corrs.shape[0]
    LR_daily = _safe_corr_log(np.asarray(daily_corr, dtype=float), "daily correlation")
    logs = np.stack([_safe_corr_log(raw_corrs[t], f"raw correlation t={t + 1}") for t in range(T)])
    C = LR_daily - logs.mean(axis=0)
    corrected = np.stack([reconstruct_correlation(logs[t] + C) for t in range(T)])
    return BiasCorrection(c=np.array([]), C=C, LR_daily=LR_daily), corrected


def assemble_rcov(corrected_rv: np.ndarray, corrected_corrs: np.ndarray) -> np.ndarray:
    """W_t = D_t^{1/2} R_t D_t^{1/2} with D_t = diag(corrected variances)."""
    corrected_rv = np.asarray(corrected_rv, dtype=float)
    corrected_corrs = np.asarray(corrected_corrs, dtype=float)
    if corrected_rv.shape[0] != corrected_corrs.shape[0]:
        raise ValueError("time dimension mismatch")
    if np.any(corrected_rv <= 0.0):
        raise ValueError("corrected variances must be positive")
    sd = np.sqrt(corrected_rv)
    return corrected_corrs * sd[:, :, None] * sd[:, None, :]


def correct_dataset_rcov(
    daily_returns: np.ndarray, raw_W: np.ndarray, *, ddof: int = 0
) -> tuple[BiasCorrection, np.ndarray]:
    """Full correction pipeline from raw realized covariances.

    Splits raw W into variances and correlations, corrects both against the
    daily returns and reassembles corrected covariance matrices.
    """
    daily_returns = np.asarray(daily_returns, dtype=float)
    raw_W = np.asarray(raw_W, dtype=float)
    raw_rv = np.einsum("tii->ti", raw_W)
    c, corrected_rv = correct_volatilities(daily_returns, raw_rv, ddof=ddof)
    raw_corrs = np.stack([cov_to_corr(raw_W[t]) for t in range(raw_W.shape[0])])
    daily_corr = cov_to_corr(np.cov(daily_returns.T, ddof=ddof))
    correction, corrected_corrs = correct_correlations(daily_corr, raw_corrs)
    correction.c = c
    return correction, assemble_rcov(corrected_rv, corrected_corrs)
