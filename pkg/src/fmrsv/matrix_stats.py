"""Dense symmetric-matrix kernels and distribution densities.

Everything here is deterministic and side-effect free. The inverse-Wishart
density follows the parametrization used by the realized-covariance
measurement equation: ``W ~ IW(s0, scale^{-1})`` has density

    |scale|^{s0/2} |W|^{-(s0+p+1)/2} exp(-tr(scale W^{-1})/2)
        / (2^{s0 p/2} Gamma_p(s0/2)),

so that E(W) = scale / (s0 - p - 1). Library conventions differ (some call
``scale`` what is the inverse here); all call sites in this package use the
convention above.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import multigammaln

__all__ = [
    "SymEigen",
    "sym_eigen",
    "mat_log_sym",
    "mat_exp_sym",
    "invwishart_logpdf",
    "mvn_logpdf",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class SymEigen:
    """Spectral decomposition P diag(values) P' with eigenvalues descending."""

    vectors: np.ndarray
    values: np.ndarray


def sym_eigen(S: np.ndarray) -> SymEigen:
    """Spectral decomposition of a symmetric matrix, eigenvalues descending.

    The input is symmetrized as (S + S') / 2 before decomposing, so mild
    asymmetry from accumulated rounding is tolerated.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("S must be a square matrix")
    if not np.all(np.isfinite(S)):
        raise ValueError("S contains non-finite entries")
    sym = 0.5 * (S + S.T)
    values, vectors = np.linalg.eigh(sym)
    # eigh returns ascending order; flip to descending
    return SymEigen(vectors=vectors[:, ::-1].copy(), values=values[::-1].copy())


def mat_log_sym(S: np.ndarray) -> np.ndarray:
    """Matrix logarithm of a symmetric positive definite matrix."""
    eig = sym_eigen(S)
    if np.any(eig.values <= 0.0):
        raise ValueError(
            f"matrix log requires positive eigenvalues; min eigenvalue {eig.values.min():.3e}"
        )
    out = (eig.vectors * np.log(eig.values)) @ eig.vectors.T
    return 0.5 * (out + out.T)


def mat_exp_sym(S: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric matrix (result is SPD)."""
    eig = sym_eigen(S)
    out = (eig.vectors * np.exp(eig.values)) @ eig.vectors.T
    return 0.5 * (out + out.T)


def _chol_logdet(S: np.ndarray, name: str) -> tuple[np.ndarray, float]:
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as err:
        raise ValueError(f"{name} is not positive definite") from err
    return L, 2.0 * float(np.sum(np.log(np.diag(L))))


def invwishart_logpdf(W: np.ndarray, s0: float, scale: np.ndarray) -> float:
    """Log density of W ~ IW(s0, scale^{-1}), i.e. E(W) = scale / (s0 - p - 1).

    ``s0`` must exceed p - 1 for the density to be proper.
    """
    W = np.asarray(W, dtype=float)
    scale = np.asarray(scale, dtype=float)
    p = W.shape[0]
    if W.shape != (p, p) or scale.shape != (p, p):
        raise ValueError("W and scale must be square matrices of equal size")
    if s0 <= p - 1:
        raise ValueError(f"s0 must exceed p - 1 = {p - 1}, got {s0}")
    Lw, logdet_w = _chol_logdet(W, "W")
    _, logdet_scale = _chol_logdet(scale, "scale")
    # tr(scale W^{-1}) via triangular solves against the Cholesky factor of W
    half = np.linalg.solve(Lw, scale)
    tr = float(np.trace(np.linalg.solve(Lw, half.T)))
    return (
        0.5 * s0 * logdet_scale
        - 0.5 * (s0 + p + 1) * logdet_w
        - 0.5 * tr
        - 0.5 * s0 * p * np.log(2.0)
        - multigammaln(0.5 * s0, p)
    )


def mvn_logpdf(v: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Multivariate normal log density evaluated via Cholesky."""
    v = np.asarray(v, dtype=float).ravel()
    mean = np.asarray(mean, dtype=float).ravel()
    cov = np.asarray(cov, dtype=float)
    d = v.shape[0]
    if mean.shape[0] != d or cov.shape != (d, d):
        raise ValueError("dimension mismatch in mvn_logpdf")
    L, logdet = _chol_logdet(cov, "cov")
    z = np.linalg.solve(L, v - mean)
    return -0.5 * (d * LOG_2PI + logdet + float(z @ z))
