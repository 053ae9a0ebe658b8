"""Linear Gaussian state-space machinery.

Model, for t = 0..T-1 (all arrays 0-indexed):

    y_t     = Z_t a_t + d_t + G_t xi_t
    a_{t+1} = T_t a_t + c_t + H_t xi_t        (t = 0..T-2)
    a_0     ~ N(a1, P1),   xi_t ~ N(0, I_r)

The same noise vector xi_t feeds observation t and the transition into
t+1, so G_t H_t' != 0 expresses correlated measurement/state errors (the
de Jong-Shephard form). Uncorrelated models simply use disjoint columns.

Three operations are exposed: exact log-likelihood via the Kalman filter,
posterior-mean disturbances/states via the disturbance smoother, and exact
posterior draws via a mean-correction simulation smoother (Durbin-Koopman
2002 style): a draw is E[a|y] + (a+ - E[a|y+]) with (a+, y+) simulated
unconditionally from the model.

Initial distributions are always proper here; no diffuse initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import maybe_jit

__all__ = [
    "LgssModel",
    "FilterResult",
    "SmoothResult",
    "kalman_loglik",
    "disturbance_smoother",
    "simulation_smoother",
    "SingularInnovationError",
]

LOG_2PI = float(np.log(2.0 * np.pi))

# Innovation variances below this are treated as singular rather than
# silently regularized.
INNOVATION_FLOOR = 1e-30


class SingularInnovationError(ValueError):
    """Innovation variance fell below the invertibility floor."""


def _stack(arr, T: int, shape: tuple[int, ...], name: str) -> np.ndarray:
    """Broadcast a static or per-time array to a contiguous (T, *shape) stack."""
    a = np.asarray(arr, dtype=float)
    if a.shape == shape:
        a = np.broadcast_to(a, (T,) + shape)
    if a.shape != (T,) + shape:
        raise ValueError(f"{name} must have shape {shape} or {(T,) + shape}, got {a.shape}")
    return np.ascontiguousarray(a)


@dataclass
class LgssModel:
    """System matrices; each may be given per-time (leading T axis) or static.

    Z: (k, m) observation loading          d: (k,) observation intercept
    G: (k, r) observation noise loading    T_mat: (m, m) transition
    c: (m,) transition intercept           H: (m, r) state noise loading
    a1: (m,) initial mean                  P1: (m, m) initial variance
    """

    Z: np.ndarray
    G: np.ndarray
    T_mat: np.ndarray
    H: np.ndarray
    a1: np.ndarray
    P1: np.ndarray
    d: np.ndarray | None = None
    c: np.ndarray | None = None
    n_obs: int | None = None  # number of time points; inferred when any input is stacked

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 3:
            T, k, m = Z.shape
        else:
            if self.n_obs is None:
                raise ValueError("n_obs is required when all system matrices are static")
            T = self.n_obs
            k, m = Z.shape
        G = np.asarray(self.G, dtype=float)
        r = G.shape[-1]
        self.n_obs = T
        self.k, self.m, self.r = k, m, r
        self.Z = _stack(Z, T, (k, m), "Z")
        self.G = _stack(G, T, (k, r), "G")
        self.d = _stack(self.d if self.d is not None else np.zeros(k), T, (k,), "d")
        n_tr = max(T - 1, 1)
        self.T_mat = _stack(self.T_mat, n_tr, (m, m), "T_mat")[: max(T - 1, 0)]
        self.c = _stack(self.c if self.c is not None else np.zeros(m), n_tr, (m,), "c")[: max(T - 1, 0)]
        self.H = _stack(self.H, n_tr, (m, r), "H")[: max(T - 1, 0)]
        self.a1 = np.ascontiguousarray(np.asarray(self.a1, dtype=float).reshape(m))
        self.P1 = np.ascontiguousarray(np.asarray(self.P1, dtype=float).reshape(m, m))


@dataclass
class FilterResult:
    loglik: float
    pred_mean: np.ndarray  # (T, m) a_t
    pred_var: np.ndarray  # (T, m, m) P_t
    filt_mean: np.ndarray  # (T, m) a_{t|t}
    filt_var: np.ndarray  # (T, m, m) P_{t|t}


@dataclass
class SmoothResult:
    disturbances: np.ndarray  # (T, r) E[xi_t | y]
    states: np.ndarray  # (T, m) E[a_t | y]


@maybe_jit
def _chol_lower(A):
    """Lower Cholesky factor; returns (L, ok)."""
    n = A.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s < INNOVATION_FLOOR:
                    return L, False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return L, True


@maybe_jit
def _chol_solve(L, B):
    """Solve (L L') X = B for X given lower-triangular L; B is (n, nrhs)."""
    n = L.shape[0]
    nrhs = B.shape[1]
    X = np.empty((n, nrhs))
    for c in range(nrhs):
        # forward solve L z = b
        for i in range(n):
            s = B[i, c]
            for k in range(i):
                s -= L[i, k] * X[k, c]
            X[i, c] = s / L[i, i]
        # backward solve L' x = z
        for i in range(n - 1, -1, -1):
            s = X[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * X[k, c]
            X[i, c] = s / L[i, i]
    return X


@maybe_jit
def _lgss_gains(y, Z, d, G, TT, c, H, a1, P1):
    """Kalman filter pass storing everything later passes need.

    Returns (status, loglik, e, Finv, K, apred, Ppred) where status != 0
    flags a singular innovation variance at time step status - 1.
    """
    T, k = y.shape
    m = a1.shape[0]
    e = np.zeros((T, k))
    Finv = np.zeros((T, k, k))
    K = np.zeros((T, m, k))
    apred = np.zeros((T, m))
    Ppred = np.zeros((T, m, m))
    a = a1.copy()
    P = P1.copy()
    loglik = 0.0
    eye_k = np.eye(k)
    for t in range(T):
        apred[t] = a
        Ppred[t] = P
        et = y[t] - Z[t] @ a - d[t]
        F = Z[t] @ P @ Z[t].T + G[t] @ G[t].T
        L, ok = _chol_lower(F)
        if not ok:
            return t + 1, 0.0, e, Finv, K, apred, Ppred
        Fi = _chol_solve(L, eye_k)
        e[t] = et
        Finv[t] = Fi
        logdet = 0.0
        for i in range(k):
            logdet += 2.0 * np.log(L[i, i])
        quad = et @ Fi @ et
        loglik += -0.5 * (k * LOG_2PI + logdet + quad)
        if t < T - 1:
            Kt = (TT[t] @ P @ Z[t].T + H[t] @ G[t].T) @ Fi
            K[t] = Kt
            a = TT[t] @ a + c[t] + Kt @ et
            P = TT[t] @ P @ TT[t].T + H[t] @ H[t].T - Kt @ F @ Kt.T
            P = 0.5 * (P + P.T)
    return 0, loglik, e, Finv, K, apred, Ppred


@maybe_jit
def _lgss_smooth(e, Finv, K, Z, G, TT, H, c, a1, P1):
    """Disturbance smoother given stored filter output.

    Returns (xihat, shat): posterior means of the noise vectors and states.
    """
    T, k = e.shape
    m = a1.shape[0]
    r = G.shape[2]
    xihat = np.zeros((T, r))
    shat = np.zeros((T, m))
    rvec = np.zeros(m)
    for t in range(T - 1, -1, -1):
        iFe = Finv[t] @ e[t]
        if t < T - 1:
            Lt = TT[t] - K[t] @ Z[t]
            xihat[t] = G[t].T @ iFe + (H[t] - K[t] @ G[t]).T @ rvec
            rvec = Z[t].T @ iFe + Lt.T @ rvec
        else:
            xihat[t] = G[t].T @ iFe
            rvec = Z[t].T @ iFe
    shat[0] = a1 + P1 @ rvec
    for t in range(T - 1):
        shat[t + 1] = TT[t] @ shat[t] + c[t] + H[t] @ xihat[t]
    return xihat, shat


def _run_gains(model: LgssModel, y: np.ndarray):
    status, loglik, e, Finv, K, apred, Ppred = _lgss_gains(
        y, model.Z, model.d, model.G, model.T_mat, model.c, model.H, model.a1, model.P1
    )
    if status != 0:
        raise SingularInnovationError(f"singular innovation variance at t={status}")
    return loglik, e, Finv, K, apred, Ppred


def _check_obs(model: LgssModel, obs: np.ndarray) -> np.ndarray:
    y = np.ascontiguousarray(np.asarray(obs, dtype=float).reshape(model.n_obs, model.k))
    if not np.all(np.isfinite(y)):
        raise ValueError("observations contain non-finite entries")
    return y


def kalman_loglik(model: LgssModel, obs: np.ndarray) -> tuple[float, FilterResult]:
    """Exact Gaussian log-likelihood of the observations plus filtered moments."""
    y = _check_obs(model, obs)
    loglik, e, Finv, K, apred, Ppred = _run_gains(model, y)
    # filtered (updated) moments from the stored predictive quantities
    PZt = np.einsum("tij,tkj->tik", Ppred, model.Z)  # P_t Z_t'
    gain = np.einsum("tik,tkl->til", PZt, Finv)
    filt_mean = apred + np.einsum("til,tl->ti", gain, e)
    filt_var = Ppred - np.einsum("til,tjl->tij", gain, PZt)
    return float(loglik), FilterResult(
        loglik=float(loglik),
        pred_mean=apred,
        pred_var=Ppred,
        filt_mean=filt_mean,
        filt_var=filt_var,
    )


def disturbance_smoother(model: LgssModel, obs: np.ndarray) -> SmoothResult:
    """Posterior means E[xi_t | y] and E[a_t | y]."""
    y = _check_obs(model, obs)
    _, e, Finv, K, _, _ = _run_gains(model, y)
    xihat, shat = _lgss_smooth(
        e, Finv, K, model.Z, model.G, model.T_mat, model.H, model.c, model.a1, model.P1
    )
    return SmoothResult(disturbances=xihat, states=shat)


def _simulate_unconditional(model: LgssModel, rng: np.random.Generator, ndraws: int):
    """Forward-simulate (states, disturbances, observations) from the model."""
    T, m, r = model.n_obs, model.m, model.r
    vals, vecs = np.linalg.eigh(model.P1)
    vals = np.clip(vals, 0.0, None)
    P1_half = vecs * np.sqrt(vals)
    xi = rng.standard_normal((ndraws, T, r))
    alpha = np.empty((ndraws, T, m))
    alpha[:, 0] = model.a1 + rng.standard_normal((ndraws, m)) @ P1_half.T
    for t in range(T - 1):
        alpha[:, t + 1] = (
            alpha[:, t] @ model.T_mat[t].T + model.c[t] + xi[:, t] @ model.H[t].T
        )
    yplus = np.einsum("tkm,ntm->ntk", model.Z, alpha) + model.d + np.einsum(
        "tkr,ntr->ntk", model.G, xi
    )
    return alpha, xi, yplus


def _smooth_batch(model: LgssModel, Finv, K, ys: np.ndarray):
    """Disturbance-smooth a batch of observation sets sharing the same gains."""
    n, T, k = ys.shape
    m, r = model.m, model.r
    Z, d, G, TT, c, H = model.Z, model.d, model.G, model.T_mat, model.c, model.H
    e = np.empty((n, T, k))
    a = np.broadcast_to(model.a1, (n, m)).copy()
    for t in range(T):
        e[:, t] = ys[:, t] - a @ Z[t].T - d[t]
        if t < T - 1:
            a = a @ TT[t].T + c[t] + e[:, t] @ K[t].T
    xihat = np.empty((n, T, r))
    rvec = np.zeros((n, m))
    for t in range(T - 1, -1, -1):
        iFe = e[:, t] @ Finv[t].T
        if t < T - 1:
            Lt = TT[t] - K[t] @ Z[t]
            xihat[:, t] = iFe @ G[t] + rvec @ (H[t] - K[t] @ G[t])
            rvec = iFe @ Z[t] + rvec @ Lt
        else:
            xihat[:, t] = iFe @ G[t]
            rvec = iFe @ Z[t]
    shat = np.empty((n, T, m))
    shat[:, 0] = model.a1 + rvec @ model.P1.T
    for t in range(T - 1):
        shat[:, t + 1] = shat[:, t] @ TT[t].T + c[t] + xihat[:, t] @ H[t].T
    return xihat, shat


def simulation_smoother(
    model: LgssModel,
    obs: np.ndarray,
    rng: np.random.Generator,
    ndraws: int = 1,
    return_disturbances: bool = False,
):
    """Exact draws of the state path (and optionally noise path) given obs.

    With ndraws == 1 returns (T, m); otherwise (ndraws, T, m). Draws are
    exact samples from the joint posterior, validated against brute-force
    conditioning of the dense joint Gaussian in the tests.
    """
    y = _check_obs(model, obs)
    _, e, Finv, K, _, _ = _run_gains(model, y)
    xihat, shat = _lgss_smooth(
        e, Finv, K, model.Z, model.G, model.T_mat, model.H, model.c, model.a1, model.P1
    )
    alpha_plus, xi_plus, y_plus = _simulate_unconditional(model, rng, ndraws)
    xihat_plus, shat_plus = _smooth_batch(model, Finv, K, y_plus)
    states = shat[None, :, :] + alpha_plus - shat_plus
    dists = xihat[None, :, :] + xi_plus - xihat_plus
    if ndraws == 1:
        states, dists = states[0], dists[0]
    if return_disturbances:
        return states, dists
    return states
