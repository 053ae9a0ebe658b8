"""Joint posterior density and analytic derivatives.

The log joint factorizes the leverage pairs as f_t | (h_t, h_{t+1}):
conditioning the factor innovation on the volatility innovation produces
the drift

    c_t = rho * exp(h2_t / 2) / sigma_eta * (h2_{t+1} - mu - phi (h2_t - mu))

and the deflated variance V2h_t = (1 - rho^2 1{t<T}) V2_t, while the h
process keeps its plain AR(1) density. The algebraically equivalent
h_{t+1} | (h_t, f_t) factorization (drift c*_t, variance
sigma_eta^2 (1 - rho^2)) is used by several parameter samplers; both
evaluate to the same joint density, which the tests verify.

Derivative helpers return the gradients/Hessians of
g_t = log|B V2_t B' + V1_t| with respect to loading rows (beta_grad_hess)
and log-volatilities (h1_logdet_derivs / h2_logdet_derivs), plus the
block-sampler coefficients (d_t, A_t, B_t) for the factor volatilities,
where the expected information uses E(W^{-1}) = (s0/k0) X^{-1}.
"""

from __future__ import annotations

import numpy as np
from scipy.special import betaln, gammaln, multigammaln

from .core import Dataset, LatentState, ModelConfig, Parameters, PriorSpec, Variant
from .matrix_stats import mvn_logpdf

__all__ = [
    "NumericError",
    "log_joint",
    "log_joint_terms",
    "log_prior",
    "leverage_drift_c",
    "leverage_drift_cstar",
    "v2h_variances",
    "sigma_eta_eps",
    "xmat_stack",
    "beta_grad_hess",
    "h1_logdet_derivs",
    "h2_logdet_derivs",
    "block_coeffs_h2",
]

LOG_2PI = float(np.log(2.0 * np.pi))

# exp(h) guard: proposals never travel this far at estimated scales, so a
# violation indicates a genuine numerical failure and is raised, not clamped.
H_RANGE = 50.0


class NumericError(ArithmeticError):
    """Raised when a density evaluation produces a non-finite value."""


def _check_h(h: np.ndarray) -> None:
    if np.max(np.abs(h)) > H_RANGE:
        raise NumericError(f"log-volatility outside [-{H_RANGE}, {H_RANGE}]")


def leverage_drift_c(params: Parameters, h: np.ndarray) -> np.ndarray:
    """Drift c_t of f_t | h (T, q); zero in the last period."""
    p, q = params.p, params.q
    T = h.shape[0]
    h2 = h[:, p:]
    c = np.zeros((T, q))
    eta = h2[1:] - params.mu[p:] - params.phi[p:] * (h2[:-1] - params.mu[p:])
    c[:-1] = params.rho * np.exp(0.5 * h2[:-1]) / params.sigma_eta[p:] * eta
    return c


def leverage_drift_cstar(params: Parameters, state: LatentState) -> np.ndarray:
    """Drift c*_t of h_{t+1} | (h_t, f_t), shape (T-1, p+q); zero for assets."""
    p, q = params.p, params.q
    T = state.h.shape[0]
    cstar = np.zeros((T - 1, p + q))
    f_lag = np.vstack([params.gamma, state.f[:-1]])
    resid = state.f - params.gamma - params.psi * (f_lag - params.gamma)
    h2 = state.h[:, p:]
    cstar[:, p:] = (
        params.rho * params.sigma_eta[p:] * np.exp(-0.5 * h2[:-1]) * resid[:-1]
    )
    return cstar


def v2h_variances(params: Parameters, h: np.ndarray) -> np.ndarray:
    """Leverage-adjusted factor variances (1 - rho^2 1{t<T}) exp(h2), (T, q)."""
    p = params.p
    v = np.exp(h[:, p:]).copy()
    v[:-1] *= 1.0 - params.rho**2
    return v


def sigma_eta_eps(params: Parameters) -> np.ndarray:
    """Diagonal of Sigma_{eta|eps}: sigma_eta^2 deflated by rho^2 on factor rows."""
    out = params.sigma_eta**2
    out = out.copy()
    out[params.p :] *= 1.0 - params.rho**2
    return out


def xmat_stack(params: Parameters, h: np.ndarray) -> np.ndarray:
    """X_t = B V2_t B' + V1_t for all t, shape (T, p, p)."""
    p = params.p
    V1 = np.exp(h[:, :p])
    V2 = np.exp(h[:, p:])
    B = params.beta
    X = np.einsum("ik,tk,jk->tij", B, V2, B)
    X[:, np.arange(p), np.arange(p)] += V1
    return X


def _ig_logpdf(x2: np.ndarray, n: float, d: float) -> np.ndarray:
    a, b = 0.5 * n, 0.5 * d
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x2) - b / x2


def _beta_unit_logpdf(v: np.ndarray, a: float, b: float) -> np.ndarray:
    """Log density of v when (1+v)/2 ~ Beta(a, b); includes the 1/2 Jacobian."""
    u = 0.5 * (1.0 + v)
    return (a - 1.0) * np.log(u) + (b - 1.0) * np.log1p(-u) - betaln(a, b) + np.log(0.5)


def log_prior(config: ModelConfig, params: Parameters, priors: PriorSpec) -> float:
    p, q = config.p, config.q
    total = mvn_logpdf(params.mu, priors.m_mu, priors.S_mu)
    total += mvn_logpdf(params.gamma, priors.m_gamma, priors.S_gamma)
    S_beta = np.asarray(priors.S_beta)
    m_beta = np.asarray(priors.m_beta)
    for i in range(p):
        total += mvn_logpdf(params.beta[i], m_beta[i], S_beta[i])
    for j in range(2, q + 1):
        total += mvn_logpdf(
            params.alpha[j - 1, : j - 1], priors.m_alpha[j - 2], priors.S_alpha[j - 2]
        )
    total += float(np.sum(_beta_unit_logpdf(params.phi, priors.a_phi, priors.b_phi)))
    total += float(np.sum(_beta_unit_logpdf(params.psi, priors.a_psi, priors.b_psi)))
    if config.variant.uses_leverage:
        total += float(np.sum(_beta_unit_logpdf(params.rho, priors.a_rho, priors.b_rho)))
    total += float(np.sum(_ig_logpdf(params.sigma_eta**2, priors.n_eta, priors.d_eta)))
    total += float(np.sum(_ig_logpdf(params.sigma_nu**2, priors.n_nu, priors.d_nu)))
    if config.variant.uses_rcov and params.delta <= 0.0:
        return -np.inf
    return float(total)


def log_joint_terms(
    config: ModelConfig,
    params: Parameters,
    state: LatentState,
    data: Dataset,
    priors: PriorSpec | None = None,
) -> dict[str, float]:
    """Joint log posterior split into named term groups (constants included)."""
    p, q, T = config.p, config.q, config.T
    _check_h(state.h)
    h1 = state.h[:, :p]
    h2 = state.h[:, p:]
    terms: dict[str, float] = {}

    # realized covariance measurement (full inverse-Wishart density)
    if config.variant.uses_rcov:
        s0, k0 = params.s0, params.k0
        X = xmat_stack(params, state.h)
        sign, logdet_X = np.linalg.slogdet(X)
        if np.any(sign <= 0):
            raise NumericError("X_t not positive definite")
        sign_w, logdet_W = np.linalg.slogdet(data.W)
        tr = np.einsum("tij,tji->t", X, np.linalg.inv(data.W))
        terms["w_meas"] = float(
            0.5 * s0 * (p * np.log(k0) + logdet_X).sum()
            - 0.5 * (s0 + p + 1) * logdet_W.sum()
            - 0.5 * k0 * tr.sum()
            - T * (0.5 * s0 * p * np.log(2.0) + multigammaln(0.5 * s0, p))
        )

    # daily return measurement
    resid_y = data.y - state.f @ params.beta.T
    terms["y_meas"] = float(
        -0.5 * np.sum(LOG_2PI + h1 + resid_y**2 * np.exp(-h1))
    )

    # h transitions (plain AR(1)) and stationary initial draw
    sig2 = params.sigma_eta**2
    eta = state.h[1:] - params.mu - params.phi * (state.h[:-1] - params.mu)
    terms["h_trans"] = float(-0.5 * np.sum(LOG_2PI + np.log(sig2) + eta**2 / sig2))
    var0 = sig2 / (1.0 - params.phi**2)
    terms["h_init"] = float(
        -0.5 * np.sum(LOG_2PI + np.log(var0) + (state.h[0] - params.mu) ** 2 / var0)
    )

    # factor transitions with leverage drift and deflated variance
    c = leverage_drift_c(params, state.h)
    v2h = v2h_variances(params, state.h)
    f_lag = np.vstack([params.gamma, state.f[:-1]])
    resid_f = state.f - params.gamma - params.psi * (f_lag - params.gamma) - c
    terms["f_trans"] = float(-0.5 * np.sum(LOG_2PI + np.log(v2h) + resid_f**2 / v2h))

    # realized factor measurement
    resid_x = data.x - state.f @ params.alpha.T
    sig_nu2 = params.sigma_nu**2
    terms["x_meas"] = float(
        -0.5 * np.sum(LOG_2PI + np.log(sig_nu2) + resid_x**2 / sig_nu2)
    )

    if priors is not None:
        terms["prior"] = log_prior(config, params, priors)

    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite log density term {name}")
    return terms


def log_joint(
    config: ModelConfig,
    params: Parameters,
    state: LatentState,
    data: Dataset,
    priors: PriorSpec | None = None,
) -> float:
    """Full log joint posterior (up to no missing constants)."""
    return float(sum(log_joint_terms(config, params, state, data, priors).values()))


# ---------------------------------------------------------------------------
# Analytic derivatives of g_t = log|B V2_t B' + V1_t|
# ---------------------------------------------------------------------------

def _xmat_at(params: Parameters, h_t: np.ndarray) -> np.ndarray:
    p = params.p
    V2 = np.exp(h_t[p:])
    X = (params.beta * V2) @ params.beta.T
    X[np.arange(p), np.arange(p)] += np.exp(h_t[:p])
    return X


def _solve_spd(X: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError as err:
        raise NumericError("X_t is singular") from err
    return np.linalg.solve(L.T, np.linalg.solve(L, B))


def beta_grad_hess(
    params: Parameters, state: LatentState, t: int, i: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of g_t with respect to loading row beta_i."""
    p, q = params.p, params.q
    h_t = state.h[t]
    V2 = np.exp(h_t[p:])
    X = _xmat_at(params, h_t)
    rhs = np.zeros((p, q + 1))
    rhs[i, 0] = 1.0
    rhs[:, 1:] = params.beta
    sol = _solve_spd(X, rhs)
    u = sol[:, 0]  # X^{-1} e_i
    XinvB = sol[:, 1:]
    grad = 2.0 * V2 * (params.beta.T @ u)
    d_ii = u[i]
    M = np.diag(V2) - (V2[:, None] * (params.beta.T @ XinvB)) * V2[None, :]
    hess = 2.0 * d_ii * M - 0.5 * np.outer(grad, grad)
    return grad, hess


def h1_logdet_derivs(params: Parameters, state: LatentState, t: int, i: int) -> tuple[float, float]:
    """(d/dh_it, d^2/dh_it^2) of g_t for an idiosyncratic volatility, i < p."""
    h_t = state.h[t]
    X = _xmat_at(params, h_t)
    e = np.zeros(params.p)
    e[i] = 1.0
    d_ii = float(_solve_spd(X, e[:, None])[i, 0])
    eh = np.exp(h_t[i])
    return d_ii * eh, d_ii * eh - d_ii**2 * eh**2


def h2_logdet_derivs(params: Parameters, state: LatentState, t: int, i: int) -> tuple[float, float]:
    """(d/dh, d^2/dh^2) of g_t for factor volatility column i < q."""
    h_t = state.h[t]
    X = _xmat_at(params, h_t)
    b = params.beta[:, i]
    g = float(b @ _solve_spd(X, b[:, None])[:, 0])
    eh = np.exp(h_t[params.p + i])
    return g * eh, g * eh - g**2 * eh**2


def _mu_f(params: Parameters, state: LatentState, t: int, i: int) -> float:
    """Conditional mean of f_it given (f_{t-1}, h2_t, h2_{t+1})."""
    p = params.p
    T = state.h.shape[0]
    gamma, psi = params.gamma[i], params.psi[i]
    f_prev = state.f[t - 1, i] if t > 0 else gamma
    mean = gamma + psi * (f_prev - gamma)
    if t < T - 1:
        k = p + i
        eta = state.h[t + 1, k] - params.mu[k] - params.phi[k] * (state.h[t, k] - params.mu[k])
        mean += params.rho[i] * np.exp(0.5 * state.h[t, k]) / params.sigma_eta[k] * eta
    return float(mean)


def _sigma_f2(params: Parameters, state: LatentState, t: int, i: int) -> float:
    T = state.h.shape[0]
    lev = params.rho[i] ** 2 if t < T - 1 else 0.0
    return float((1.0 - lev) * np.exp(state.h[t, params.p + i]))


def _dmu_own(params: Parameters, state: LatentState, t: int, i: int) -> float:
    """d mu_{f,it} / d h_{p+i,t}."""
    p = params.p
    T = state.h.shape[0]
    if t >= T - 1:
        return 0.0
    k = p + i
    phi, mu, sig = params.phi[k], params.mu[k], params.sigma_eta[k]
    inner = -phi + 0.5 * (state.h[t + 1, k] - (1.0 - phi) * mu - phi * state.h[t, k])
    return float(params.rho[i] / sig * inner * np.exp(0.5 * state.h[t, k]))


def _dmu_prev(params: Parameters, state: LatentState, t: int, i: int) -> float:
    """d mu_{f,i,t-1} / d h_{p+i,t}  (the h_{t} entering period t-1's drift)."""
    if t < 1:
        return 0.0
    k = params.p + i
    return float(params.rho[i] / params.sigma_eta[k] * np.exp(0.5 * state.h[t - 1, k]))


def block_coeffs_h2(
    config: ModelConfig,
    params: Parameters,
    state: LatentState,
    data: Dataset,
    t: int,
    i: int,
    block_start: int,
    block_end: int,
) -> tuple[float, float, float]:
    """Coefficients (d_t, A_t, B_t) of the factor-volatility block sampler.

    ``block_start``/``block_end`` delimit the sampled block (inclusive,
    0-based); the edge terms switch on at t == block_end < T-1 and B is
    defined for t > block_start only. d_t is the observed gradient of the
    block target; A_t and B_t are expected information terms with
    E(W^{-1}) = (s0/k0) X^{-1} substituted.
    """
    p = params.p
    T = config.T
    k = p + i
    eh = np.exp(state.h[t, k])
    b = params.beta[:, i]
    X = _xmat_at(params, state.h[t])
    g = float(b @ _solve_spd(X, b[:, None])[:, 0])

    d_t = -0.5
    A_t = 0.5
    if config.variant.uses_rcov:
        s0, k0 = params.s0, params.k0
        d_t += 0.5 * s0 * g * eh
        d_t -= 0.5 * k0 * float(b @ np.linalg.solve(data.W[t], b)) * eh
        A_t += 0.5 * s0 * (g * eh) ** 2

    f_resid = state.f[t, i] - _mu_f(params, state, t, i)
    sf2 = _sigma_f2(params, state, t, i)
    dmu_own = _dmu_own(params, state, t, i)
    d_t += 0.5 * f_resid**2 / sf2 + f_resid / sf2 * dmu_own
    A_t += dmu_own**2 / sf2

    if t > 0:
        f_resid_prev = state.f[t - 1, i] - _mu_f(params, state, t - 1, i)
        sf2_prev = _sigma_f2(params, state, t - 1, i)
        dmu_prev = _dmu_prev(params, state, t, i)
        d_t += f_resid_prev / sf2_prev * dmu_prev
        A_t += dmu_prev**2 / sf2_prev

    if t == block_end and t < T - 1:
        phi, mu, sig2 = params.phi[k], params.mu[k], params.sigma_eta[k] ** 2
        d_t += phi * (state.h[t + 1, k] - (1.0 - phi) * mu - phi * state.h[t, k]) / sig2
        A_t += phi**2 / sig2

    if t > block_start:
        sf2_prev = _sigma_f2(params, state, t - 1, i)
        B_t = _dmu_own(params, state, t - 1, i) * _dmu_prev(params, state, t, i) / sf2_prev
    else:
        B_t = 0.0
    return float(d_t), float(A_t), float(B_t)
