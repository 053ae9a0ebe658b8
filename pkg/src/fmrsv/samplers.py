"""Full conditional samplers, one per MCMC step.

Every sampler takes (config, params, state, data, priors, rng, work) plus
tuning where relevant, mutates only its own block of params/state in place,
and returns acceptance information (None for exact Gibbs steps).

Conventions:

* Leverage pairs can be factorized two ways; the samplers use whichever
  makes their conditional tractable (f given h for gamma/psi/sigma-eta's
  acceptance term, h given f for mu/phi/rho/sigma-eta's inverse-gamma
  kernel). Both factorizations evaluate to the same joint density, so all
  acceptance ratios agree with log-joint differences; the tests assert
  this to 1e-8.
* The phi and rho acceptance ratios include the stationary initial-state
  factor exp(-(1 - phi^2)(h_1 - mu)^2 / (2 sigma^2)) alongside the
  sqrt(1 - phi^2) normalization, and the gamma posterior includes the
  t = 1 factor term (f_1 - gamma - c_1) with identity loading; both are
  required for the samplers to target their exact conditionals.
* The beta proposal follows the Taylor construction around the conditional
  mode; its acceptance ratio is evaluated as (log target - log proposal)
  differences, which reduces to the Taylor-remainder form and stays exact
  even when the curvature has to be regularized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import multigammaln

from . import _sv_kernels as kern
from .core import Dataset, LatentState, ModelConfig, Parameters, PriorSpec
from .model_density import leverage_drift_c, leverage_drift_cstar, v2h_variances, xmat_stack
from .state_space import LgssModel, simulation_smoother

__all__ = [
    "McmcTuning",
    "BlockWorkspace",
    "make_workspace",
    "refresh_sweep_cache",
    "sample_h1",
    "sample_h2",
    "sample_f",
    "sample_alpha",
    "sample_beta",
    "sample_mu",
    "sample_gamma",
    "sample_phi",
    "sample_psi",
    "sample_rho",
    "sample_sigma_eta",
    "sample_sigma_nu",
    "sample_delta",
]


@dataclass
class McmcTuning:
    """Sampler tuning knobs.

    n_blocks defaults to roughly T/5 states per block. mode_iters bounds the
    disturbance-smoother refinements used to locate block modes. sigma_delta
    is the random-walk step on log delta. stochastic_knots jitters interior
    block boundaries each sweep.
    """

    n_blocks: int | None = None
    mode_iters: int = 5
    sigma_delta: float = 0.001
    stochastic_knots: bool = False

    def resolve_blocks(self, T: int) -> int:
        K = self.n_blocks if self.n_blocks is not None else max(1, T // 5)
        return min(max(K, 1), T)


def make_knots(T: int, K: int, rng: np.random.Generator | None = None,
               stochastic: bool = False) -> np.ndarray:
    """Block boundaries 0 = s_1 < ... < s_{K+1} = T (0-based, end-exclusive)."""
    base = np.array([int(round(k * T / K)) for k in range(K + 1)], dtype=np.int64)
    if stochastic and rng is not None and K > 1:
        jitter = rng.uniform(-0.45, 0.45, size=K - 1) * (T / K)
        mid = base[1:-1] + np.round(jitter).astype(np.int64)
        base = np.concatenate([[0], mid, [T]])
        base = np.maximum.accumulate(np.clip(base, 0, T))
        for k in range(1, K + 1):
            if base[k] <= base[k - 1]:
                base[k] = min(base[k - 1] + 1, T)
        base[-1] = T
        base = np.unique(base)
    return base


@dataclass
class BlockWorkspace:
    """Per-chain caches: knots plus run-constant realized-covariance pieces
    and the per-sweep Sherman-Morrison bases for X_t = B V2_t B' + V1_t."""

    knots: np.ndarray
    winv: np.ndarray | None = None
    winv_diag: np.ndarray | None = None
    logdet_w_sum: float = 0.0
    # sweep cache (refreshed whenever beta or h changes wholesale)
    xinv: np.ndarray | None = None
    logdetx: np.ndarray | None = None
    trxw: np.ndarray | None = None
    ehbase: np.ndarray | None = None
    flagged: list[str] = field(default_factory=list)
    # when set to a list, MH samplers append records
    # (name, index, old, new, log_accept, log_qratio) with
    # log_qratio = log q(new|old) - log q(old|new); the tests assert
    # log_accept == delta log_joint - log_qratio
    ledger: list | None = None


def make_workspace(
    config: ModelConfig,
    data: Dataset,
    tuning: McmcTuning,
    rng: np.random.Generator | None = None,
) -> BlockWorkspace:
    K = tuning.resolve_blocks(config.T)
    knots = make_knots(config.T, K, rng, tuning.stochastic_knots)
    work = BlockWorkspace(knots=knots)
    if config.variant.uses_rcov:
        work.winv = np.linalg.inv(data.W)
        work.winv = 0.5 * (work.winv + np.swapaxes(work.winv, 1, 2))
        work.winv_diag = np.einsum("tii->ti", work.winv).copy()
        work.logdet_w_sum = float(np.linalg.slogdet(data.W)[1].sum())
    return work


def refresh_sweep_cache(config: ModelConfig, params: Parameters, state: LatentState,
                        work: BlockWorkspace) -> None:
    """Recompute X_t^{-1}, log|X_t| and tr(X_t W_t^{-1}) at the current state."""
    if not config.variant.uses_rcov:
        work.ehbase = np.exp(state.h)
        return
    X = xmat_stack(params, state.h)
    work.xinv = np.linalg.inv(X)
    work.xinv = 0.5 * (work.xinv + np.swapaxes(work.xinv, 1, 2))
    sign, work.logdetx = np.linalg.slogdet(X)
    if np.any(sign <= 0):
        raise ArithmeticError("X_t lost positive definiteness")
    work.trxw = np.einsum("tij,tji->t", X, work.winv)
    work.ehbase = np.exp(state.h)


def _rank_one_update_idio(work: BlockWorkspace, i: int, h_new: np.ndarray) -> None:
    """Propagate a change of idiosyncratic column i into the X_t caches."""
    delta = np.exp(h_new) - work.ehbase[:, i]
    if not np.any(delta):
        return
    a_col = work.xinv[:, :, i].copy()
    a_ii = a_col[:, i]
    scale = delta / (1.0 + delta * a_ii)
    work.logdetx += np.log1p(delta * a_ii)
    work.xinv -= scale[:, None, None] * a_col[:, :, None] * a_col[:, None, :]
    work.trxw += delta * work.winv_diag[:, i]
    work.ehbase[:, i] = np.exp(h_new)


def _rank_one_update_factor(work: BlockWorkspace, params: Parameters, i: int,
                            h_new: np.ndarray, twi: np.ndarray) -> None:
    """Propagate a change of factor column i into the X_t caches."""
    p = params.p
    delta = np.exp(h_new) - work.ehbase[:, p + i]
    if not np.any(delta):
        return
    b = params.beta[:, i]
    xb = work.xinv @ b
    g = xb @ b
    scale = delta / (1.0 + delta * g)
    work.logdetx += np.log1p(delta * g)
    work.xinv -= scale[:, None, None] * xb[:, :, None] * xb[:, None, :]
    work.trxw += delta * twi
    work.ehbase[:, p + i] = np.exp(h_new)


def sample_h1(config, params: Parameters, state: LatentState, data: Dataset,
              priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace,
              tuning: McmcTuning) -> tuple[int, int]:
    """Multi-move update of all idiosyncratic volatility paths."""
    p, T = config.p, config.T
    uses_rcov = config.variant.uses_rcov
    K = work.knots.shape[0] - 1
    n_acc = 0
    resid = data.y - state.f @ params.beta.T
    yres2 = resid**2
    zeros = np.zeros(T)
    for i in range(p):
        if uses_rcov:
            aii = np.ascontiguousarray(work.xinv[:, i, i])
            logdetx = work.logdetx
            wii = np.ascontiguousarray(work.winv_diag[:, i])
            s0, k0 = params.s0, params.k0
        else:
            aii, logdetx, wii = zeros, zeros, zeros
            s0, k0 = 0.0, 0.0
        hcol = np.ascontiguousarray(state.h[:, i])
        zn_init = rng.standard_normal(K)
        zn_state = rng.standard_normal(T)
        zn_obs = rng.standard_normal(T)
        u = rng.uniform(size=K)
        accept = kern.h1_asset_sweep(
            hcol, work.knots, params.phi[i], params.mu[i], params.sigma_eta[i],
            s0, k0, wii, aii, logdetx, np.ascontiguousarray(yres2[:, i]),
            tuning.mode_iters, zn_init, zn_state, zn_obs, u,
        )
        n_acc += int(accept.sum())
        if uses_rcov:
            _rank_one_update_idio(work, i, hcol)
        else:
            work.ehbase[:, i] = np.exp(hcol)
        state.h[:, i] = hcol
    return n_acc, p * K


def sample_h2(config, params: Parameters, state: LatentState, data: Dataset,
              priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace,
              tuning: McmcTuning) -> tuple[int, int]:
    """Multi-move update of all factor volatility paths."""
    p, q, T = config.p, config.q, config.T
    uses_rcov = config.variant.uses_rcov
    K = work.knots.shape[0] - 1
    n_acc = 0
    zeros = np.zeros(T)
    for i in range(q):
        b = params.beta[:, i]
        if uses_rcov:
            g_base = np.ascontiguousarray(np.einsum("tij,i,j->t", work.xinv, b, b))
            twi = np.ascontiguousarray(np.einsum("tij,i,j->t", work.winv, b, b))
            logdetx, trxw = work.logdetx, work.trxw
            s0, k0 = params.s0, params.k0
        else:
            g_base, twi, logdetx, trxw = zeros, zeros, zeros, zeros
            s0, k0 = 0.0, 0.0
        hcol = np.ascontiguousarray(state.h[:, p + i])
        f = np.ascontiguousarray(state.f[:, i])
        f_lag = np.concatenate([[params.gamma[i]], f[:-1]])
        rho = params.rho[i] if config.variant.uses_leverage else 0.0
        zn_init = rng.standard_normal(K)
        zn_state = rng.standard_normal(T)
        zn_obs = rng.standard_normal(T)
        u = rng.uniform(size=K)
        accept = kern.h2_factor_sweep(
            hcol, work.knots, params.phi[p + i], params.mu[p + i],
            params.sigma_eta[p + i], rho, params.psi[i], params.gamma[i],
            s0, k0, g_base, logdetx, trxw, twi, f, f_lag,
            tuning.mode_iters, zn_init, zn_state, zn_obs, u,
        )
        n_acc += int(accept.sum())
        if uses_rcov:
            _rank_one_update_factor(work, params, i, hcol, twi)
        else:
            work.ehbase[:, p + i] = np.exp(hcol)
        state.h[:, p + i] = hcol
    return n_acc, q * K


def sample_f(config, params: Parameters, state: LatentState, data: Dataset,
             priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace) -> None:
    """Joint draw of the latent factor path via the simulation smoother."""
    p, q, T = config.p, config.q, config.T
    c = leverage_drift_c(params, state.h) if config.variant.uses_leverage else np.zeros((T, q))
    v2h = v2h_variances(params, state.h)
    r = p + 2 * q
    Z = np.vstack([params.alpha, params.beta])
    G = np.zeros((T, p + q, r))
    G[:, np.arange(q), np.arange(q)] = params.sigma_nu
    G[:, q + np.arange(p), q + np.arange(p)] = np.exp(0.5 * state.h[:, :p])
    H = np.zeros((T - 1, q, r))
    H[:, np.arange(q), p + q + np.arange(q)] = np.sqrt(v2h[1:])
    c_trans = (1.0 - params.psi) * params.gamma + c[1:]
    model = LgssModel(
        Z=Z,
        G=G,
        T_mat=np.diag(params.psi),
        H=H,
        a1=params.gamma + c[0],
        P1=np.diag(v2h[0]),
        c=c_trans,
        n_obs=T,
    )
    obs = np.hstack([data.x, data.y])
    state.f[:, :] = simulation_smoother(model, obs, rng)


def sample_alpha(config, params: Parameters, state: LatentState, data: Dataset,
                 priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace) -> None:
    """Conjugate normal draw of each free realized-factor loading row."""
    q = config.q
    for j in range(2, q + 1):
        F = state.f[:, : j - 1]
        resp = data.x[:, j - 1] - state.f[:, j - 1]
        sig2 = params.sigma_nu[j - 1] ** 2
        S_inv = np.linalg.inv(priors.S_alpha[j - 2])
        prec = F.T @ F / sig2 + S_inv
        rhs = F.T @ resp / sig2 + S_inv @ priors.m_alpha[j - 2]
        L = np.linalg.cholesky(prec)
        mean = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        draw = mean + np.linalg.solve(L.T, rng.standard_normal(j - 1))
        params.alpha[j - 1, : j - 1] = draw


def _draw_mvn_from_precision(prec: np.ndarray, rhs: np.ndarray,
                             rng: np.random.Generator) -> np.ndarray:
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    return mean + np.linalg.solve(L.T, rng.standard_normal(rhs.shape[0]))


def sample_mu(config, params: Parameters, state: LatentState, data: Dataset,
              priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace) -> None:
    """Conjugate normal draw of the log-volatility means."""
    T = config.T
    sig2_he = params.sigma_eta**2
    if config.variant.uses_leverage:
        sig2_he[config.p:] *= 1.0 - params.rho**2
    cstar = leverage_drift_cstar(params, state) if config.variant.uses_leverage else 0.0
    phi = params.phi
    var0 = params.sigma_eta**2 / (1.0 - phi**2)
    S_inv = np.linalg.inv(np.asarray(priors.S_mu))
    prec = S_inv + np.diag(1.0 / var0) + (T - 1) * np.diag((1.0 - phi) ** 2 / sig2_he)
    resid = state.h[1:] - phi * state.h[:-1] - cstar
    rhs = (
        S_inv @ np.asarray(priors.m_mu)
        + state.h[0] / var0
        + (1.0 - phi) / sig2_he * resid.sum(axis=0)
    )
    params.mu[:] = _draw_mvn_from_precision(prec, rhs, rng)


def sample_gamma(config, params: Parameters, state: LatentState, data: Dataset,
                 priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace) -> None:
    """Conjugate normal draw of the factor means.

    The t = 1 term enters with identity loading because f_0 is pinned at
    gamma, so psi drops out of the first transition.
    """
    c = leverage_drift_c(params, state.h) if config.variant.uses_leverage else np.zeros_like(state.f)
    v2h = v2h_variances(params, state.h)
    psi = params.psi
    S_inv = np.linalg.inv(np.asarray(priors.S_gamma))
    prec = (
        S_inv
        + np.diag(1.0 / v2h[0])
        + np.diag((1.0 - psi) ** 2 * np.sum(1.0 / v2h[1:], axis=0))
    )
    resid = state.f[1:] - psi * state.f[:-1] - c[1:]
    rhs = (
        S_inv @ np.asarray(priors.m_gamma)
        + (state.f[0] - c[0]) / v2h[0]
        + (1.0 - psi) * np.sum(resid / v2h[1:], axis=0)
    )
    params.gamma[:] = _draw_mvn_from_precision(prec, rhs, rng)


def sample_phi(config, params: Parameters, state: LatentState, data: Dataset,
               priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace) -> np.ndarray:
    """Independence-MH draw of each AR coefficient of h.

    The Gaussian part of the conditional cancels against the proposal; the
    acceptance keeps the sqrt(1 - phi^2) stationarity factor, the Beta
    prior and the stationary initial-state exponential.
    """
    p = config.p
    n = p + config.q
    lev = np.ones(n)
    cstar = np.zeros((config.T - 1, n))
    if config.variant.uses_leverage:
        lev[p:] = 1.0 - params.rho**2
        cstar = leverage_drift_cstar(params, state)
    sig2 = params.sigma_eta**2
    accept = np.zeros(n, dtype=bool)
    hc = state.h - params.mu
    for i in range(n):
        den = float(np.sum(hc[:-1, i] ** 2))
        if den <= 0.0:
            continue
        num = float(np.sum((hc[1:, i] - cstar[:, i]) * hc[:-1, i]))
        mean = num / den
        sd = np.sqrt(sig2[i] * lev[i] / den)
        prop = rng.normal(mean, sd)
        if abs(prop) >= 1.0:
            continue
        cur = params.phi[i]

        def log_k(v):
            return (
                0.5 * np.log1p(-v * v)
                + (priors.a_phi - 1.0) * np.log((1.0 + v) / 2.0)
                + (priors.b_phi - 1.0) * np.log((1.0 - v) / 2.0)
                - (1.0 - v * v) * hc[0, i] ** 2 / (2.0 * sig2[i])
            )

        log_acc = log_k(prop) - log_k(cur)
        if work.ledger is not None:
            lq = -0.5 * ((prop - mean) ** 2 - (cur - mean) ** 2) / sd**2
            work.ledger.append(("phi", i, cur, prop, log_acc, lq))
        if np.log(rng.uniform()) < log_acc:
            params.phi[i] = prop
            accept[i] = True
    return accept


def sample_psi(config, params: Parameters, state: LatentState, data: Dataset,
               priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace) -> np.ndarray:
    """Independence-MH draw of the factor AR coefficients (Beta-prior ratio)."""
    q = config.q
    c = leverage_drift_c(params, state.h) if config.variant.uses_leverage else np.zeros_like(state.f)
    v2h = v2h_variances(params, state.h)
    accept = np.zeros(q, dtype=bool)
    fc = state.f - params.gamma
    for i in range(q):
        w = 1.0 / v2h[1:, i]
        den = float(np.sum(fc[:-1, i] ** 2 * w))
        if den <= 0.0:
            continue
        num = float(np.sum((fc[1:, i] - c[1:, i]) * fc[:-1, i] * w))
        mean, sd = num / den, np.sqrt(1.0 / den)
        prop = rng.normal(mean, sd)
        if abs(prop) >= 1.0:
            continue

        def log_k(v):
            return (priors.a_psi - 1.0) * np.log((1.0 + v) / 2.0) + (
                priors.b_psi - 1.0
            ) * np.log((1.0 - v) / 2.0)

        cur = params.psi[i]
        log_acc = log_k(prop) - log_k(cur)
        if work.ledger is not None:
            lq = -0.5 * ((prop - mean) ** 2 - (cur - mean) ** 2) / sd**2
            work.ledger.append(("psi", i, cur, prop, log_acc, lq))
        if np.log(rng.uniform()) < log_acc:
            params.psi[i] = prop
            accept[i] = True
    return accept


RHO_FALLBACK_STEP = 0.1


def _rho_logpost_factory(params, state, config, priors, i):
    """log posterior of rho_i on the Fisher-transform scale, as closures."""
    p = config.p
    k = p + i
    h = state.h[:, k]
    eta = h[1:] - params.mu[k] - params.phi[k] * (h[:-1] - params.mu[k])
    f = state.f[:, i]
    f_lag = np.concatenate([[params.gamma[i]], f[:-1]])
    fr = f - params.gamma[i] - params.psi[i] * (f_lag - params.gamma[i])
    w = params.sigma_eta[k] * np.exp(-0.5 * h[:-1]) * fr[:-1]
    s_ee = float(eta @ eta)
    s_ew = float(eta @ w)
    s_ww = float(w @ w)
    Tm1 = h.shape[0] - 1
    sig2 = params.sigma_eta[k] ** 2
    a_r, b_r = priors.a_rho, priors.b_rho

    def log_rho(r):
        return (
            (a_r - 1.0) * np.log((1.0 + r) / 2.0)
            + (b_r - 1.0) * np.log((1.0 - r) / 2.0)
            - 0.5 * Tm1 * np.log1p(-r * r)
            - (s_ee - 2.0 * r * s_ew + r * r * s_ww) / (2.0 * sig2 * (1.0 - r * r))
        )

    def log_g(g):
        r = np.tanh(0.5 * g)
        # Jacobian of the Fisher transform: 2 exp(g) / (exp(g) + 1)^2
        return log_rho(r) + np.log(2.0) + g - 2.0 * np.logaddexp(0.0, g)

    return log_rho, log_g


def sample_rho(config, params: Parameters, state: LatentState, data: Dataset,
               priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace) -> np.ndarray:
    """MH draw of the leverage correlations on the Fisher-transform scale."""
    if not config.variant.uses_leverage:
        return np.zeros(config.q, dtype=bool)
    q = config.q
    accept = np.zeros(q, dtype=bool)
    for i in range(q):
        log_rho, log_g = _rho_logpost_factory(params, state, config, priors, i)
        grid = np.linspace(-0.995, 0.995, 399)
        vals = np.array([log_rho(r) for r in grid])
        r_hat = grid[int(np.argmax(vals))]
        g_hat = 2.0 * np.arctanh(r_hat)
        eps = 1e-5
        for _ in range(25):
            d1 = (log_g(g_hat + eps) - log_g(g_hat - eps)) / (2 * eps)
            d2 = (log_g(g_hat + eps) - 2 * log_g(g_hat) + log_g(g_hat - eps)) / eps**2
            if not np.isfinite(d1) or not np.isfinite(d2) or d2 >= 0:
                break
            step = np.clip(-d1 / d2, -1.0, 1.0)
            g_hat += step
            if abs(step) < 1e-10:
                break
        d1 = (log_g(g_hat + eps) - log_g(g_hat - eps)) / (2 * eps)
        d2 = (log_g(g_hat + eps) - 2 * log_g(g_hat) + log_g(g_hat - eps)) / eps**2
        g_cur = 2.0 * np.arctanh(params.rho[i])
        def log_jac(g):
            return np.log(2.0) + g - 2.0 * np.logaddexp(0.0, g)

        if not np.isfinite(d2) or d2 >= -1e-12:
            # mode search failed; fall back to a flagged random walk
            work.flagged.append(f"rho[{i}] proposal fell back to random walk")
            g_prop = rng.normal(g_cur, RHO_FALLBACK_STEP)
            log_acc = log_g(g_prop) - log_g(g_cur)
            lq = log_jac(g_cur) - log_jac(g_prop)
        else:
            S = -1.0 / d2
            m_g = d1
            g_prop = rng.normal(g_hat + S * m_g, np.sqrt(S))

            def log_gauss(g):
                return m_g * (g - g_hat) - (g - g_hat) ** 2 / (2.0 * S)

            log_acc = log_g(g_prop) - log_g(g_cur) - log_gauss(g_prop) + log_gauss(g_cur)
            lq = (log_gauss(g_prop) - log_jac(g_prop)) - (log_gauss(g_cur) - log_jac(g_cur))
        if work.ledger is not None:
            work.ledger.append(
                ("rho", i, params.rho[i], np.tanh(0.5 * g_prop), log_acc, lq)
            )
        if np.isfinite(log_acc) and np.log(rng.uniform()) < log_acc:
            params.rho[i] = np.tanh(0.5 * g_prop)
            accept[i] = True
    return accept


def _draw_invgamma(a: float, b: float, rng: np.random.Generator) -> float:
    """Draw from IG(a, b) with density ~ x^{-a-1} exp(-b/x)."""
    return b / rng.gamma(a)


def sample_sigma_eta(config, params: Parameters, state: LatentState, data: Dataset,
                     priors: PriorSpec, rng: np.random.Generator,
                     work: BlockWorkspace) -> np.ndarray:
    """Inverse-gamma Gibbs for asset rows; MH with IG proposal for factor rows.

    The factor acceptance term collects the leverage drift's dependence on
    sigma through c_t; with rho = 0 it is constant and the step is Gibbs.
    """
    p, q, T = config.p, config.q, config.T
    n_tilde = priors.n_eta + T
    resid = state.h[1:] - (1.0 - params.phi) * params.mu - params.phi * state.h[:-1]
    d_tilde = (
        priors.d_eta
        + np.sum(resid**2, axis=0)
        + (1.0 - params.phi**2) * (state.h[0] - params.mu) ** 2
    )
    accept = np.zeros(q, dtype=bool)
    for i in range(p):
        params.sigma_eta[i] = np.sqrt(_draw_invgamma(0.5 * n_tilde, 0.5 * d_tilde[i], rng))
    for i in range(q):
        k = p + i
        prop_var = _draw_invgamma(0.5 * n_tilde, 0.5 * d_tilde[k], rng)
        if not config.variant.uses_leverage or params.rho[i] == 0.0:
            params.sigma_eta[k] = np.sqrt(prop_var)
            accept[i] = True
            continue
        h = state.h[:, k]
        eta = h[1:] - params.mu[k] - params.phi[k] * (h[:-1] - params.mu[k])
        f = state.f[:, i]
        f_lag = np.concatenate([[params.gamma[i]], f[:-1]])
        fr = f - params.gamma[i] - params.psi[i] * (f_lag - params.gamma[i])
        u = fr[:-1] * np.exp(-0.5 * h[:-1])
        rho = params.rho[i]

        def log_k(sig):
            z = u - rho * eta / sig
            return -0.5 * float(z @ z) / (1.0 - rho * rho)

        log_acc = log_k(np.sqrt(prop_var)) - log_k(params.sigma_eta[k])
        if work.ledger is not None:
            a, bsc = 0.5 * n_tilde, 0.5 * d_tilde[k]
            cur_var = params.sigma_eta[k] ** 2

            def ig_logpdf(v):
                return -(a + 1.0) * np.log(v) - bsc / v

            lq = ig_logpdf(prop_var) - ig_logpdf(cur_var)
            work.ledger.append(
                ("sigma_eta", k, params.sigma_eta[k], np.sqrt(prop_var), log_acc, lq)
            )
        if np.log(rng.uniform()) < log_acc:
            params.sigma_eta[k] = np.sqrt(prop_var)
            accept[i] = True
    return accept


def sample_sigma_nu(config, params: Parameters, state: LatentState, data: Dataset,
                    priors: PriorSpec, rng: np.random.Generator,
                    work: BlockWorkspace) -> None:
    """Exact inverse-gamma Gibbs for the realized-factor noise variances."""
    resid = data.x - state.f @ params.alpha.T
    n_tilde = priors.n_nu + config.T
    d_tilde = priors.d_nu + np.sum(resid**2, axis=0)
    for j in range(config.q):
        params.sigma_nu[j] = np.sqrt(_draw_invgamma(0.5 * n_tilde, 0.5 * d_tilde[j], rng))


def _delta_logpost(delta: float, p: int, T: int, sum_logdetx: float,
                   sum_logdetw: float, sum_tr: float) -> float:
    s0 = delta + p + 3.0
    k0 = delta + 2.0
    return (
        0.5 * s0 * (T * p * np.log(k0) + sum_logdetx)
        - 0.5 * (s0 + p + 1.0) * sum_logdetw
        - 0.5 * k0 * sum_tr
        - T * (0.5 * s0 * p * np.log(2.0) + multigammaln(0.5 * s0, p))
    )


def sample_delta(config, params: Parameters, state: LatentState, data: Dataset,
                 priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace,
                 tuning: McmcTuning) -> bool:
    """Random-walk MH on log delta with the full inverse-Wishart constant."""
    if not config.variant.uses_rcov:
        return False
    p, T = config.p, config.T
    X = xmat_stack(params, state.h)
    sum_logdetx = float(np.linalg.slogdet(X)[1].sum())
    sum_tr = float(np.einsum("tij,tji->", X, work.winv))
    log_prop = np.log(params.delta) + tuning.sigma_delta * rng.standard_normal()
    prop = np.exp(log_prop)
    log_acc = (
        _delta_logpost(prop, p, T, sum_logdetx, work.logdet_w_sum, sum_tr)
        - _delta_logpost(params.delta, p, T, sum_logdetx, work.logdet_w_sum, sum_tr)
        + log_prop
        - np.log(params.delta)
    )
    if work.ledger is not None:
        work.ledger.append(
            ("delta", 0, params.delta, prop, log_acc, np.log(params.delta) - log_prop)
        )
    if np.isfinite(log_acc) and np.log(rng.uniform()) < log_acc:
        params.delta = prop
        return True
    return False


BETA_MODE_TOL = 1e-8
BETA_MODE_MAX_ITERS = 25
BETA_RIDGE = 1e-8


def _beta_row_pieces(config, params, state, data, work, i):
    """Sufficient statistics of the measurement terms for loading row i."""
    T = config.T
    V2 = np.exp(state.h[:, config.p:])
    e_h = np.exp(-state.h[:, i])
    Sy = np.einsum("t,tj,tk->jk", e_h, state.f, state.f)
    m_y = np.einsum("t,t,tj->j", data.y[:, i], e_h, state.f)
    if config.variant.uses_rcov:
        wii = work.winv_diag[:, i]
        Sw = params.k0 * np.einsum("t,tj->j", wii, V2)
        r = work.winv[:, i, :] @ params.beta - wii[:, None] * params.beta[i]
        m_w = -params.k0 * np.einsum("tj,tj->j", V2, r)
    else:
        Sw = np.zeros(config.q)
        m_w = np.zeros(config.q)
    return V2, Sy, m_y, Sw, m_w


def _beta_logdet_sum(params, state, beta_row, i):
    trial = params.copy()
    trial.beta[i] = beta_row
    X = xmat_stack(trial, state.h)
    sign, ld = np.linalg.slogdet(X)
    if np.any(sign <= 0):
        return -np.inf
    return float(ld.sum())


def _beta_taylor_terms(config, params, state, beta_row, i, V2):
    """Per-t gradients and negative Hessians of the log-det sum at beta_row."""
    p, q = config.p, config.q
    trial = params.copy()
    trial.beta[i] = beta_row
    X = xmat_stack(trial, state.h)
    rhs = np.zeros((p, q + 1))
    rhs[i, 0] = 1.0
    rhs[:, 1:] = trial.beta
    sol = np.linalg.solve(X, np.broadcast_to(rhs, (config.T, p, q + 1)).copy())
    u = sol[:, :, 0]
    XinvB = sol[:, :, 1:]
    grads = 2.0 * V2 * np.einsum("kj,tk->tj", trial.beta, u)
    d_ii = u[:, i]
    BtXinvB = np.einsum("kj,tkl->tjl", trial.beta, XinvB)
    M = np.zeros((config.T, q, q))
    M[:, np.arange(q), np.arange(q)] = V2
    M -= V2[:, :, None] * BtXinvB * V2[:, None, :]
    hess = 2.0 * d_ii[:, None, None] * M - 0.5 * grads[:, :, None] * grads[:, None, :]
    return grads, -hess  # (T, q), (T, q, q): gradient and G_t^{-1}


def sample_beta(config, params: Parameters, state: LatentState, data: Dataset,
                priors: PriorSpec, rng: np.random.Generator, work: BlockWorkspace,
                tuning: McmcTuning) -> np.ndarray:
    """Row-wise MH draw of the return loading matrix.

    Without realized covariances the conditional is exactly normal and every
    draw is accepted; with them the proposal is the Taylor expansion of the
    log-determinant sum around the conditional mode.
    """
    p, q = config.p, config.q
    uses_rcov = config.variant.uses_rcov
    accept = np.zeros(p, dtype=bool)
    s0 = params.s0 if uses_rcov else 0.0
    for i in range(p):
        V2, Sy, m_y, Sw, m_w = _beta_row_pieces(config, params, state, data, work, i)
        S_inv = np.linalg.inv(np.asarray(priors.S_beta)[i])
        prior_rhs = S_inv @ np.asarray(priors.m_beta)[i]
        quad_base = np.diag(Sw) + Sy + S_inv
        lin_base = m_w + m_y + prior_rhs

        if not uses_rcov:
            prec = quad_base
            mean = np.linalg.solve(prec, lin_base)
            L = np.linalg.cholesky(prec)
            params.beta[i] = mean + np.linalg.solve(L.T, rng.standard_normal(q))
            accept[i] = True
            continue

        def log_target(row):
            ld = _beta_logdet_sum(params, state, row, i)
            return 0.5 * s0 * ld - 0.5 * row @ quad_base @ row + row @ lin_base

        # damped Newton ascent to the conditional mode; the step from a
        # PD-shifted curvature is an ascent direction, so backtracking on
        # the exact target always makes progress
        beta_hat = params.beta[i].copy()
        cur_val = log_target(beta_hat)
        for _ in range(BETA_MODE_MAX_ITERS):
            grads, Ginv = _beta_taylor_terms(config, params, state, beta_hat, i, V2)
            step_prec = 0.5 * s0 * Ginv.sum(axis=0) + quad_base
            step_prec = 0.5 * (step_prec + step_prec.T)
            lam_min = float(np.linalg.eigvalsh(step_prec).min())
            if lam_min <= 0.0:
                step_prec += (-lam_min + 1.0) * np.eye(q)
            gradient = 0.5 * s0 * grads.sum(axis=0) + lin_base - quad_base @ beta_hat
            step = np.linalg.solve(step_prec, gradient)
            if not np.all(np.isfinite(step)):
                break
            if np.max(np.abs(step)) < BETA_MODE_TOL:
                break
            scale = 1.0
            improved = False
            for _ in range(12):
                cand = beta_hat + scale * step
                val = log_target(cand)
                if val > cur_val:
                    beta_hat, cur_val = cand, val
                    improved = True
                    break
                scale *= 0.5
            if not improved:
                break
        grads, Ginv = _beta_taylor_terms(config, params, state, beta_hat, i, V2)
        prec = 0.5 * s0 * Ginv.sum(axis=0) + quad_base
        prec = 0.5 * (prec + prec.T)
        rhs = 0.5 * s0 * (Ginv.sum(axis=0) @ beta_hat + grads.sum(axis=0)) + lin_base
        try:
            L = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            # indefinite curvature away from the mode: shift to PD and flag
            work.flagged.append(f"beta[{i}] proposal precision regularized")
            lam_min = float(np.linalg.eigvalsh(prec).min())
            prec += (max(-lam_min, 0.0) + BETA_RIDGE) * np.eye(q)
            L = np.linalg.cholesky(prec)
        mean = np.linalg.solve(prec, rhs)
        prop = mean + np.linalg.solve(L.T, rng.standard_normal(q))

        def log_prop_dens(row):
            z = row - mean
            return -0.5 * z @ prec @ z

        cur = params.beta[i].copy()
        log_acc = (
            log_target(prop) - log_target(cur) - log_prop_dens(prop) + log_prop_dens(cur)
        )
        if work.ledger is not None:
            work.ledger.append(
                ("beta", i, cur, prop.copy(), log_acc,
                 log_prop_dens(prop) - log_prop_dens(cur))
            )
        if np.isfinite(log_acc) and np.log(rng.uniform()) < log_acc:
            params.beta[i] = prop
            accept[i] = True
    return accept
