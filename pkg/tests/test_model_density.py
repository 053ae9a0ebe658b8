import numpy as np
import pytest
from scipy import stats

from fmrsv.core import Dataset, LatentState, ModelConfig, Parameters, Variant, default_priors
from fmrsv.matrix_stats import invwishart_logpdf
from fmrsv.model_density import (
    NumericError,
    beta_grad_hess,
    block_coeffs_h2,
    h1_logdet_derivs,
    h2_logdet_derivs,
    leverage_drift_c,
    log_joint,
    log_joint_terms,
    v2h_variances,
    xmat_stack,
)


def random_problem(rng, p=3, q=2, T=5, variant=Variant.FMRSV, rho=None, beta=None):
    config = ModelConfig(p=p, q=q, T=T, variant=variant)
    if rho is None:
        rho = rng.uniform(-0.6, 0.6, size=q)
    if not variant.uses_leverage:
        rho = np.zeros(q)
    alpha = np.eye(q)
    alpha[np.tril_indices(q, -1)] = rng.normal(scale=0.4, size=q * (q - 1) // 2)
    params = Parameters(
        alpha=alpha,
        beta=rng.normal(scale=0.8, size=(p, q)) if beta is None else beta,
        mu=rng.normal(scale=0.4, size=p + q),
        gamma=rng.normal(scale=0.2, size=q),
        phi=rng.uniform(0.5, 0.95, size=p + q),
        psi=rng.uniform(-0.4, 0.6, size=q),
        rho=rho,
        sigma_eta=rng.uniform(0.1, 0.4, size=p + q),
        sigma_nu=rng.uniform(0.05, 0.3, size=q),
        delta=rng.uniform(4.0, 12.0),
    )
    state = LatentState(
        h=rng.normal(scale=0.5, size=(T, p + q)) - 0.5,
        f=rng.normal(scale=1.0, size=(T, q)),
    )
    W = None
    if variant.uses_rcov:
        W = np.empty((T, p, p))
        for t in range(T):
            G = rng.normal(size=(p, p + 3))
            W[t] = G @ G.T / (p + 3) + 0.2 * np.eye(p)
    data = Dataset(
        y=rng.normal(size=(T, p)),
        x=rng.normal(size=(T, q)),
        W=W,
    )
    return config, params, state, data


def test_log_joint_scalar_closed_form(rng):
    # p = q = 1, one period: every term is a scalar density evaluated by scipy
    config, params, state, data = random_problem(rng, p=1, q=1, T=1)
    p = 1
    h1, h2 = state.h[0]
    f1 = state.f[0, 0]
    sig_y2 = np.exp(h1)
    X = params.beta[0, 0] ** 2 * np.exp(h2) + sig_y2

    expected = invwishart_logpdf(data.W[0], params.s0, params.k0 * np.array([[X]]))
    expected += stats.norm(params.beta[0, 0] * f1, np.sqrt(sig_y2)).logpdf(data.y[0, 0])
    for i in range(2):
        sd0 = params.sigma_eta[i] / np.sqrt(1 - params.phi[i] ** 2)
        expected += stats.norm(params.mu[i], sd0).logpdf(state.h[0, i])
    # t = T: no leverage adjustment, f_0 = gamma
    expected += stats.norm(params.gamma[0], np.exp(0.5 * h2)).logpdf(f1)
    expected += stats.norm(f1, params.sigma_nu[0]).logpdf(data.x[0, 0])

    got = log_joint(config, params, state, data)
    assert got == pytest.approx(expected, abs=1e-10)


def test_log_joint_rho_zero_reduces_to_plain_factor_ar(rng):
    config, params, state, data = random_problem(rng, rho=np.zeros(2))
    terms = log_joint_terms(config, params, state, data)
    # direct implementation of the reduced factor density
    f_lag = np.vstack([params.gamma, state.f[:-1]])
    mean = params.gamma + params.psi * (f_lag - params.gamma)
    v = np.exp(state.h[:, params.p:])
    direct = np.sum(stats.norm(mean, np.sqrt(v)).logpdf(state.f))
    assert terms["f_trans"] == pytest.approx(direct, abs=1e-12)


def test_log_joint_fmsv_drops_only_w_terms(rng):
    config, params, state, data = random_problem(rng)
    full = log_joint_terms(config, params, state, data, default_priors(3, 2))
    config_fmsv = ModelConfig(p=3, q=2, T=5, variant=Variant.FMSV)
    reduced = log_joint_terms(config_fmsv, params, state, data, default_priors(3, 2))
    assert "w_meas" in full and "w_meas" not in reduced
    for key in reduced:
        assert reduced[key] == pytest.approx(full[key], abs=1e-12)


def test_log_joint_rejects_h_overflow(rng):
    config, params, state, data = random_problem(rng)
    state.h[0, 0] = 60.0
    with pytest.raises(NumericError):
        log_joint(config, params, state, data)


def test_log_joint_continuity(rng):
    config, params, state, data = random_problem(rng)
    base = log_joint(config, params, state, data)
    params2 = params.copy()
    params2.gamma = params.gamma + 1e-8
    assert abs(log_joint(config, params2, state, data) - base) < 1e-5


def _g_of_beta(params, state, t, i, beta_i):
    trial = params.copy()
    trial.beta[i] = beta_i
    X = xmat_stack(trial, state.h)[t]
    return np.linalg.slogdet(X)[1]


def test_beta_grad_hess_finite_difference(rng):
    for _ in range(10):
        config, params, state, data = random_problem(rng, p=4, q=2)
        t = int(rng.integers(config.T))
        i = int(rng.integers(config.p))
        grad, hess = beta_grad_hess(params, state, t, i)
        eps = 1e-5
        fd_grad = np.empty(config.q)
        fd_hess = np.empty((config.q, config.q))
        base_beta = params.beta[i].copy()
        for a in range(config.q):
            e = np.zeros(config.q)
            e[a] = eps
            fd_grad[a] = (
                _g_of_beta(params, state, t, i, base_beta + e)
                - _g_of_beta(params, state, t, i, base_beta - e)
            ) / (2 * eps)
            ga_p, _ = beta_grad_hess_at(params, state, t, i, base_beta + e)
            ga_m, _ = beta_grad_hess_at(params, state, t, i, base_beta - e)
            fd_hess[a] = (ga_p - ga_m) / (2 * eps)
        np.testing.assert_allclose(grad, fd_grad, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(hess, 0.5 * (fd_hess + fd_hess.T), rtol=1e-4, atol=1e-6)


def beta_grad_hess_at(params, state, t, i, beta_i):
    trial = params.copy()
    trial.beta[i] = beta_i
    return beta_grad_hess(trial, state, t, i)


def test_beta_grad_zero_loading(rng):
    config, params, state, data = random_problem(rng, beta=np.zeros((3, 2)))
    grad, _ = beta_grad_hess(params, state, 1, 0)
    np.testing.assert_allclose(grad, np.zeros(2), atol=1e-14)


def test_beta_grad_scalar_case(rng):
    config, params, state, data = random_problem(rng, p=1, q=1)
    t = 2
    beta = params.beta[0, 0]
    v2 = np.exp(state.h[t, 1])
    v1 = np.exp(state.h[t, 0])
    grad, hess = beta_grad_hess(params, state, t, 0)
    assert grad[0] == pytest.approx(2 * beta * v2 / (beta**2 * v2 + v1), rel=1e-12)


def test_h1_derivs_diagonal_reduction(rng):
    # B = 0 makes X diagonal: d_ii = exp(-h), so first = 1 and second = 0
    config, params, state, data = random_problem(rng, beta=np.zeros((3, 2)))
    first, second = h1_logdet_derivs(params, state, 2, 1)
    assert first == pytest.approx(1.0, rel=1e-12)
    assert second == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("which", ["h1", "h2"])
def test_h_logdet_derivs_finite_difference(rng, which):
    for _ in range(8):
        config, params, state, data = random_problem(rng, p=4, q=2)
        t = int(rng.integers(config.T))
        if which == "h1":
            i = int(rng.integers(config.p))
            col = i
            fn = h1_logdet_derivs
        else:
            i = int(rng.integers(config.q))
            col = config.p + i
            fn = h2_logdet_derivs
        first, second = fn(params, state, t, i)
        eps = 1e-5

        def g_at(delta):
            trial = state.copy()
            trial.h[t, col] += delta
            return np.linalg.slogdet(xmat_stack(params, trial.h)[t])[1]

        fd_first = (g_at(eps) - g_at(-eps)) / (2 * eps)
        fd_second = (g_at(eps) - 2 * g_at(0.0) + g_at(-eps)) / eps**2
        assert first == pytest.approx(fd_first, rel=1e-6, abs=1e-9)
        assert second == pytest.approx(fd_second, rel=1e-3, abs=1e-5)


def test_h2_derivs_zero_column(rng):
    beta = np.ones((3, 2))
    beta[:, 1] = 0.0
    config, params, state, data = random_problem(rng, beta=beta)
    first, second = h2_logdet_derivs(params, state, 1, 1)
    assert first == 0.0 and second == 0.0


def test_h2_scalar_closed_form(rng):
    config, params, state, data = random_problem(rng, p=1, q=1)
    t = 1
    beta = params.beta[0, 0]
    v1, v2 = np.exp(state.h[t, 0]), np.exp(state.h[t, 1])
    first, _ = h2_logdet_derivs(params, state, t, 0)
    assert first == pytest.approx(beta**2 * v2 / (beta**2 * v2 + v1), rel=1e-12)


def test_block_coeffs_leverage_off_reduction(rng):
    beta = rng.normal(size=(3, 2))
    beta[:, 0] = 0.0
    config, params, state, data = random_problem(
        rng, variant=Variant.FMSV, rho=np.zeros(2), beta=beta
    )
    t = 2  # interior
    d, A, B = block_coeffs_h2(config, params, state, data, t, 0, 1, 3)
    f_resid = state.f[t, 0] - (
        params.gamma[0] + params.psi[0] * (state.f[t - 1, 0] - params.gamma[0])
    )
    sf2 = np.exp(state.h[t, config.p])
    assert d == pytest.approx(-0.5 + f_resid**2 / (2 * sf2), rel=1e-12)
    assert A == pytest.approx(0.5, rel=1e-12)
    assert B == 0.0


def _block_target(config, params, state, data, i, s, e):
    """Exact block log target L for factor i on block [s, e] (up to constants
    free of the block's h entries): per-t measurement terms, the factor
    transition terms that involve the block, and the trailing AR edge."""
    p, T = config.p, config.T
    k = p + i
    total = 0.0
    if config.variant.uses_rcov:
        X = xmat_stack(params, state.h)
        s0, k0 = params.s0, params.k0
        for t in range(s, e + 1):
            total += 0.5 * s0 * np.linalg.slogdet(X[t])[1]
            total -= 0.5 * k0 * np.einsum("ij,ji->", X[t], np.linalg.inv(data.W[t]))
    c = leverage_drift_c(params, state.h)
    v2h = v2h_variances(params, state.h)
    f_lag = np.vstack([params.gamma, state.f[:-1]])
    resid = state.f - params.gamma - params.psi * (f_lag - params.gamma) - c
    lo = max(s - 1, 0)  # the s-1 term couples to h_s through its drift
    for t in range(lo, e + 1):
        total += -0.5 * (np.log(v2h[t, i]) + resid[t, i] ** 2 / v2h[t, i])
    # within the measurement group, -h/2 appears via log v2h above; edge term:
    if e < T - 1:
        sig2 = params.sigma_eta[k] ** 2
        eta = state.h[e + 1, k] - params.mu[k] - params.phi[k] * (state.h[e, k] - params.mu[k])
        total += -0.5 * eta**2 / sig2
    return total


def test_block_coeffs_d_matches_finite_difference(rng):
    for _ in range(6):
        config, params, state, data = random_problem(rng, p=3, q=2, T=6)
        i = int(rng.integers(config.q))
        s, e = 1, 4
        t = int(rng.integers(s, e + 1))
        d, _, _ = block_coeffs_h2(config, params, state, data, t, i, s, e)
        eps = 1e-6

        def L_at(delta):
            trial = state.copy()
            trial.h[t, config.p + i] += delta
            return _block_target(config, params, trial, data, i, s, e)

        fd = (L_at(eps) - L_at(-eps)) / (2 * eps)
        assert d == pytest.approx(fd, rel=2e-5, abs=1e-5)


def test_block_coeffs_q_positive_definite(rng):
    for _ in range(5):
        config, params, state, data = random_problem(rng, p=3, q=2, T=8)
        i = int(rng.integers(config.q))
        s, e = 2, 6
        n = e - s + 1
        Q = np.zeros((n, n))
        for idx, t in enumerate(range(s, e + 1)):
            d, A, B = block_coeffs_h2(config, params, state, data, t, i, s, e)
            assert A >= 0.0
            Q[idx, idx] = A
            if idx > 0:
                Q[idx, idx - 1] = Q[idx - 1, idx] = B
        assert np.linalg.eigvalsh(Q).min() > 0


def test_block_coeffs_expected_information_mc(rng):
    # A_t equals -E[d^2 L / dh^2] with the expectation over f_t at its
    # conditional law (rcov terms off isolates the leverage pieces)
    config, params, state, data = random_problem(rng, p=2, q=1, T=5, variant=Variant.FMSV)
    params.rho[:] = 0.55
    i, s, e = 0, 1, 3
    t = 2
    from fmrsv.model_density import _mu_f, _sigma_f2

    mu_f = _mu_f(params, state, t, i)
    sf2 = _sigma_f2(params, state, t, i)
    _, A, _ = block_coeffs_h2(config, params, state, data, t, i, s, e)
    eps = 1e-4

    def d_at(delta, trial_state):
        st = trial_state.copy()
        st.h[t, config.p + i] += delta
        d, _, _ = block_coeffs_h2(config, params, st, data, t, i, s, e)
        return d

    draws = rng.normal(mu_f, np.sqrt(sf2), size=4000)
    vals = np.empty(draws.shape[0])
    for n, fval in enumerate(draws):
        st = state.copy()
        st.f[t, i] = fval
        vals[n] = -(d_at(eps, st) - d_at(-eps, st)) / (2 * eps)
    se = vals.std(ddof=1) / np.sqrt(vals.shape[0])
    assert abs(vals.mean() - A) < 5 * se + 1e-4
