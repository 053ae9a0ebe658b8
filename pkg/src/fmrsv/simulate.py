"""Synthetic data generation from known parameters.

Draws follow the generative model: stationary AR(1) log-volatilities with
leverage correlation between each factor innovation and the next period's
factor volatility shock, latent factors, daily returns, realized factors,
and (for variants with realized covariances) inverse-Wishart realized
covariance matrices centered on B V2_t B' + V1_t.

The noise ordering draws the return/factor shocks first and the volatility
shocks conditionally on them, mirroring the h_{t+1} | eps_t conditional the
samplers use.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from .core import Dataset, LatentState, ModelConfig, Parameters

__all__ = ["generate"]


def generate(
    config: ModelConfig,
    params: Parameters,
    T: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Dataset, LatentState]:
    """Simulate a Dataset of length T plus the latent truth."""
    if rng is None:
        rng = np.random.default_rng()
    if T is None:
        T = config.T
    p, q = config.p, config.q
    n = p + q
    mu, phi, sig = params.mu, params.phi, params.sigma_eta
    rho = params.rho if config.variant.uses_leverage else np.zeros(q)

    h = np.empty((T, n))
    f = np.empty((T, q))
    y = np.empty((T, p))
    x = np.empty((T, q))

    h[0] = mu + rng.standard_normal(n) * sig / np.sqrt(1.0 - phi**2)
    f_prev = params.gamma.copy()
    for t in range(T):
        eps1 = rng.standard_normal(p)
        eps2 = rng.standard_normal(q)
        f[t] = params.gamma + params.psi * (f_prev - params.gamma) + np.exp(0.5 * h[t, p:]) * eps2
        y[t] = params.beta @ f[t] + np.exp(0.5 * h[t, :p]) * eps1
        x[t] = params.alpha @ f[t] + params.sigma_nu * rng.standard_normal(q)
        if t < T - 1:
            # volatility shocks conditional on the return-side shocks:
            # idiosyncratic rows are independent, factor rows correlate with eps2
            z = rng.standard_normal(n)
            eta = sig * z
            eta[p:] = sig[p:] * (rho * eps2 + np.sqrt(1.0 - rho**2) * z[p:])
            h[t + 1] = mu + phi * (h[t] - mu) + eta
        f_prev = f[t]

    W = None
    if config.variant.uses_rcov:
        s0, k0 = params.s0, params.k0
        V2 = np.exp(h[:, p:])
        V1 = np.exp(h[:, :p])
        W = np.empty((T, p, p))
        for t in range(T):
            Sigma = (params.beta * V2[t]) @ params.beta.T + np.diag(V1[t])
            W[t] = stats.invwishart.rvs(df=s0, scale=k0 * Sigma, random_state=rng)
            if p == 1:
                W[t] = np.atleast_2d(W[t])
    return Dataset(y=y, x=x, W=W), LatentState(h=h, f=f)
