"""Scalar-state kernels for the log-volatility block samplers.

Each block proposal comes from a univariate linear Gaussian auxiliary model

    yhat_t = z_t h_t + oint_t + g1_t xi1_t + g2_t xi2_t
    h_{t+1} = cmean + phi h_t + sig xi2_t

where xi2 is shared between the observation and the transition (the
factor-volatility auxiliary model has correlated errors, the idiosyncratic
one sets g2 = 0). Everything here is plain float arithmetic so numba can
compile it; the pure-Python fallback runs the identical code.

Acceptance ratios are computed as differences of (exact target minus the
proposal's Taylor exponent), evaluated with rank-one Sherman-Morrison
updates of log|X_t| and the needed X_t^{-1} entries from their values at
the sweep's entry state.

Status codes: blocks are rejected outright when the mode search diverges
(target decreased three refinements in a row) or when a proposal leaves
the numerically safe range for exp(h).
"""

import numpy as np

from ._accel import maybe_jit

H_CLAMP = 40.0
D_FLOOR = 1e-10
CURV_FLOOR = 1e-10
MODE_TOL = 1e-8
DIVERGE_LIMIT = 3


@maybe_jit
def _block_smooth(yhat, z, g1, g2, oint, phi, cmean, sig, a1, P1):
    """Posterior mean of the block states under the auxiliary model."""
    n = yhat.shape[0]
    e = np.empty(n)
    D = np.empty(n)
    Kg = np.zeros(n)
    a = a1
    P = P1
    sig2 = sig * sig
    for t in range(n):
        e[t] = yhat[t] - z[t] * a - oint[t]
        D[t] = z[t] * z[t] * P + g1[t] * g1[t] + g2[t] * g2[t]
        if D[t] < 1e-300:
            return False, np.zeros(n)
        if t < n - 1:
            Kg[t] = (phi * P * z[t] + sig * g2[t]) / D[t]
            a = cmean + phi * a + Kg[t] * e[t]
            P = phi * phi * P + sig2 - Kg[t] * Kg[t] * D[t]
    r = 0.0
    xi2 = np.zeros(n)
    for t in range(n - 1, -1, -1):
        iFe = e[t] / D[t]
        if t < n - 1:
            xi2[t] = g2[t] * iFe + (sig - Kg[t] * g2[t]) * r
            r = z[t] * iFe + (phi - Kg[t] * z[t]) * r
        else:
            xi2[t] = g2[t] * iFe
            r = z[t] * iFe
    out = np.empty(n)
    out[0] = a1 + P1 * r
    for t in range(n - 1):
        out[t + 1] = cmean + phi * out[t] + sig * xi2[t]
    return True, out


@maybe_jit
def _block_draw(yhat, z, g1, g2, oint, phi, cmean, sig, a1, P1,
                zn_init, zn_state, zn_obs):
    """One posterior draw via mean correction: smooth(y) + sim - smooth(y+)."""
    n = yhat.shape[0]
    ok1, shat = _block_smooth(yhat, z, g1, g2, oint, phi, cmean, sig, a1, P1)
    if not ok1:
        return False, np.zeros(n)
    hplus = np.empty(n)
    yplus = np.empty(n)
    hplus[0] = a1 + np.sqrt(P1) * zn_init
    for t in range(n - 1):
        hplus[t + 1] = cmean + phi * hplus[t] + sig * zn_state[t]
    for t in range(n):
        yplus[t] = z[t] * hplus[t] + oint[t] + g1[t] * zn_obs[t] + g2[t] * zn_state[t]
    ok2, shat_plus = _block_smooth(yplus, z, g1, g2, oint, phi, cmean, sig, a1, P1)
    if not ok2:
        return False, np.zeros(n)
    return True, shat + hplus - shat_plus


@maybe_jit
def _prior_ar(hb, a1, P1, phi, cmean, sig2):
    val = -0.5 * (hb[0] - a1) ** 2 / P1
    for t in range(1, hb.shape[0]):
        val -= 0.5 * (hb[t] - cmean - phi * hb[t - 1]) ** 2 / sig2
    return val


# ---------------------------------------------------------------------------
# idiosyncratic volatilities
# ---------------------------------------------------------------------------

@maybe_jit
def _h1_lsum(hb, s, s0, k0, wii, aii, logdetx, yres2, ehbase):
    """Exact per-block measurement terms (time-local for asset columns)."""
    total = 0.0
    for j in range(hb.shape[0]):
        t = s + j
        hv = hb[j]
        if hv > H_CLAMP or hv < -H_CLAMP:
            return -np.inf
        eh = np.exp(hv)
        if s0 != 0.0:
            arg = 1.0 + (eh - ehbase[t]) * aii[t]
            if arg <= 0.0:
                return -np.inf
            total += 0.5 * s0 * (logdetx[t] + np.log(arg))
            total -= 0.5 * k0 * wii[t] * eh
        total -= 0.5 * (hv + yres2[t] * np.exp(-hv))
    return total


@maybe_jit
def _h1_coeffs(hhat, s, e, T, hcol, phi, mu, sig, s0, k0, wii, aii, yres2, ehbase):
    """Taylor coefficients and auxiliary observations at the mode guess."""
    n = e - s + 1
    lp = np.empty(n)
    lpp = np.empty(n)
    v = np.empty(n)
    yhat = np.empty(n)
    sig2 = sig * sig
    for j in range(n):
        t = s + j
        hv = hhat[j]
        eh = np.exp(hv)
        if s0 != 0.0:
            arg = 1.0 + (eh - ehbase[t]) * aii[t]
            if arg <= 0.0:
                arg = 1e-12
            d = aii[t] / arg
        else:
            d = 0.0
        de = d * eh
        lp[j] = 0.5 * s0 * de - 0.5 * k0 * wii[t] * eh + 0.5 * (-1.0 + yres2[t] * np.exp(-hv))
        curv = 0.5 * s0 * (de - de * de) - 0.5 * k0 * wii[t] * eh - 0.5 * yres2[t] * np.exp(-hv)
        if curv > -CURV_FLOOR:
            curv = -CURV_FLOOR
        lpp[j] = curv
        if j == n - 1 and e < T - 1:
            denom = phi * phi / sig2 - curv
            v[j] = 1.0 / denom
            yhat[j] = v[j] * (
                lp[j] - curv * hv + phi / sig2 * (hcol[e + 1] - (1.0 - phi) * mu)
            )
        else:
            v[j] = -1.0 / curv
            yhat[j] = hv + v[j] * lp[j]
    return lp, lpp, v, yhat


@maybe_jit
def _taylor_sum(hb, hhat, lp, lpp):
    total = 0.0
    for j in range(hb.shape[0]):
        dh = hb[j] - hhat[j]
        total += lp[j] * dh + 0.5 * lpp[j] * dh * dh
    return total


@maybe_jit
def h1_asset_sweep(hcol, knots, phi, mu, sig, s0, k0, wii, aii, logdetx, yres2,
                   mode_iters, zn_init, zn_state, zn_obs, u_accept):
    """One multi-move sweep over all blocks of a single asset's volatilities.

    Mutates hcol in place; returns int8 flags (1 accepted) per block.
    """
    T = hcol.shape[0]
    K = knots.shape[0] - 1
    accept = np.zeros(K, dtype=np.int8)
    sig2 = sig * sig
    ehbase = np.exp(hcol)
    cmean = (1.0 - phi) * mu
    for k in range(K):
        s = knots[k]
        e = knots[k + 1] - 1
        n = e - s + 1
        cur = hcol[s : e + 1].copy()
        if s == 0:
            a1 = mu
            P1 = sig2 / (1.0 - phi * phi)
        else:
            a1 = cmean + phi * hcol[s - 1]
            P1 = sig2

        hhat = cur.copy()
        lp = np.zeros(n)
        lpp = np.zeros(n)
        v = np.zeros(n)
        yhat = np.zeros(n)
        prev_target = -np.inf
        n_down = 0
        failed = False
        for it in range(mode_iters):
            lp, lpp, v, yhat = _h1_coeffs(
                hhat, s, e, T, hcol, phi, mu, sig, s0, k0, wii, aii, yres2, ehbase
            )
            ok, smoothed = _block_smooth(
                yhat, np.ones(n), np.sqrt(v), np.zeros(n), np.zeros(n),
                phi, cmean, sig, a1, P1,
            )
            if not ok:
                failed = True
                break
            clamped = False
            for j in range(n):
                if smoothed[j] > H_CLAMP or smoothed[j] < -H_CLAMP:
                    clamped = True
            if clamped:
                failed = True
                break
            delta = 0.0
            for j in range(n):
                dj = abs(smoothed[j] - hhat[j])
                if dj > delta:
                    delta = dj
            hhat = smoothed
            target = _prior_ar(hhat, a1, P1, phi, cmean, sig2) + _h1_lsum(
                hhat, s, s0, k0, wii, aii, logdetx, yres2, ehbase
            )
            if e < T - 1:
                target -= 0.5 * (hcol[e + 1] - cmean - phi * hhat[n - 1]) ** 2 / sig2
            if target < prev_target:
                n_down += 1
                if n_down >= DIVERGE_LIMIT:
                    failed = True
                    break
            else:
                n_down = 0
            prev_target = target
            if delta < MODE_TOL:
                break
        if failed:
            continue

        lp, lpp, v, yhat = _h1_coeffs(
            hhat, s, e, T, hcol, phi, mu, sig, s0, k0, wii, aii, yres2, ehbase
        )
        ok, prop = _block_draw(
            yhat, np.ones(n), np.sqrt(v), np.zeros(n), np.zeros(n),
            phi, cmean, sig, a1, P1,
            zn_init[k], zn_state[s : e + 1], zn_obs[s : e + 1],
        )
        if not ok:
            continue
        num = _h1_lsum(prop, s, s0, k0, wii, aii, logdetx, yres2, ehbase) - _taylor_sum(
            prop, hhat, lp, lpp
        )
        den = _h1_lsum(cur, s, s0, k0, wii, aii, logdetx, yres2, ehbase) - _taylor_sum(
            cur, hhat, lp, lpp
        )
        logratio = num - den
        if np.isfinite(logratio) and np.log(u_accept[k]) < logratio:
            hcol[s : e + 1] = prop
            accept[k] = 1
    return accept


# ---------------------------------------------------------------------------
# factor volatilities
# ---------------------------------------------------------------------------

@maybe_jit
def _h2_lsum(hb, s, e, T, hcol, f, f_lag, phi, mu, sig, rho, psi, gam,
             s0, k0, g_base, logdetx, trxw, twi, ehbase):
    """Exact block target: measurement terms, leverage-coupled factor terms,
    the preceding period's drift coupling, and the trailing AR edge."""
    sig2 = sig * sig
    lev = 1.0 - rho * rho
    total = 0.0
    n = e - s + 1
    for j in range(n):
        t = s + j
        hv = hb[j]
        if hv > H_CLAMP or hv < -H_CLAMP:
            return -np.inf
        eh = np.exp(hv)
        if s0 != 0.0:
            arg = 1.0 + (eh - ehbase[t]) * g_base[t]
            if arg <= 0.0:
                return -np.inf
            total += 0.5 * s0 * (logdetx[t] + np.log(arg))
            total -= 0.5 * k0 * (trxw[t] + (eh - ehbase[t]) * twi[t])
        muf = gam + psi * (f_lag[t] - gam)
        if t < T - 1:
            hnext = hb[j + 1] if j + 1 < n else hcol[t + 1]
            muf += rho * np.exp(0.5 * hv) / sig * (hnext - mu - phi * (hv - mu))
            sf2 = lev * eh
        else:
            sf2 = eh
        fr = f[t] - muf
        total -= 0.5 * (hv + fr * fr / sf2)
    if s > 0:
        hprev = hcol[s - 1]
        muf = gam + psi * (f_lag[s - 1] - gam) + rho * np.exp(0.5 * hprev) / sig * (
            hb[0] - mu - phi * (hprev - mu)
        )
        fr = f[s - 1] - muf
        total -= 0.5 * fr * fr / (lev * np.exp(hprev))
    if e < T - 1:
        total -= 0.5 * (hcol[e + 1] - (1.0 - phi) * mu - phi * hb[n - 1]) ** 2 / sig2
    return total


@maybe_jit
def _h2_coeffs(hhat, s, e, T, hcol, f, f_lag, phi, mu, sig, rho, psi, gam,
               s0, k0, g_base, twi, ehbase):
    """(d, A, B) arrays of the quadratic block approximation at the mode guess."""
    n = e - s + 1
    d = np.empty(n)
    A = np.empty(n)
    B = np.zeros(n)
    sig2 = sig * sig
    lev = 1.0 - rho * rho
    for j in range(n):
        t = s + j
        hv = hhat[j]
        eh = np.exp(hv)
        dj = -0.5
        Aj = 0.5
        if s0 != 0.0:
            arg = 1.0 + (eh - ehbase[t]) * g_base[t]
            if arg <= 0.0:
                arg = 1e-12
            ge = g_base[t] / arg * eh
            dj += 0.5 * s0 * ge - 0.5 * k0 * twi[t] * eh
            Aj += 0.5 * s0 * ge * ge
        if t < T - 1:
            hnext = hhat[j + 1] if j + 1 < n else hcol[t + 1]
            eta = hnext - mu - phi * (hv - mu)
            muf = gam + psi * (f_lag[t] - gam) + rho * np.exp(0.5 * hv) / sig * eta
            sf2 = lev * eh
            dmu_own = rho / sig * (-phi + 0.5 * eta) * np.exp(0.5 * hv)
        else:
            muf = gam + psi * (f_lag[t] - gam)
            sf2 = eh
            dmu_own = 0.0
        fr = f[t] - muf
        dj += 0.5 * fr * fr / sf2 + fr / sf2 * dmu_own
        Aj += dmu_own * dmu_own / sf2
        if t > 0:
            hprev = hhat[j - 1] if j - 1 >= 0 else hcol[t - 1]
            eta_prev = hv - mu - phi * (hprev - mu)
            muf_prev = gam + psi * (f_lag[t - 1] - gam) + rho * np.exp(0.5 * hprev) / sig * eta_prev
            sf2_prev = lev * np.exp(hprev)
            dmu_prev = rho / sig * np.exp(0.5 * hprev)
            fr_prev = f[t - 1] - muf_prev
            dj += fr_prev / sf2_prev * dmu_prev
            Aj += dmu_prev * dmu_prev / sf2_prev
            if j > 0:
                dmu_own_prev = rho / sig * (-phi + 0.5 * eta_prev) * np.exp(0.5 * hprev)
                B[j] = dmu_own_prev * dmu_prev / sf2_prev
        if t == e and e < T - 1:
            dj += phi * (hcol[e + 1] - (1.0 - phi) * mu - phi * hv) / sig2
            Aj += phi * phi / sig2
        d[j] = dj
        A[j] = Aj
    return d, A, B


@maybe_jit
def _h2_quad_sum(hb, hhat, d, Aeff, B):
    total = 0.0
    n = hb.shape[0]
    for j in range(n):
        dh = hb[j] - hhat[j]
        total += d[j] * dh - 0.5 * Aeff[j] * dh * dh
        if j > 0:
            total -= B[j] * dh * (hb[j - 1] - hhat[j - 1])
    return total


@maybe_jit
def h2_factor_sweep(hcol, knots, phi, mu, sig, rho, psi, gam, s0, k0,
                    g_base, logdetx, trxw, twi, f, f_lag,
                    mode_iters, zn_init, zn_state, zn_obs, u_accept):
    """One multi-move sweep over all blocks of one factor's volatilities."""
    T = hcol.shape[0]
    K = knots.shape[0] - 1
    accept = np.zeros(K, dtype=np.int8)
    sig2 = sig * sig
    ehbase = np.exp(hcol)
    cmean = (1.0 - phi) * mu
    for k in range(K):
        s = knots[k]
        e = knots[k + 1] - 1
        n = e - s + 1
        cur = hcol[s : e + 1].copy()
        if s == 0:
            a1 = mu
            P1 = sig2 / (1.0 - phi * phi)
        else:
            a1 = cmean + phi * hcol[s - 1]
            P1 = sig2

        hhat = cur.copy()
        d = np.zeros(n)
        Aeff = np.zeros(n)
        B = np.zeros(n)
        z = np.zeros(n)
        g1 = np.zeros(n)
        g2 = np.zeros(n)
        oint = np.zeros(n)
        yhat = np.zeros(n)
        prev_target = -np.inf
        n_down = 0
        failed = False
        converged = False
        for it in range(mode_iters + 1):
            d, A, B = _h2_coeffs(
                hhat, s, e, T, hcol, f, f_lag, phi, mu, sig, rho, psi, gam,
                s0, k0, g_base, twi, ehbase,
            )
            # forward factorization of the tridiagonal information matrix
            D = np.empty(n)
            b = np.empty(n)
            D[0] = A[0]
            if D[0] < D_FLOOR:
                D[0] = D_FLOOR
            b[0] = d[0]
            for j in range(1, n):
                D[j] = A[j] - B[j] * B[j] / D[j - 1]
                if D[j] < D_FLOOR:
                    D[j] = D_FLOOR
                b[j] = d[j] - B[j] / np.sqrt(D[j - 1]) * b[j - 1] / np.sqrt(D[j - 1])
            Aeff = np.empty(n)
            Aeff[0] = D[0]
            for j in range(1, n):
                Aeff[j] = D[j] + B[j] * B[j] / D[j - 1]
            for j in range(n):
                Kt = np.sqrt(D[j])
                if j < n - 1:
                    Jnext = B[j + 1] / np.sqrt(D[j])
                else:
                    Jnext = 0.0
                ratio = Jnext / Kt  # = B_{j+1} / D_j
                hnext_hat = hhat[j + 1] if j < n - 1 else 0.0
                yhat[j] = hhat[j] + ratio * hnext_hat + b[j] / D[j]
                z[j] = 1.0 + phi * ratio
                g1[j] = 1.0 / Kt
                g2[j] = sig * ratio
                oint[j] = ratio * cmean
            if it == mode_iters or converged:
                break
            ok, smoothed = _block_smooth(yhat, z, g1, g2, oint, phi, cmean, sig, a1, P1)
            if not ok:
                failed = True
                break
            clamped = False
            for j in range(n):
                if smoothed[j] > H_CLAMP or smoothed[j] < -H_CLAMP:
                    clamped = True
            if clamped:
                failed = True
                break
            delta = 0.0
            for j in range(n):
                dj = abs(smoothed[j] - hhat[j])
                if dj > delta:
                    delta = dj
            hhat = smoothed
            target = _prior_ar(hhat, a1, P1, phi, cmean, sig2) + _h2_lsum(
                hhat, s, e, T, hcol, f, f_lag, phi, mu, sig, rho, psi, gam,
                s0, k0, g_base, logdetx, trxw, twi, ehbase,
            )
            if target < prev_target:
                n_down += 1
                if n_down >= DIVERGE_LIMIT:
                    failed = True
                    break
            else:
                n_down = 0
            prev_target = target
            if delta < MODE_TOL:
                converged = True  # one more pass rebuilds coefficients at the mode
        if failed:
            continue

        ok, prop = _block_draw(
            yhat, z, g1, g2, oint, phi, cmean, sig, a1, P1,
            zn_init[k], zn_state[s : e + 1], zn_obs[s : e + 1],
        )
        if not ok:
            continue
        num = _h2_lsum(
            prop, s, e, T, hcol, f, f_lag, phi, mu, sig, rho, psi, gam,
            s0, k0, g_base, logdetx, trxw, twi, ehbase,
        ) - _h2_quad_sum(prop, hhat, d, Aeff, B)
        den = _h2_lsum(
            cur, s, e, T, hcol, f, f_lag, phi, mu, sig, rho, psi, gam,
            s0, k0, g_base, logdetx, trxw, twi, ehbase,
        ) - _h2_quad_sum(cur, hhat, d, Aeff, B)
        logratio = num - den
        if np.isfinite(logratio) and np.log(u_accept[k]) < logratio:
            hcol[s : e + 1] = prop
            accept[k] = 1
    return accept
