"""Compiled inner loops for the explicit Richards scheme.

Node 0 is the top compartment; fluxes are positive downward and indexed by
interface (0 = soil surface, n = column bottom).
"""

import math

import numpy as np
from numba import njit

CLAMP = -1e-9


@njit(cache=True)
def _k(h, k_sat, alpha, n, tort):
    m = 1.0 - 1.0 / n
    ls = math.log(-alpha * h)
    sn = math.exp(n * ls)
    la = math.log1p(sn)
    # Se^(1/m) = 1/A, so 1 - Se^(1/m) = s^n / A = 1 / (1 + s^-n)
    inner = -math.expm1(-m * math.log1p(math.exp(-n * ls)))
    return k_sat * math.exp(-m * tort * la) * inner * inner


@njit(cache=True)
def _c(h, span, alpha, n):
    m = 1.0 - 1.0 / n
    ls = math.log(-alpha * h)
    sn = math.exp(n * ls)
    la = math.log1p(sn)
    return span * m * n * alpha * math.exp((n - 1.0) * ls - (m + 1.0) * la)


@njit(cache=True)
def _k_dk(h, k_sat, alpha, n, tort):
    """K(h) and dK/dh."""
    m = 1.0 - 1.0 / n
    ls = math.log(-alpha * h)
    sn = math.exp(n * ls)
    la = math.log1p(sn)
    se = math.exp(-m * la)
    lu = -m * math.log1p(math.exp(-n * ls))
    one_u_m = math.exp(lu)  # (1 - Se^(1/m))^m
    inner = -math.expm1(lu)
    se_t = math.exp(-m * tort * la)
    k = k_sat * se_t * inner * inner
    # dSe/dh = m n alpha s^(n-1) A^(-m-1)
    dse = m * n * alpha * math.exp((n - 1.0) * ls - (m + 1.0) * la)
    # d inner/dSe = (1-u)^(m-1) Se^(1/m-1), with 1-u = s^n/A and Se^(1/m) = 1/A
    dinner = one_u_m / (sn * se)
    dk_dse = k_sat * (tort * se_t / se * inner * inner + 2.0 * se_t * inner * dinner)
    return k, dk_dse * dse


@njit(cache=True)
def _c_dc(h, span, alpha, n):
    """C(h) and dC/dh."""
    m = 1.0 - 1.0 / n
    s = -alpha * h
    ls = math.log(s)
    sn = math.exp(n * ls)
    a = 1.0 + sn
    la = math.log1p(sn)
    c = span * m * n * alpha * math.exp((n - 1.0) * ls - (m + 1.0) * la)
    dc = -c * alpha / (s * a) * ((n - 1.0) * a - (m + 1.0) * n * sn)
    return c, dc


@njit(cache=True)
def fluxes(h, k_sat, span, alpha, n, tort, dz, q_top, sealed, out):
    nn = h.shape[0]
    out[0] = q_top
    for j in range(nn - 1):
        hm = 0.5 * (h[j] + h[j + 1])
        if hm > CLAMP:
            hm = CLAMP
        out[j + 1] = _k(hm, k_sat, alpha, n, tort) * ((h[j] - h[j + 1]) / dz + 1.0)
    if sealed:
        out[nn] = 0.0
    else:
        hb = min(h[nn - 1], CLAMP)
        out[nn] = _k(hb, k_sat, alpha, n, tort)


@njit(cache=True)
def integrate(h0, q, dt, k_sat, span, alpha, n, tort, dz, sealed, guard):
    """Advance ``len(q)`` explicit Euler substeps.

    Returns the final state, the index of the substep that tripped the
    instability guard (-1 when none did) and the water drained through the
    bottom (m).
    """
    nn = h0.shape[0]
    h = h0.copy()
    hn = np.empty(nn)
    f = np.empty(nn + 1)
    drained = 0.0
    for s in range(q.shape[0]):
        fluxes(h, k_sat, span, alpha, n, tort, dz, q[s], sealed, f)
        for i in range(nn):
            hc = min(h[i], CLAMP)
            dh = dt * (f[i] - f[i + 1]) / (dz * _c(hc, span, alpha, n))
            if not (abs(dh) <= guard):
                return h, s, drained
            v = h[i] + dh
            hn[i] = v if v < CLAMP else CLAMP
        drained += dt * f[nn]
        h, hn = hn, h
    return h, -1, drained


@njit(cache=True)
def integrate_tangent(h0, q, dt, k_sat, span, alpha, n, tort, dz, sealed, guard):
    """Like :func:`integrate` but also propagates d h / d (h0, k_sat).

    The sensitivity matrix has shape ``(nn, nn + 1)``; its last column is the
    derivative with respect to ``k_sat``.
    """
    nn = h0.shape[0]
    h = h0.copy()
    hn = np.empty(nn)
    sens = np.zeros((nn, nn + 1))
    for i in range(nn):
        sens[i, i] = 1.0
    new = np.empty((nn, nn + 1))
    f = np.empty(nn + 1)
    # dF_j/dh_{j-1}, dF_j/dh_j at interface j (upper node j-1, lower node j)
    df_up = np.zeros(nn + 1)
    df_lo = np.zeros(nn + 1)
    df_ks = np.zeros(nn + 1)
    for s in range(q.shape[0]):
        f[0] = q[s]
        df_up[0] = 0.0
        df_lo[0] = 0.0
        df_ks[0] = 0.0
        for j in range(1, nn):
            hm = 0.5 * (h[j - 1] + h[j])
            if hm > CLAMP:
                k, dk = _k_dk(CLAMP, k_sat, alpha, n, tort)
                dk = 0.0
            else:
                k, dk = _k_dk(hm, k_sat, alpha, n, tort)
            g = (h[j - 1] - h[j]) / dz + 1.0
            f[j] = k * g
            df_up[j] = 0.5 * dk * g + k / dz
            df_lo[j] = 0.5 * dk * g - k / dz
            df_ks[j] = f[j] / k_sat
        if sealed:
            f[nn] = 0.0
            df_up[nn] = 0.0
            df_ks[nn] = 0.0
        else:
            hb = h[nn - 1]
            if hb > CLAMP:
                k, dk = _k_dk(CLAMP, k_sat, alpha, n, tort)
                dk = 0.0
            else:
                k, dk = _k_dk(hb, k_sat, alpha, n, tort)
            f[nn] = k
            df_up[nn] = dk
            df_ks[nn] = k / k_sat
        df_lo[nn] = 0.0
        for i in range(nn):
            hi = h[i]
            if hi > CLAMP:
                c, dc = _c_dc(CLAMP, span, alpha, n)
                dc = 0.0
            else:
                c, dc = _c_dc(hi, span, alpha, n)
            w = dt / (dz * c)
            gi = f[i] - f[i + 1]
            dh = w * gi
            if not (abs(dh) <= guard):
                return h, sens, s
            v = hi + dh
            if v >= CLAMP:
                hn[i] = CLAMP
                for col in range(nn + 1):
                    new[i, col] = 0.0
                continue
            hn[i] = v
            # d(dh_i)/dh_{i-1}, dh_i, dh_{i+1}
            a_im = w * df_up[i] if i > 0 else 0.0
            a_ii = 1.0 + w * (df_lo[i] - df_up[i + 1]) - dh * dc / c
            a_ip = -w * df_lo[i + 1] if i < nn - 1 else 0.0
            b = w * (df_ks[i] - df_ks[i + 1])
            for col in range(nn + 1):
                acc = a_ii * sens[i, col]
                if i > 0:
                    acc += a_im * sens[i - 1, col]
                if i < nn - 1:
                    acc += a_ip * sens[i + 1, col]
                new[i, col] = acc
            new[i, nn] += b
        h, hn = hn, h
        sens, new = new, sens
    return h, sens, -1


@njit(cache=True)
def retention_and_gradient(h, beta, out_grad):
    """Water content at ``h`` and its gradient w.r.t. (theta_s, theta_r, alpha, n)."""
    ts, tr, alpha, n = beta[0], beta[1], beta[2], beta[3]
    if h > CLAMP:
        h = CLAMP
    m = 1.0 - 1.0 / n
    s = -alpha * h
    ls = math.log(s)
    sn = math.exp(n * ls)
    la = math.log1p(sn)
    se = math.exp(-m * la)
    span = ts - tr
    out_grad[0] = se
    out_grad[1] = 1.0 - se
    out_grad[2] = -span * m * n * sn * math.exp(-(m + 1.0) * la) / alpha
    out_grad[3] = span * se * (-la / (n * n) - m * sn * ls / (1.0 + sn))
    return span * se + tr
