"""Compiled inner loops for the latent-state samplers.

Kernels never draw random numbers themselves: callers pass buffers of
standard normals / uniforms generated from a numpy Generator, which keeps
every chain reproducible from its seed.

Model codes follow ``ModelKind``: 0 Gompertz, 1 MoranRicker, 2 LGC, 3 LMRC,
4 LGD, 5 LMRD. The latent vector is D = log X with D[0] the initial state.
"""
import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
EXP_LIMIT = 700.0
NEG_INF = -np.inf


@njit(cache=True)
def proc_mv(kind, dprev, a, b, phi):
    """Log-space mean and variance of D_t | D_{t-1}; ok=False on overflow."""
    if kind == 0 or kind == 2 or kind == 4:
        logf = a + (1.0 + b) * dprev
    else:
        if dprev > EXP_LIMIT:
            return 0.0, 1.0, False
        g = a + b * math.exp(dprev)
        if abs(g) > EXP_LIMIT:
            return 0.0, 1.0, False
        logf = dprev + g
    if kind <= 1:
        return logf, 1.0 / phi, True
    if kind <= 3:
        if -2.0 * logf > EXP_LIMIT:
            return 0.0, 1.0, False
        v = math.log1p(math.exp(-2.0 * logf) / phi)
        if not (v > 0.0):
            return 0.0, 1.0, False
    else:
        v = math.log1p(1.0 / phi)
    return logf - 0.5 * v, v, True


@njit(cache=True)
def obs_mv(kind, d, tau):
    if kind <= 1:
        return d, 1.0 / tau
    if kind <= 3:
        v = math.log1p(math.exp(-2.0 * d) / tau)
    else:
        v = math.log1p(1.0 / tau)
    return d - 0.5 * v, v


@njit(cache=True)
def norm_lp(x, m, v):
    r = x - m
    return -0.5 * (LOG_2PI + math.log(v)) - 0.5 * r * r / v


@njit(cache=True)
def proc_lp(kind, d, dprev, a, b, phi):
    m, v, ok = proc_mv(kind, dprev, a, b, phi)
    if not ok:
        return NEG_INF
    return norm_lp(d, m, v)


@njit(cache=True)
def obs_lp(kind, f, d, tau):
    m, v = obs_mv(kind, d, tau)
    if not (v > 0.0):
        return NEG_INF
    return norm_lp(f, m, v)


@njit(cache=True)
def proc_sum(kind, D, a, b, phi):
    s = 0.0
    for t in range(1, D.shape[0]):
        lp = proc_lp(kind, D[t], D[t - 1], a, b, phi)
        if lp == NEG_INF:
            return NEG_INF
        s += lp
    return s


@njit(cache=True)
def obs_sum(kind, D, F, has_obs, tau):
    s = 0.0
    for t in range(1, D.shape[0]):
        if has_obs[t]:
            s += obs_lp(kind, F[t], D[t], tau)
    return s


@njit(cache=True)
def site_lp(kind, k, x, D, F, has_obs, a, b, phi, tau, mu0, prec0):
    """Terms of the log target that involve D[k], evaluated at D[k] = x."""
    T = D.shape[0] - 1
    if k == 0:
        lp = norm_lp(x, mu0, 1.0 / prec0)
    else:
        lp = proc_lp(kind, x, D[k - 1], a, b, phi)
        if has_obs[k]:
            lp += obs_lp(kind, F[k], x, tau)
    if k < T:
        lp += proc_lp(kind, D[k + 1], x, a, b, phi)
    if math.isnan(lp):
        return NEG_INF
    return lp


@njit(cache=True)
def gompertz_conditional(k, D, F, has_obs, a, b, phi, tau, mu0, prec0):
    """Normal full conditional (mean, precision) of D[k] in the log-space Gompertz model.

    From -phi/2 (D_k - a - c D_{k-1})^2 - phi/2 (D_{k+1} - a - c D_k)^2
    - tau/2 1{k in I} (F_k - D_k)^2 with c = 1 + b; the first term is the
    N(mu0, 1/prec0) prior when k = 0 and the second is absent when k = T.
    """
    T = D.shape[0] - 1
    c = 1.0 + b
    if k == 0:
        prec = prec0
        num = prec0 * mu0
    else:
        prec = phi
        num = phi * (a + c * D[k - 1])
        if has_obs[k]:
            prec += tau
            num += tau * F[k]
    if k < T:
        prec += phi * c * c
        num += phi * c * (D[k + 1] - a)
    return num / prec, prec


@njit(cache=True)
def latent_gibbs_sweep(D, F, has_obs, a, b, phi, tau, mu0, prec0, z):
    for k in range(D.shape[0]):
        m, p = gompertz_conditional(k, D, F, has_obs, a, b, phi, tau, mu0, prec0)
        D[k] = m + z[k] / math.sqrt(p)


@njit(cache=True)
def latent_mh_sweep(kind, D, F, has_obs, a, b, phi, tau, mu0, prec0, scales, z, logu, accepted):
    """Single-site random-walk Metropolis over D[0..T]; ``accepted`` is filled with 0/1."""
    for k in range(D.shape[0]):
        cur = D[k]
        prop = cur + scales[k] * z[k]
        lp_new = site_lp(kind, k, prop, D, F, has_obs, a, b, phi, tau, mu0, prec0)
        if lp_new == NEG_INF:
            accepted[k] = 0
            continue
        lp_old = site_lp(kind, k, cur, D, F, has_obs, a, b, phi, tau, mu0, prec0)
        if logu[k] < lp_new - lp_old:
            D[k] = prop
            accepted[k] = 1
        else:
            accepted[k] = 0


@njit(cache=True)
def halfcauchy_lp(x, g):
    return math.log(2.0 / (math.pi * g)) - math.log1p((x / g) * (x / g))


@njit(cache=True)
def run_block(
    kind, gibbs, D, F, has_obs, theta, tau_fixed, bounds, priors,
    it0, n_adapt, n_burn, thin,
    lat_scale, ab_chol, ab_mean, ab_cov, ab_loglam, log_sphi, log_stau, log_sgrp,
    z_lat, u_lat, z_par, u_par,
    out_theta, out_D, out_pos, acc,
):
    """Run ``z_lat.shape[0]`` iterations starting at global iteration ``it0``.

    theta = [a, b, phi, tau] (updated in place). bounds = [a_lo, a_hi, b_lo, b_hi].
    priors = [mu0, prec0, gamma_phi, gamma_tau]. Proposal state arrays are
    adapted in place while the global iteration is below ``n_adapt``.
    acc accumulates post-adaptation [latent accepted, latent tried, ab, ab tries,
    phi, phi tries, tau, tau tries, rescale, rescale tries]. Returns the new
    write position in out_*.

    When tau is estimated, each iteration ends with a group move that scales
    every observed residual D_k - F_k by lam and tau by lam^-2 jointly; its
    Jacobian on (D, log tau) is lam^n_obs.
    """
    n = z_lat.shape[0]
    Tp1 = D.shape[0]
    mu0, prec0, g_phi, g_tau = priors[0], priors[1], priors[2], priors[3]
    a, b, phi, tau = theta[0], theta[1], theta[2], theta[3]
    accepted = np.zeros(Tp1, dtype=np.int64)
    D_new = np.empty(Tp1)
    n_obs = 0
    for k in range(Tp1):
        if has_obs[k]:
            n_obs += 1
    pos = out_pos
    for i in range(n):
        it = it0 + i
        adapting = it < n_adapt
        gain = 1.0 / (it + 1.0) ** 0.6

        # latent states
        if gibbs:
            latent_gibbs_sweep(D, F, has_obs, a, b, phi, tau, mu0, prec0, z_lat[i])
        else:
            latent_mh_sweep(kind, D, F, has_obs, a, b, phi, tau, mu0, prec0,
                            lat_scale, z_lat[i], np.log(u_lat[i]), accepted)
            if adapting:
                for k in range(Tp1):
                    lat_scale[k] *= math.exp(gain * (accepted[k] - 0.44))
            else:
                acc[0] += accepted.sum()
                acc[1] += Tp1

        # (a, b) block
        lp_cur = proc_sum(kind, D, a, b, phi)
        za, zb = z_par[i, 0], z_par[i, 1]
        a_new = a + ab_chol[0, 0] * za
        b_new = b + ab_chol[1, 0] * za + ab_chol[1, 1] * zb
        ok = 0
        if bounds[0] <= a_new <= bounds[1] and bounds[2] <= b_new <= bounds[3]:
            lp_new = proc_sum(kind, D, a_new, b_new, phi)
            if lp_new > NEG_INF and math.log(u_par[i, 0]) < lp_new - lp_cur:
                a, b, lp_cur = a_new, b_new, lp_new
                ok = 1
        if adapting:
            ab_loglam[0] += gain * (ok - 0.35)
            # running moments of (a, b) for the proposal covariance
            w = 1.0 / (it + 2.0)
            da, db = a - ab_mean[0], b - ab_mean[1]
            ab_mean[0] += w * da
            ab_mean[1] += w * db
            ab_cov[0, 0] += w * (da * da * (1.0 - w) - ab_cov[0, 0])
            ab_cov[0, 1] += w * (da * db * (1.0 - w) - ab_cov[0, 1])
            ab_cov[1, 1] += w * (db * db * (1.0 - w) - ab_cov[1, 1])
            ab_cov[1, 0] = ab_cov[0, 1]
            if it >= 100:
                lam = math.exp(ab_loglam[0]) * 2.38 * 2.38 / 2.0
                c00 = lam * (ab_cov[0, 0] + 1e-12)
                c01 = lam * ab_cov[0, 1]
                c11 = lam * (ab_cov[1, 1] + 1e-12)
                l00 = math.sqrt(c00)
                l10 = c01 / l00
                r = c11 - l10 * l10
                if r > 0.0:
                    ab_chol[0, 0] = l00
                    ab_chol[1, 0] = l10
                    ab_chol[1, 1] = math.sqrt(r)
        else:
            acc[2] += ok
            acc[3] += 1

        # process precision on the log scale (Jacobian: + log phi)
        phi_new = phi * math.exp(math.exp(log_sphi[0]) * z_par[i, 2])
        ok = 0
        lp_new = proc_sum(kind, D, a, b, phi_new)
        if lp_new > NEG_INF:
            r = (lp_new + halfcauchy_lp(phi_new, g_phi) + math.log(phi_new)) - (
                lp_cur + halfcauchy_lp(phi, g_phi) + math.log(phi))
            if math.log(u_par[i, 1]) < r:
                phi = phi_new
                ok = 1
        if adapting:
            log_sphi[0] += gain * (ok - 0.44)
        else:
            acc[4] += ok
            acc[5] += 1

        # observation precision
        if not tau_fixed:
            tau_new = tau * math.exp(math.exp(log_stau[0]) * z_par[i, 3])
            ok = 0
            lo_cur = obs_sum(kind, D, F, has_obs, tau)
            lo_new = obs_sum(kind, D, F, has_obs, tau_new)
            if lo_new > NEG_INF:
                r = (lo_new + halfcauchy_lp(tau_new, g_tau) + math.log(tau_new)) - (
                    lo_cur + halfcauchy_lp(tau, g_tau) + math.log(tau))
                if math.log(u_par[i, 2]) < r:
                    tau = tau_new
                    ok = 1
            if adapting:
                log_stau[0] += gain * (ok - 0.44)
            else:
                acc[6] += ok
                acc[7] += 1

        if not tau_fixed and n_obs > 0:
            s = math.exp(log_sgrp[0]) * z_par[i, 4]
            lam = math.exp(s)
            for k in range(Tp1):
                D_new[k] = F[k] + lam * (D[k] - F[k]) if has_obs[k] else D[k]
            tau_new = tau / (lam * lam)
            ok = 0
            lt_new = log_target(kind, D_new, F, has_obs, a, b, phi, tau_new, mu0, prec0)
            if lt_new > NEG_INF:
                lt_cur = log_target(kind, D, F, has_obs, a, b, phi, tau, mu0, prec0)
                r = (lt_new + halfcauchy_lp(tau_new, g_tau)) - (lt_cur + halfcauchy_lp(tau, g_tau)) + (n_obs - 2) * s
                if math.log(u_par[i, 3]) < r:
                    D[:] = D_new
                    tau = tau_new
                    ok = 1
            if adapting:
                log_sgrp[0] += gain * (ok - 0.44)
            else:
                acc[8] += ok
                acc[9] += 1

        if it >= n_adapt + n_burn and (it - n_adapt - n_burn) % thin == 0:
            out_theta[pos, 0] = a
            out_theta[pos, 1] = b
            out_theta[pos, 2] = phi
            out_theta[pos, 3] = tau
            out_D[pos, :] = D
            pos += 1

    theta[0], theta[1], theta[2], theta[3] = a, b, phi, tau
    return pos


@njit(cache=True)
def log_target(kind, D, F, has_obs, a, b, phi, tau, mu0, prec0):
    return (norm_lp(D[0], mu0, 1.0 / prec0) + proc_sum(kind, D, a, b, phi)
            + obs_sum(kind, D, F, has_obs, tau))


@njit(cache=True)
def forecast_paths(kind, d_last, theta, horizon, z_proc, z_obs, out):
    """Posterior-predictive observations; returns False if any path overflows."""
    for j in range(d_last.shape[0]):
        a, b, phi, tau = theta[j, 0], theta[j, 1], theta[j, 2], theta[j, 3]
        d = d_last[j]
        for h in range(horizon):
            m, v, ok = proc_mv(kind, d, a, b, phi)
            if not ok:
                return False
            d = m + math.sqrt(v) * z_proc[j, h]
            mo, vo = obs_mv(kind, d, tau)
            y = mo + math.sqrt(vo) * z_obs[j, h]
            if y > EXP_LIMIT:
                return False
            out[j, h] = math.exp(y)
    return True
