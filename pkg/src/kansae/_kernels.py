"""Piecewise-polynomial spline kernels for the training hot path.

Knots are frozen after calibration, so each basis function restricted to one
knot interval is a fixed degree-p polynomial in the local coordinate
u = (t - xi_s) / (xi_{s+1} - xi_s). ``basis_poly`` tabulates those polynomials
once per bank (from the de Boor reference in ``spline.local_basis``); per batch
the control points collapse them into one polynomial per latent and interval,
and the per-token work is a span lookup plus Horner evaluation.
"""

import numba as nb
import numpy as np


def basis_poly(knots: np.ndarray, p: int):
    """Monomial coefficients of every nonzero basis function on every interval.

    Returns ``(Bp, inv_w)`` with ``Bp[j, s, r, q]`` the u**q coefficient of
    ``B_{s+r}`` on interval ``s`` of latent j (intervals counted from t_lo) and
    ``inv_w[j, s]`` the reciprocal interval width.
    """
    from .spline import local_basis

    M, L = knots.shape
    K = L - p - 1
    S = K - p
    u = (np.arange(p + 1) + 0.5) / (p + 1)
    V = u[:, None] ** np.arange(p + 1)[None, :]
    Vinv = np.linalg.inv(V)
    lo = knots[:, p : p + S]
    w = knots[:, p + 1 : p + S + 1] - lo
    # sample points, shaped (p+1, M*S) so every column is one (latent, interval)
    t = (lo[None, :, :] + u[:, None, None] * w[None, :, :]).reshape(p + 1, M * S)
    rep = np.repeat(knots, S, axis=0)
    span, N, _ = local_basis(rep, t, p)
    vals = np.stack(N, axis=-1)  # (p+1 samples, M*S, p+1 local basis)
    # guard: sample points must fall inside their own interval
    expected = np.tile(np.arange(S) + p, M)
    assert np.all(span == expected[None, :])
    Bp = np.einsum("qm,mcr->crq", Vinv, vals).reshape(M, S, p + 1, p + 1)
    return np.ascontiguousarray(Bp), np.ascontiguousarray(1.0 / w)


def phi_poly(control: np.ndarray, Bp: np.ndarray) -> np.ndarray:
    """Coefficients of phi_j on each interval: P[j, s, q]."""
    M, S, p1, _ = Bp.shape
    win = np.lib.stride_tricks.sliding_window_view(control, p1, axis=1)  # (M, S, p+1)
    return np.ascontiguousarray(np.einsum("jsr,jsrq->jsq", win, Bp))


def control_grad_from_poly(gP: np.ndarray, Bp: np.ndarray, K: int) -> np.ndarray:
    M, S, p1, _ = Bp.shape
    contrib = np.einsum("jsq,jsrq->jsr", gP, Bp)
    gc = np.zeros((M, K))
    for r in range(p1):
        gc[:, r : r + S] += contrib[:, :, r]
    return gc


@nb.njit(cache=True, inline="always")
def _locate(knots, j, p, S, t):
    """Clamped t, interval index s (0-based from t_lo) and whether t was inside.

    The first guess assumes equal intervals; the two scans correct it against
    the actual knots, so any valid knot vector gives the exact interval.
    """
    lo = knots[j, p]
    hi = knots[j, p + S]
    tc = min(max(t, lo), hi)
    s = int((tc - lo) / (hi - lo) * S)
    if s > S - 1:
        s = S - 1
    while s > 0 and tc < knots[j, p + s]:
        s -= 1
    while s < S - 1 and tc >= knots[j, p + s + 1]:
        s += 1
    return tc, s, lo <= t <= hi


@nb.njit(cache=True)
def poly_forward(knots, P, inv_w, h, p, want_deriv):
    """z[i, j] = phi_j(h[i, j]) and, if requested, dphi_j/dh (zero outside the span)."""
    n, M = h.shape
    S = P.shape[1]
    z = np.empty((n, M))
    dphi = np.zeros((n, M)) if want_deriv else np.zeros((0, 0))
    for i in range(n):
        for j in range(M):
            tc, s, inside = _locate(knots, j, p, S, h[i, j])
            u = (tc - knots[j, p + s]) * inv_w[j, s]
            if p == 3:
                z[i, j] = ((P[j, s, 3] * u + P[j, s, 2]) * u + P[j, s, 1]) * u + P[j, s, 0]
                if want_deriv and inside:
                    dphi[i, j] = ((3.0 * P[j, s, 3] * u + 2.0 * P[j, s, 2]) * u + P[j, s, 1]) * inv_w[j, s]
                continue
            acc = P[j, s, p]
            for q in range(p - 1, -1, -1):
                acc = acc * u + P[j, s, q]
            z[i, j] = acc
            if want_deriv and inside and p > 0:
                d = p * P[j, s, p]
                for q in range(p - 1, 0, -1):
                    d = d * u + q * P[j, s, q]
                dphi[i, j] = d * inv_w[j, s]
    return z, dphi


@nb.njit(cache=True)
def poly_grad(knots, inv_w, h, g_z, p, S):
    """gP[j, s, q] = sum_i g_z[i, j] * u_ij**q over tokens landing in interval s."""
    n, M = h.shape
    gP = np.zeros((M, S, p + 1))
    for i in range(n):
        for j in range(M):
            g = g_z[i, j]
            if g == 0.0:
                continue
            tc, s, _ = _locate(knots, j, p, S, h[i, j])
            u = (tc - knots[j, p + s]) * inv_w[j, s]
            if p == 3:
                gu = g * u
                gu2 = gu * u
                gP[j, s, 0] += g
                gP[j, s, 1] += gu
                gP[j, s, 2] += gu2
                gP[j, s, 3] += gu2 * u
                continue
            pw = g
            for q in range(p + 1):
                gP[j, s, q] += pw
                pw *= u
    return gP
