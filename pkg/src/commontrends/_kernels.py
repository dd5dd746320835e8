"""Kalman filter and smoother recursions for a univariate observation.

These are the hot loops of the package: every likelihood evaluation during
maximum-likelihood fitting runs ``filter_kernel`` once. They are written in
the subset of numpy that numba compiles, with explicit loops where that keeps
the nopython code fast, and run unchanged as plain Python when the numpy
backend is selected (see ``_accel``).

Conventions: the state equation is ``x[t+1] = T x[t] + eta[t]`` and the
observation ``y[t] = Z . x[t] + eps[t]``; predicted moments at step ``t`` are
conditional on ``y[0..t-1]``. The transition is passed in CSR form to the
filter because structural models are very sparse. Diffuse states follow the
exact-diffuse recursion, carrying ``P = Pstar + kappa * Pinf`` until ``Pinf``
vanishes.
"""
import numpy as np

from ._accel import kernel

LOG2PI = 1.8378770664093453

F_FLOOR = 1e-12
DIFFUSE_TOL = 1e-8

REGULAR = 0
DIFFUSE_INFORMATIVE = 1
DIFFUSE_UNINFORMATIVE = 2


@kernel
def _sandwich(indptr, indices, data, P, Q, out, work):
    """out = T P T' + Q for CSR ``T`` and symmetric ``P``, ``Q``.

    Only the upper triangle is accumulated; the result is mirrored, which
    also keeps it exactly symmetric.
    """
    m = P.shape[0]
    for i in range(m):
        for j in range(m):
            work[i, j] = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            k = indices[p]
            t = data[p]
            for j in range(m):
                work[i, j] += t * P[k, j]
    for j in range(m):
        lo = indptr[j]
        hi = indptr[j + 1]
        for i in range(j + 1):
            s = Q[i, j]
            for p in range(lo, hi):
                s += data[p] * work[i, indices[p]]
            out[i, j] = s
            out[j, i] = s


@kernel
def _apply(indptr, indices, data, x, out):
    m = x.shape[0]
    for i in range(m):
        s = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            s += data[p] * x[indices[p]]
        out[i] = s


@kernel
def _matvec(P, z, out):
    m = z.shape[0]
    for i in range(m):
        s = 0.0
        for j in range(m):
            s += P[i, j] * z[j]
        out[i] = s


@kernel
def _dot(u, w):
    s = 0.0
    for i in range(u.shape[0]):
        s += u[i] * w[i]
    return s


@kernel
def filter_kernel(y, missing, indptr, indices, data, Z, Q, H, a1, Pstar1, Pinf1,
                  store, a_pred, P_pred, Pinf_pred, a_filt, P_filt,
                  v_out, F_out, Finf_out, kind_out, ll_out):
    """Run the exact-diffuse Kalman filter.

    When ``store`` is false the per-step moment arrays may have a leading
    dimension of 1; they are then used as scratch only. ``v_out``, ``F_out``,
    ``Finf_out``, ``kind_out`` and ``ll_out`` are always length ``n``.

    Returns ``(status, d)`` where ``status`` is -1 on success or the step at
    which the innovation variance became negative, and ``d`` is the number of
    steps in the diffuse period.
    """
    n = y.shape[0]
    m = Z.shape[0]
    zidx = np.nonzero(Z)[0]
    a = a1.copy()
    P = Pstar1.copy()
    Pinf = Pinf1.copy()
    af = np.empty(m)
    Pf = np.empty((m, m))
    Pinff = np.empty((m, m))
    M = np.empty(m)
    Minf = np.empty(m)
    work = np.empty((m, m))
    zero = np.zeros((m, m))

    diffuse = False
    for i in range(m):
        for j in range(m):
            if Pinf[i, j] != 0.0:
                diffuse = True
    d = 0

    for t in range(n):
        s = t if store else 0
        if store:
            for i in range(m):
                a_pred[s, i] = a[i]
                for j in range(m):
                    P_pred[s, i, j] = P[i, j]
                    Pinf_pred[s, i, j] = Pinf[i, j]
        ll_out[t] = 0.0
        v_out[t] = 0.0
        F_out[t] = 0.0
        Finf_out[t] = 0.0
        kind_out[t] = REGULAR
        if diffuse:
            d = t + 1

        if missing[t]:
            for i in range(m):
                af[i] = a[i]
                for j in range(m):
                    Pf[i, j] = P[i, j]
            if diffuse:
                kind_out[t] = DIFFUSE_UNINFORMATIVE
                for i in range(m):
                    for j in range(m):
                        Pinff[i, j] = Pinf[i, j]
        else:
            v = y[t]
            for k in zidx:
                v -= Z[k] * a[k]
            for i in range(m):
                acc = 0.0
                for k in zidx:
                    acc += P[i, k] * Z[k]
                M[i] = acc
            F = H
            scale = abs(H)
            for k in zidx:
                F += Z[k] * M[k]
                scale += abs(Z[k] * M[k])
            finf = 0.0
            if diffuse:
                for i in range(m):
                    acc = 0.0
                    for k in zidx:
                        acc += Pinf[i, k] * Z[k]
                    Minf[i] = acc
                for k in zidx:
                    finf += Z[k] * Minf[k]
            v_out[t] = v
            Finf_out[t] = finf

            if diffuse and finf > DIFFUSE_TOL:
                kind_out[t] = DIFFUSE_INFORMATIVE
                F_out[t] = F
                for i in range(m):
                    af[i] = a[i] + Minf[i] * v / finf
                c2 = F / (finf * finf)
                for i in range(m):
                    for j in range(i, m):
                        pf = (P[i, j] + Minf[i] * Minf[j] * c2
                              - (M[i] * Minf[j] + Minf[i] * M[j]) / finf)
                        Pf[i, j] = pf
                        Pf[j, i] = pf
                        pi = Pinf[i, j] - Minf[i] * Minf[j] / finf
                        Pinff[i, j] = pi
                        Pinff[j, i] = pi
            else:
                if not np.isfinite(F) or F < -1e-9 * scale:
                    return t, d
                if F < F_FLOOR:
                    F = F_FLOOR
                F_out[t] = F
                if diffuse:
                    kind_out[t] = DIFFUSE_UNINFORMATIVE
                    for i in range(m):
                        for j in range(m):
                            Pinff[i, j] = Pinf[i, j]
                g = v / F
                for i in range(m):
                    af[i] = a[i] + M[i] * g
                    mi = M[i] / F
                    for j in range(i, m):
                        pf = P[i, j] - mi * M[j]
                        Pf[i, j] = pf
                        Pf[j, i] = pf
                ll_out[t] = -0.5 * (LOG2PI + np.log(F) + v * g)

        if store:
            for i in range(m):
                a_filt[s, i] = af[i]
                for j in range(m):
                    P_filt[s, i, j] = Pf[i, j]

        _apply(indptr, indices, data, af, a)
        _sandwich(indptr, indices, data, Pf, Q, P, work)
        if diffuse:
            _sandwich(indptr, indices, data, Pinff, zero, Pinf, work)
            big = 0.0
            for i in range(m):
                for j in range(m):
                    if abs(Pinf[i, j]) > big:
                        big = abs(Pinf[i, j])
            if big <= DIFFUSE_TOL:
                diffuse = False
                for i in range(m):
                    for j in range(m):
                        Pinf[i, j] = 0.0
    return -1, d


@kernel
def smoother_kernel(T, Z, missing, d, a_pred, P_pred, Pinf_pred, v, F, Finf, kind,
                    alpha_hat, V_hat):
    """Fixed-interval smoother, including the exact-diffuse initial steps.

    Standard backward recursion for the non-diffuse steps and the exact
    initial smoothing recursions (``r0, r1, N0, N1, N2``) inside the diffuse
    period.
    """
    n = v.shape[0]
    m = Z.shape[0]
    Tt = T.T.copy()
    r = np.zeros(m)
    N = np.zeros((m, m))
    ZZ = np.outer(Z, Z)

    for t in range(n - 1, d - 1, -1):
        P = P_pred[t]
        if missing[t]:
            r = Tt @ r
            N = Tt @ N @ T
        else:
            M = P @ Z
            K = (T @ M) / F[t]
            L = T - np.outer(K, Z)
            r = Z * (v[t] / F[t]) + L.T @ r
            N = ZZ / F[t] + L.T @ N @ L
        N = 0.5 * (N + N.T)
        alpha_hat[t] = a_pred[t] + P @ r
        Vt = P - P @ N @ P
        V_hat[t] = 0.5 * (Vt + Vt.T)

    r0 = r.copy()
    r1 = np.zeros(m)
    N0 = N.copy()
    N1 = np.zeros((m, m))
    N2 = np.zeros((m, m))
    for t in range(d - 1, -1, -1):
        Ps = P_pred[t]
        Pi = Pinf_pred[t]
        if missing[t]:
            r0 = Tt @ r0
            r1 = Tt @ r1
            N0 = Tt @ N0 @ T
            N1 = Tt @ N1 @ T
            N2 = Tt @ N2 @ T
        elif kind[t] == DIFFUSE_INFORMATIVE:
            Ms = Ps @ Z
            Mi = Pi @ Z
            fi = Finf[t]
            K0 = (T @ Mi) / fi
            K1 = (T @ Ms) / fi - K0 * (F[t] / fi)
            L0 = T - np.outer(K0, Z)
            L1 = -np.outer(K1, Z)
            L0t = L0.T.copy()
            L1t = L1.T.copy()
            r1n = Z * (v[t] / fi) + L0t @ r1 + L1t @ r0
            r0n = L0t @ r0
            N2n = (ZZ * (-F[t] / (fi * fi)) + L0t @ N2 @ L0 + L0t @ N1 @ L1
                   + L1t @ N1.T.copy() @ L0 + L1t @ N0 @ L1)
            N1n = ZZ / fi + L0t @ N1 @ L0 + L1t @ N0 @ L0 + L0t @ N0 @ L1
            N0n = L0t @ N0 @ L0
            r0 = r0n
            r1 = r1n
            N0 = N0n
            N1 = N1n
            N2 = N2n
        else:
            Ms = Ps @ Z
            K0 = (T @ Ms) / F[t]
            L0 = T - np.outer(K0, Z)
            L0t = L0.T.copy()
            r0 = Z * (v[t] / F[t]) + L0t @ r0
            r1 = Tt @ r1
            N0 = ZZ / F[t] + L0t @ N0 @ L0
            N1 = Tt @ N1 @ L0
            N2 = Tt @ N2 @ T
        alpha_hat[t] = a_pred[t] + Ps @ r0 + Pi @ r1
        PN1P = Pi @ N1 @ Ps
        Vt = Ps - Ps @ N0 @ Ps - PN1P.T - PN1P - Pi @ N2 @ Pi
        V_hat[t] = 0.5 * (Vt + Vt.T)
