"""Compiled per-path integrators for the tilt SDE and the reflection coupling.

Kernels draw normals on demand from the path's own ``numpy.random.Generator``
(numba reproduces numpy's streams exactly). A call may be given a step budget,
after which it returns 1 so the caller can record the state and resume. State
lives in small arrays mutated in place, so pausing never changes the path.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# acc slots for the tilt kernel
T, INT_TRACE, QV, INT_ADA, M_PREV = 0, 1, 2, 3, 4
# status slots for the tilt kernel
TERMINAL, CK, POS, STEPS = 0, 1, 2, 3

DONE, NEED_NOISE = 0, 1
_EPS_T = 1e-9


@njit(cache=True, error_model="numpy")
def moments(logw, X, Xpos, phi, w, p, a, d):
    """Tilted weights ``p``, mean ``a``, diagonal covariance ``d``; returns (trace, max diag, E phi).

    An empty ``phi`` gives ``E phi = 0``.
    """
    m, n = X.shape
    top = -np.inf
    for j in range(m):
        s = logw[j]
        for i in range(n):
            s += w[i] * X[j, i]
        p[j] = s
        if s > top:
            top = s
    tot = 0.0
    for j in range(m):
        e = np.exp(p[j] - top)
        p[j] = e
        tot += e
    inv = 1.0 / tot
    for i in range(n):
        a[i] = 0.0
    has_phi = phi.shape[0] > 0
    mphi = 0.0
    for j in range(m):
        q = p[j] * inv
        p[j] = q
        if has_phi:
            mphi += q * phi[j]
        for i in range(n):
            a[i] += q * Xpos[j, i]
    tr = 0.0
    worst = 0.0
    for i in range(n):
        pp = a[i]
        if pp > 1.0:
            pp = 1.0
        di = 4.0 * pp * (1.0 - pp)
        d[i] = di
        tr += di
        if di > worst:
            worst = di
        a[i] = 2.0 * pp - 1.0
    return tr, worst, mphi


@njit(cache=True, error_model="numpy")
def trace_ada(X, p, a, d):
    """``Tr(A diag(A)^-1 A)`` over coordinates that are not pinned."""
    m, n = X.shape
    out = 0.0
    for i in range(n):
        if d[i] <= 1e-300:
            continue
        for k in range(n):
            if k == i:
                out += d[i]
                continue
            s = 0.0
            for j in range(m):
                s += p[j] * X[j, i] * X[j, k]
            aik = s - a[i] * a[k]
            out += aik * aik / d[i]
    return out


@njit(cache=True, error_model="numpy")
def _sign_index(a):
    idx = 0
    for i in range(a.shape[0]):
        if a[i] > 0:
            idx |= 1 << i
    return idx


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _stats(XT, phi, p, a, d):
    """Mean, diagonal covariance, trace, max diagonal and ``E phi`` from normalized ``p``.

    ``XT`` is the transposed 0/1 bit table, so every inner loop runs over
    contiguous memory with a register accumulator. An empty ``phi`` skips ``E phi``.
    """
    n, m = XT.shape
    mphi = 0.0
    for j in range(phi.shape[0]):
        mphi += p[j] * phi[j]
    tr = 0.0
    worst = 0.0
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += p[j] * XT[i, j]
        pp = min(s, 1.0)
        di = 4.0 * pp * (1.0 - pp)
        d[i] = di
        tr += di
        worst = max(worst, di)
        a[i] = 2.0 * pp - 1.0
    return tr, worst, mphi


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _reweight(XT, p, dw):
    """``p <- p * exp(<dw, x>)`` renormalized.

    Up to the constant ``exp(-sum dw)``, which normalization removes, the
    factor is ``exp(2 dw_i)`` on each set bit.
    """
    n, m = XT.shape
    for i in range(n):
        g = np.expm1(2.0 * dw[i])
        for j in range(m):
            p[j] *= 1.0 + XT[i, j] * g
    tot = 0.0
    for j in range(m):
        tot += p[j]
    inv = 1.0 / tot
    for j in range(m):
        p[j] *= inv


REFRESH = 256


@njit(cache=True, error_model="numpy")
def tilt_advance(
    logw, X, Xpos, XT, phi, w, acc, status, rng, budget,
    dt, max_dt, adaptive, coarsen, t_end, tol, stop_on_collapse,
    ck_times, ck_w, ck_acc, compute_ada, p, a, d,
):
    """Euler-Maruyama for ``dw = dB + a(w) dt`` on one path.

    Each step draws ``coarsen`` rows of ``n`` normals and uses their
    normalized sum, so a run at step ``c * dt`` with ``coarsen = c`` sees the same
    Brownian path as a run at step ``dt`` with ``coarsen = 1``. A negative
    ``budget`` means no limit on the number of steps in this call. Tilted weights
    are updated multiplicatively (``XT`` is ``Xpos`` transposed) and recomputed from scratch every
    ``REFRESH`` steps, so ``p`` must persist between calls for one path.
    """
    n = w.shape[0]
    K = ck_times.shape[0]
    scale = 1.0 / np.sqrt(coarsen)
    dw = np.empty(n)
    f = np.empty(n)
    t = acc[T]
    int_trace = acc[INT_TRACE]
    qv = acc[QV]
    int_ada = acc[INT_ADA]
    m_prev = acc[M_PREV]
    ck = status[CK]
    pos = status[POS]
    steps = status[STEPS]
    code = DONE
    h_last = -1.0
    sq = 0.0
    since = steps % REFRESH
    while True:
        if since == 0:
            moments(logw, X, Xpos, phi, w, p, a, d)
        tr, worst, mphi = _stats(XT, phi, p, a, d)
        dm = mphi - m_prev
        qv += dm * dm
        m_prev = mphi
        while ck < K and ck_times[ck] <= t + _EPS_T:
            for i in range(n):
                ck_w[ck, i] = w[i]
            ck_acc[ck, 0] = int_trace
            ck_acc[ck, 1] = qv
            ck_acc[ck, 2] = int_ada
            ck += 1
        if worst < tol and status[TERMINAL] < 0:
            status[TERMINAL] = _sign_index(a)
            if stop_on_collapse:
                break
        if t >= t_end - _EPS_T:
            break
        if budget >= 0 and pos >= budget:
            code = NEED_NOISE
            break
        h = dt
        if adaptive and tr < 1.0:
            h = dt / tr if tr > dt / max_dt else max_dt
        if ck < K and t + h > ck_times[ck] + _EPS_T:
            h = ck_times[ck] - t
        if t + h > t_end + _EPS_T:
            h = t_end - t
        if compute_ada:
            int_ada += trace_ada(X, p, a, d) * h
        int_trace += tr * h
        if h != h_last:
            sq = np.sqrt(h) * scale
            h_last = h
        if coarsen == 1:
            for i in range(n):
                dw[i] = sq * rng.standard_normal() + a[i] * h
                w[i] += dw[i]
        else:
            for i in range(n):
                f[i] = 0.0
            for r in range(coarsen):
                for i in range(n):
                    f[i] += rng.standard_normal()
            for i in range(n):
                dw[i] = sq * f[i] + a[i] * h
                w[i] += dw[i]
        _reweight(XT, p, dw)
        pos += 1
        steps += 1
        since = since + 1 if since + 1 < REFRESH else 0
        t += h
    acc[T] = t
    acc[INT_TRACE] = int_trace
    acc[QV] = qv
    acc[INT_ADA] = int_ada
    acc[M_PREV] = m_prev
    status[CK] = ck
    status[POS] = pos
    status[STEPS] = steps
    return code


# coupling kernel slots
C_T, C_QV_Y, C_QV_TIME, C_MAX_EXCESS, C_TAU = 0, 1, 2, 3, 4
C_COUPLED, C_CK, C_POS, C_STEPS, C_REFLECTIONS, C_TERM_W, C_TERM_U = 0, 1, 2, 3, 4, 5, 6


@njit(cache=True, error_model="numpy")
def coupling_advance(
    logw, X, Xpos, w, u, acc, status, rng, unif_rng, budget,
    dt, max_dt, adaptive, t_end, tol, collapse_tol, beta, bridge, run_to_collapse,
    ck_times, ck_y, p, a_w, a_u, d,
):
    """Reflection coupling of two copies of the tilt SDE on one path.

    Before coupling the ``u`` copy receives the ``w`` noise reflected across
    the axis ``w - u``. Coupling is declared when the discrete step crosses
    that axis, when ``|u - w| <= tol``, or (``bridge``) with the Brownian-bridge
    probability of a crossing inside the step. Afterwards ``u`` follows ``w``.
    Each step consumes ``n`` normals from ``rng`` and one uniform from
    ``unif_rng``.
    """
    n = w.shape[0]
    K = ck_times.shape[0]
    zero_phi = np.zeros(X.shape[0])
    e = np.empty(n)
    dB = np.empty(n)
    while True:
        tr_w, worst_w, _ = moments(logw, X, Xpos, zero_phi, w, p, a_w, d)
        if status[C_COUPLED]:
            for i in range(n):
                a_u[i] = a_w[i]
            tr_u, worst_u = tr_w, worst_w
        else:
            tr_u, worst_u, _ = moments(logw, X, Xpos, zero_phi, u, p, a_u, d)
        t = acc[C_T]
        y = 0.0
        for i in range(n):
            y += (u[i] - w[i]) ** 2
        y = np.sqrt(y)
        if not status[C_COUPLED]:
            da = 0.0
            for i in range(n):
                da += (a_u[i] - a_w[i]) ** 2
            excess = np.sqrt(da) - beta * y
            if excess > acc[C_MAX_EXCESS]:
                acc[C_MAX_EXCESS] = excess
        while status[C_CK] < K and ck_times[status[C_CK]] <= t + _EPS_T:
            ck_y[status[C_CK]] = y
            status[C_CK] += 1
        if worst_w < collapse_tol and status[C_TERM_W] < 0:
            status[C_TERM_W] = _sign_index(a_w)
        if worst_u < collapse_tol and status[C_TERM_U] < 0:
            status[C_TERM_U] = _sign_index(a_u)
        if t >= t_end - _EPS_T:
            return DONE
        if run_to_collapse and status[C_TERM_W] >= 0 and status[C_TERM_U] >= 0:
            return DONE
        if budget >= 0 and status[C_POS] >= budget:
            return NEED_NOISE
        h = dt
        tr = max(tr_w, tr_u)
        if adaptive and tr < 1.0:
            h = dt / tr if tr > dt / max_dt else max_dt
        if status[C_CK] < K and t + h > ck_times[status[C_CK]] + _EPS_T:
            h = ck_times[status[C_CK]] - t
        if t + h > t_end + _EPS_T:
            h = t_end - t
        sq = np.sqrt(h)
        pos = status[C_POS]
        for i in range(n):
            dB[i] = sq * rng.standard_normal()
        uv = unif_rng.random()
        if status[C_COUPLED]:
            for i in range(n):
                w[i] += dB[i] + a_w[i] * h
                u[i] = w[i]
        else:
            proj = 0.0
            for i in range(n):
                e[i] = (w[i] - u[i]) / y
                proj += e[i] * dB[i]
            new_y2 = 0.0
            signed = 0.0
            for i in range(n):
                wi = w[i] + dB[i] + a_w[i] * h
                ui = u[i] + dB[i] - 2.0 * e[i] * proj + a_u[i] * h
                w[i] = wi
                u[i] = ui
                new_y2 += (ui - wi) ** 2
                signed += (ui - wi) * (-e[i])
            status[C_REFLECTIONS] += 1
            new_y = np.sqrt(new_y2)
            acc[C_QV_Y] += (new_y - y) ** 2
            acc[C_QV_TIME] += h
            hit = signed <= 0.0 or new_y <= tol
            if not hit and bridge:
                # Y has diffusion coefficient 2, so a bridge of length h
                # between y and the new signed distance crosses zero with
                # probability exp(-y * y' / (2 h))
                if uv < np.exp(-y * signed / (2.0 * h)):
                    hit = True
            if hit:
                status[C_COUPLED] = 1
                acc[C_TAU] = t + h
                for i in range(n):
                    u[i] = w[i]
        status[C_POS] = pos + 1
        status[C_STEPS] += 1
        acc[C_T] = t + h


@njit(cache=True, error_model="numpy")
def tilt_batch(
    logw, X, Xpos, XT, phi, v0, m0, gens, count, first,
    dt, max_dt, adaptive, coarsen, t_end, tol, stop_on_collapse,
    ck_times, ck_w, ck_acc, compute_ada,
    terminal, final_t, final_w, int_trace, qv, int_ada, steps, ck_count,
):
    """Run paths ``first + k`` for ``k < count`` to completion, path ``first + k`` drawing from ``gens[k]``.

    Each path is exactly the path ``tilt_advance`` produces without a budget;
    per-path results are written into the batch arrays at row ``first + k``.
    """
    n = v0.shape[0]
    p = np.empty(logw.shape[0])
    a = np.empty(n)
    d = np.empty(n)
    w = np.empty(n)
    acc = np.empty(5)
    status = np.empty(4, dtype=np.int64)
    for k in range(count):
        path = first + k
        for i in range(n):
            w[i] = v0[i]
        acc[:] = 0.0
        acc[M_PREV] = m0
        status[TERMINAL] = -1
        status[CK] = 0
        status[POS] = 0
        status[STEPS] = 0
        tilt_advance(
            logw, X, Xpos, XT, phi, w, acc, status, gens[k], -1,
            dt, max_dt, adaptive, coarsen, t_end, tol, stop_on_collapse,
            ck_times, ck_w[path], ck_acc[path], compute_ada, p, a, d,
        )
        terminal[path] = status[TERMINAL]
        final_t[path] = acc[T]
        for i in range(n):
            final_w[path, i] = w[i]
        int_trace[path] = acc[INT_TRACE]
        qv[path] = acc[QV]
        int_ada[path] = acc[INT_ADA]
        steps[path] = status[STEPS]
        ck_count[path] = status[CK]
