# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_fallback.py`` for the reference."""
import numpy as np

from libc.math cimport exp, log


def cox_accumulate(time, event, X, eta, bint efron):
    cdef double[::1] t = np.ascontiguousarray(time, dtype=np.float64)
    cdef long long[::1] ev = np.ascontiguousarray(event, dtype=np.int64)
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] e = np.ascontiguousarray(eta, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t p = x.shape[1]

    grad_arr = np.zeros(p)
    hess_arr = np.zeros((p, p))
    cdef double[::1] grad = grad_arr
    cdef double[:, ::1] hess = hess_arr
    cdef double loglik = 0.0
    if n == 0:
        return loglik, grad_arr, hess_arr

    cdef double[::1] r = np.empty(n)
    cdef double emax = e[0]
    cdef Py_ssize_t i, j, k, a, b, l, d
    for i in range(n):
        if e[i] > emax:
            emax = e[i]
    for i in range(n):
        r[i] = exp(e[i] - emax)

    cdef double s_risk = 0.0, s_dead, phi, f, ri
    cdef double[::1] z_risk = np.zeros(p)
    cdef double[::1] z_dead = np.zeros(p)
    cdef double[::1] zl = np.zeros(p)
    cdef double[:, ::1] w_risk = np.zeros((p, p))
    cdef double[:, ::1] w_dead = np.zeros((p, p))

    i = n - 1
    while i >= 0:
        j = i
        while j > 0 and t[j - 1] == t[i]:
            j -= 1
        d = 0
        s_dead = 0.0
        for a in range(p):
            z_dead[a] = 0.0
            for b in range(p):
                w_dead[a, b] = 0.0
        for k in range(j, i + 1):
            ri = r[k]
            s_risk += ri
            for a in range(p):
                z_risk[a] += ri * x[k, a]
                for b in range(p):
                    w_risk[a, b] += ri * x[k, a] * x[k, b]
            if ev[k] != 0:
                d += 1
                s_dead += ri
                loglik += e[k] - emax
                for a in range(p):
                    grad[a] += x[k, a]
                    z_dead[a] += ri * x[k, a]
                    for b in range(p):
                        w_dead[a, b] += ri * x[k, a] * x[k, b]
        for l in range(d):
            f = (<double>l) / d if efron else 0.0
            phi = s_risk - f * s_dead
            loglik -= log(phi)
            for a in range(p):
                zl[a] = z_risk[a] - f * z_dead[a]
                grad[a] -= zl[a] / phi
            for a in range(p):
                for b in range(p):
                    hess[a, b] -= (w_risk[a, b] - f * w_dead[a, b]) / phi - zl[a] * zl[b] / (phi * phi)
        i = j - 1
    # the max shift cancels: each death adds -emax to eta and +emax via -log(phi)
    return loglik, grad_arr, hess_arr


cdef inline bint _segment_hits_rect(double ax, double ay, double bx, double by,
                                    double x0, double y0, double x1, double y1):
    cdef double dx = bx - ax, dy = by - ay
    cdef double t0 = 0.0, t1 = 1.0, t
    cdef double pp[4]
    cdef double qq[4]
    cdef int m
    pp[0] = -dx; qq[0] = ax - x0
    pp[1] = dx;  qq[1] = x1 - ax
    pp[2] = -dy; qq[2] = ay - y0
    pp[3] = dy;  qq[3] = y1 - ay
    for m in range(4):
        if pp[m] == 0.0:
            if qq[m] < 0.0:
                return False
        else:
            t = qq[m] / pp[m]
            if pp[m] < 0.0:
                if t > t0:
                    t0 = t
            elif t < t1:
                t1 = t
            if t0 > t1:
                return False
    return True


cdef bint _point_in_polygon(double x, double y, double[::1] px, double[::1] py):
    cdef bint inside = False
    cdef Py_ssize_t n = px.shape[0], i, j = n - 1
    cdef double xc
    for i in range(n):
        if (py[i] > y) != (py[j] > y):
            xc = px[i] + (y - py[i]) * (px[j] - px[i]) / (py[j] - py[i])
            if x < xc:
                inside = not inside
        j = i
    return inside


def rects_intersect_polygon(rects, px, py):
    cdef double[:, ::1] rc = np.ascontiguousarray(rects, dtype=np.float64).reshape(-1, 4)
    cdef double[::1] vx = np.ascontiguousarray(px, dtype=np.float64)
    cdef double[::1] vy = np.ascontiguousarray(py, dtype=np.float64)
    cdef Py_ssize_t m = rc.shape[0], n = vx.shape[0], k, i, j
    out_arr = np.zeros(m, dtype=bool)
    cdef unsigned char[::1] out = out_arr.view(np.uint8)
    cdef double bx0 = vx[0], bx1 = vx[0], by0 = vy[0], by1 = vy[0]
    cdef double x0, y0, x1, y1
    cdef bint hit
    for i in range(n):
        if vx[i] < bx0: bx0 = vx[i]
        if vx[i] > bx1: bx1 = vx[i]
        if vy[i] < by0: by0 = vy[i]
        if vy[i] > by1: by1 = vy[i]
    for k in range(m):
        x0 = rc[k, 0]; y0 = rc[k, 1]; x1 = rc[k, 2]; y1 = rc[k, 3]
        if x1 < bx0 or x0 > bx1 or y1 < by0 or y0 > by1:
            continue
        hit = False
        j = n - 1
        for i in range(n):
            if _segment_hits_rect(vx[j], vy[j], vx[i], vy[i], x0, y0, x1, y1):
                hit = True
                break
            j = i
        if not hit:
            hit = _point_in_polygon(x0, y0, vx, vy)
        out[k] = hit
    return out_arr
