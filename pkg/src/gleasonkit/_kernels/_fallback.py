"""Pure NumPy implementations of the hot kernels.

Signatures mirror the compiled ``_ckernels`` module exactly; callers go
through :mod:`gleasonkit._kernels` which picks one at import time.
"""
import math

import numpy as np


def cox_accumulate(time, event, X, eta, efron):
    """Partial log-likelihood, gradient and hessian of a Cox model.

    ``time`` must be sorted ascending; ``eta`` is the linear predictor.
    Ties are handled by Efron's correction when ``efron`` is true, else Breslow.
    Returns ``(loglik, grad, hess)`` where ``hess`` is the (negative
    semi-definite) second derivative.
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    X = np.asarray(X, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    n, p = X.shape
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    loglik = 0.0
    if n == 0:
        return loglik, grad, hess

    eta = eta - eta.max()
    r = np.exp(eta)
    rx = r[:, None] * X
    rxx = rx[:, :, None] * X[:, None, :]

    s_risk = 0.0
    z_risk = np.zeros(p)
    w_risk = np.zeros((p, p))
    i = n - 1
    while i >= 0:
        j = i
        while j > 0 and time[j - 1] == time[i]:
            j -= 1
        block = slice(j, i + 1)
        s_risk += r[block].sum()
        z_risk += rx[block].sum(axis=0)
        w_risk += rxx[block].sum(axis=0)

        dead = event[block] != 0
        d = int(dead.sum())
        if d:
            idx = np.arange(j, i + 1)[dead]
            s_dead = r[idx].sum()
            z_dead = rx[idx].sum(axis=0)
            w_dead = rxx[idx].sum(axis=0)
            loglik += eta[idx].sum()
            grad += X[idx].sum(axis=0)
            for l in range(d):
                f = l / d if efron else 0.0
                phi = s_risk - f * s_dead
                zl = z_risk - f * z_dead
                wl = w_risk - f * w_dead
                loglik -= math.log(phi)
                grad -= zl / phi
                hess -= wl / phi - np.outer(zl, zl) / (phi * phi)
        i = j - 1
    return loglik, grad, hess


def _segment_hits_rect(ax, ay, bx, by, x0, y0, x1, y1):
    # Liang-Barsky clipping against the closed rectangle.
    dx = bx - ax
    dy = by - ay
    t0, t1 = 0.0, 1.0
    for pp, qq in ((-dx, ax - x0), (dx, x1 - ax), (-dy, ay - y0), (dy, y1 - ay)):
        if pp == 0.0:
            if qq < 0.0:
                return False
        else:
            t = qq / pp
            if pp < 0.0:
                if t > t0:
                    t0 = t
            elif t < t1:
                t1 = t
            if t0 > t1:
                return False
    return True


def _point_in_polygon(x, y, px, py):
    inside = False
    n = len(px)
    j = n - 1
    for i in range(n):
        yi, yj = py[i], py[j]
        if (yi > y) != (yj > y):
            xc = px[i] + (y - yi) * (px[j] - px[i]) / (yj - yi)
            if x < xc:
                inside = not inside
        j = i
    return inside


def rects_intersect_polygon(rects, px, py):
    """Closed-set intersection test of many axis-aligned rectangles with one polygon.

    ``rects`` is an ``(m, 4)`` array of ``x0, y0, x1, y1``. Boundary contact
    counts as intersecting. Returns a boolean array of length ``m``.
    """
    rects = np.asarray(rects, dtype=np.float64).reshape(-1, 4)
    px = [float(v) for v in px]
    py = [float(v) for v in py]
    n = len(px)
    bx0, bx1, by0, by1 = min(px), max(px), min(py), max(py)
    out = np.zeros(len(rects), dtype=bool)
    for k, (x0, y0, x1, y1) in enumerate(rects.tolist()):
        if x1 < bx0 or x0 > bx1 or y1 < by0 or y0 > by1:
            continue
        hit = False
        j = n - 1
        for i in range(n):
            if _segment_hits_rect(px[j], py[j], px[i], py[i], x0, y0, x1, y1):
                hit = True
                break
            j = i
        if not hit:
            # no boundary contact: either the rect is strictly inside or disjoint
            hit = _point_in_polygon(x0, y0, px, py)
        out[k] = hit
    return out
