"""Numerical hot kernels with two interchangeable backends.

The training inner loops (margin-softmax forward/backward over
batch x negatives x dim, BPR, and sparse Adam row updates) dominate
runtime, so each kernel exists twice: a numba ``@njit`` loop version and a
vectorized pure-numpy version. ``BCREC_BACKEND`` selects one:

    BCREC_BACKEND=numba   require numba (error if unavailable)
    BCREC_BACKEND=numpy   force the pure-numpy path
    BCREC_BACKEND=auto    numba when importable, else numpy (default)

Both backends are exercised by the test suite and compared by
``benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

import math
import os

import numpy as np

# Cosines are clamped to +/-(1 - 1e-7) inside the arccos-derivative chain;
# beyond that the derivative of cos(arccos(c) + M) diverges.
_GUARD_COS = 1.0 - 1e-7
_SIN_FLOOR = math.sqrt(1.0 - _GUARD_COS * _GUARD_COS)


# ---------------------------------------------------------------------------
# pure-numpy backend
# ---------------------------------------------------------------------------

def margin_softmax_numpy(u, p, n, ncnt, margins, weights, tau):
    """Forward + backward of the margin softmax over one batch.

    u, p: (B, d) user / positive-item vectors. n: (B, J, d) padded negative
    vectors with ncnt valid entries per row. margins: (B,) additive angular
    margins on the positive pair; a margin of exactly 0.0 short-circuits to
    the plain cosine logit (no arccos round-trip). weights: (B,) per-row
    loss weights. Returns (loss, grad_u, grad_p, grad_n) with grad_n zeroed
    in the padding.
    """
    jmax = n.shape[1]
    nu = np.sqrt(np.einsum("bd,bd->b", u, u))
    npn = np.sqrt(np.einsum("bd,bd->b", p, p))
    uh = u / nu[:, None]
    ph = p / npn[:, None]
    c_pos = np.clip(np.einsum("bd,bd->b", uh, ph), -1.0, 1.0)

    mask = np.arange(jmax)[None, :] < ncnt[:, None]
    nn = np.sqrt(np.einsum("bjd,bjd->bj", n, n))
    nn_safe = np.where(mask, nn, 1.0)
    nh = n / nn_safe[:, :, None]
    c_neg = np.clip(np.einsum("bd,bjd->bj", uh, nh), -1.0, 1.0)

    zero_m = margins == 0.0
    theta = np.arccos(c_pos)
    ang = np.minimum(theta + margins, np.pi)
    pos_cos = np.where(zero_m, c_pos, np.cos(ang))
    chain = np.where(zero_m, 1.0, np.sin(ang) / np.maximum(np.sin(theta), _SIN_FLOOR))

    z_pos = pos_cos / tau
    z_neg = np.where(mask, c_neg / tau, -np.inf)
    zmax = np.maximum(z_pos, np.max(z_neg, axis=1, initial=-np.inf))
    e_pos = np.exp(z_pos - zmax)
    e_neg = np.where(mask, np.exp(z_neg - zmax[:, None]), 0.0)
    denom = e_pos + e_neg.sum(axis=1)
    loss = float(np.dot(weights, np.log(denom) - (z_pos - zmax)))

    a_pos = weights * (e_pos / denom - 1.0) * chain / tau
    a_neg = weights[:, None] * (e_neg / denom[:, None]) / tau

    gu = a_pos[:, None] * (ph - c_pos[:, None] * uh)
    gu += np.einsum("bj,bjd->bd", a_neg, nh)
    gu -= np.einsum("bj,bj->b", a_neg, c_neg)[:, None] * uh
    gu /= nu[:, None]
    gp = a_pos[:, None] * (uh - c_pos[:, None] * ph) / npn[:, None]
    gn = a_neg[:, :, None] * (uh[:, None, :] - c_neg[:, :, None] * nh) / nn_safe[:, :, None]
    return loss, gu, gp, gn


def bpr_numpy(u, p, n1, weights):
    """Forward + backward of pairwise log-sigmoid ranking on cosine scores.

    u, p, n1: (B, d) user / positive / single-negative vectors.
    Returns (loss, grad_u, grad_p, grad_n).
    """
    nu = np.sqrt(np.einsum("bd,bd->b", u, u))
    npn = np.sqrt(np.einsum("bd,bd->b", p, p))
    nn = np.sqrt(np.einsum("bd,bd->b", n1, n1))
    uh = u / nu[:, None]
    ph = p / npn[:, None]
    nh = n1 / nn[:, None]
    s_pos = np.clip(np.einsum("bd,bd->b", uh, ph), -1.0, 1.0)
    s_neg = np.clip(np.einsum("bd,bd->b", uh, nh), -1.0, 1.0)
    x = s_pos - s_neg
    # softplus(-x), stable on both tails
    row_loss = np.where(x > 0, np.log1p(np.exp(-np.abs(x))), -x + np.log1p(np.exp(-np.abs(x))))
    loss = float(np.dot(weights, row_loss))

    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    a = weights * (sig - 1.0)
    gu = a[:, None] * ((ph - s_pos[:, None] * uh) - (nh - s_neg[:, None] * uh)) / nu[:, None]
    gp = a[:, None] * (uh - s_pos[:, None] * ph) / npn[:, None]
    gn = -a[:, None] * (uh - s_neg[:, None] * nh) / nn[:, None]
    return loss, gu, gp, gn


def adam_rows_numpy(param, m, v, rows, grads, lr, beta1, beta2, eps, t):
    """Bias-corrected Adam applied in place to the given (unique) rows."""
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    mr = beta1 * m[rows] + (1.0 - beta1) * grads
    vr = beta2 * v[rows] + (1.0 - beta2) * (grads * grads)
    m[rows] = mr
    v[rows] = vr
    param[rows] -= lr * (mr / bc1) / (np.sqrt(vr / bc2) + eps)


# ---------------------------------------------------------------------------
# numba loop backend
# ---------------------------------------------------------------------------

def _margin_softmax_loops(u, p, n, ncnt, margins, weights, tau):
    B, d = u.shape
    jmax = n.shape[1]
    gu = np.zeros((B, d))
    gp = np.zeros((B, d))
    gn = np.zeros((B, jmax, d))
    c_neg = np.empty(jmax)
    loss = 0.0
    for b in range(B):
        nu = 0.0
        npn = 0.0
        dot = 0.0
        for k in range(d):
            nu += u[b, k] * u[b, k]
            npn += p[b, k] * p[b, k]
            dot += u[b, k] * p[b, k]
        nu = math.sqrt(nu)
        npn = math.sqrt(npn)
        c_pos = dot / (nu * npn)
        if c_pos > 1.0:
            c_pos = 1.0
        elif c_pos < -1.0:
            c_pos = -1.0

        mb = margins[b]
        if mb == 0.0:
            pos_cos = c_pos
            chain = 1.0
        else:
            theta = math.acos(c_pos)
            ang = theta + mb
            if ang > math.pi:
                ang = math.pi
            pos_cos = math.cos(ang)
            s = math.sin(theta)
            if s < _SIN_FLOOR:
                s = _SIN_FLOOR
            chain = math.sin(ang) / s

        cnt = ncnt[b]
        z_pos = pos_cos / tau
        zmax = z_pos
        for j in range(cnt):
            nn = 0.0
            dn = 0.0
            for k in range(d):
                nn += n[b, j, k] * n[b, j, k]
                dn += u[b, k] * n[b, j, k]
            nn = math.sqrt(nn)
            c = dn / (nu * nn)
            if c > 1.0:
                c = 1.0
            elif c < -1.0:
                c = -1.0
            c_neg[j] = c
            if c / tau > zmax:
                zmax = c / tau

        e_pos = math.exp(z_pos - zmax)
        denom = e_pos
        for j in range(cnt):
            denom += math.exp(c_neg[j] / tau - zmax)
        w = weights[b]
        loss += w * (math.log(denom) - (z_pos - zmax))

        a_pos = w * (e_pos / denom - 1.0) * chain / tau
        for k in range(d):
            gu[b, k] += a_pos * (p[b, k] / npn - c_pos * u[b, k] / nu) / nu
            gp[b, k] = a_pos * (u[b, k] / nu - c_pos * p[b, k] / npn) / npn
        for j in range(cnt):
            nn = 0.0
            for k in range(d):
                nn += n[b, j, k] * n[b, j, k]
            nn = math.sqrt(nn)
            c = c_neg[j]
            a = w * (math.exp(c / tau - zmax) / denom) / tau
            for k in range(d):
                gu[b, k] += a * (n[b, j, k] / nn - c * u[b, k] / nu) / nu
                gn[b, j, k] = a * (u[b, k] / nu - c * n[b, j, k] / nn) / nn
    return loss, gu, gp, gn


def _bpr_loops(u, p, n1, weights):
    B, d = u.shape
    gu = np.zeros((B, d))
    gp = np.zeros((B, d))
    gn = np.zeros((B, d))
    loss = 0.0
    for b in range(B):
        nu = 0.0
        npn = 0.0
        nn = 0.0
        dp = 0.0
        dn = 0.0
        for k in range(d):
            nu += u[b, k] * u[b, k]
            npn += p[b, k] * p[b, k]
            nn += n1[b, k] * n1[b, k]
            dp += u[b, k] * p[b, k]
            dn += u[b, k] * n1[b, k]
        nu = math.sqrt(nu)
        npn = math.sqrt(npn)
        nn = math.sqrt(nn)
        s_pos = dp / (nu * npn)
        s_neg = dn / (nu * nn)
        if s_pos > 1.0:
            s_pos = 1.0
        elif s_pos < -1.0:
            s_pos = -1.0
        if s_neg > 1.0:
            s_neg = 1.0
        elif s_neg < -1.0:
            s_neg = -1.0
        x = s_pos - s_neg
        ax = abs(x)
        if x > 0:
            row = math.log1p(math.exp(-ax))
            sig = 1.0 / (1.0 + math.exp(-ax))
        else:
            row = -x + math.log1p(math.exp(-ax))
            sig = math.exp(-ax) / (1.0 + math.exp(-ax))
        w = weights[b]
        loss += w * row
        a = w * (sig - 1.0)
        for k in range(d):
            gu[b, k] = a * ((p[b, k] / npn - s_pos * u[b, k] / nu)
                            - (n1[b, k] / nn - s_neg * u[b, k] / nu)) / nu
            gp[b, k] = a * (u[b, k] / nu - s_pos * p[b, k] / npn) / npn
            gn[b, k] = -a * (u[b, k] / nu - s_neg * n1[b, k] / nn) / nn
    return loss, gu, gp, gn


def _adam_rows_loops(param, m, v, rows, grads, lr, beta1, beta2, eps, t):
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    d = param.shape[1]
    for idx in range(rows.shape[0]):
        r = rows[idx]
        for k in range(d):
            g = grads[idx, k]
            mr = beta1 * m[r, k] + (1.0 - beta1) * g
            vr = beta2 * v[r, k] + (1.0 - beta2) * g * g
            m[r, k] = mr
            v[r, k] = vr
            param[r, k] -= lr * (mr / bc1) / (math.sqrt(vr / bc2) + eps)


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_requested = os.environ.get("BCREC_BACKEND", "auto").lower()
if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"BCREC_BACKEND must be auto, numba, or numpy (got {_requested!r})")

margin_softmax_numba = None
bpr_numba = None
adam_rows_numba = None

if _requested in ("auto", "numba"):
    try:
        from numba import njit
    except ImportError:
        if _requested == "numba":
            raise
    else:
        _jit = njit(cache=True, fastmath=False)
        margin_softmax_numba = _jit(_margin_softmax_loops)
        bpr_numba = _jit(_bpr_loops)
        adam_rows_numba = _jit(_adam_rows_loops)

if margin_softmax_numba is not None:
    BACKEND = "numba"
    margin_softmax = margin_softmax_numba
    bpr = bpr_numba
    adam_rows = adam_rows_numba
else:
    BACKEND = "numpy"
    margin_softmax = margin_softmax_numpy
    bpr = bpr_numpy
    adam_rows = adam_rows_numpy


def set_num_threads(n: int) -> None:
    """Set numba's thread count; a no-op on the numpy backend."""
    if BACKEND == "numba":
        import numba

        numba.set_num_threads(max(1, n))
