"""Fused attention kernels.

Each (i, j) pair's coefficient logit and its table lookups are evaluated in
one inner-loop body; the streaming kernels keep only per-query accumulators
(numerator of width d, denominator and running max per head) and never touch
an N x N buffer.  Table tensors are packed (sum of lengths, heads, d) with
per-channel row offsets.
"""

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, fastmath=False)


@njit(**_JIT)
def _fill_table_rows(sig, i, j, quat, minquat, lengths, offsets, rows):
    m = sig.shape[1]
    for l in range(m):
        delta = sig[i, l] - sig[j, l]
        t = (delta - minquat[l]) * lengths[l] / quat[l]
        idx = int(math.floor(t))
        if idx < 0:
            idx = 0
        elif idx >= lengths[l]:
            idx = lengths[l] - 1
        rows[l] = offsets[l] + idx


@njit(**_JIT)
def _pair_logit(q, k, tq_tab, tk_tab, rows, i, j, h, inv_sqrt_d):
    d = q.shape[2]
    m = rows.shape[0]
    acc = 0.0
    for c in range(d):
        acc += q[i, h, c] * k[j, h, c]
    for l in range(m):
        row = rows[l]
        for c in range(d):
            acc += q[i, h, c] * tk_tab[row, h, c]
            acc += k[j, h, c] * tq_tab[row, h, c]
    return acc * inv_sqrt_d


@njit(**_JIT)
def fill_logits(q, k, sig, tq_tab, tk_tab, quat, minquat, lengths, offsets, inv_sqrt_d, coeff):
    """Vanilla pass 1: materialize every coefficient logit into ``coeff``."""
    n = q.shape[0]
    nh = q.shape[1]
    rows = np.empty(sig.shape[1], dtype=np.int64)
    for i in range(n):
        for j in range(n):
            _fill_table_rows(sig, i, j, quat, minquat, lengths, offsets, rows)
            for h in range(nh):
                coeff[i, j, h] = _pair_logit(q, k, tq_tab, tk_tab, rows, i, j, h, inv_sqrt_d)


@njit(**_JIT)
def vanilla_output(alpha, v, sig, tv_tab, quat, minquat, lengths, offsets, out):
    """Vanilla pass 2: weighted sum of value rows plus their table offsets."""
    n = v.shape[0]
    nh = v.shape[1]
    d = v.shape[2]
    m = sig.shape[1]
    rows = np.empty(m, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            _fill_table_rows(sig, i, j, quat, minquat, lengths, offsets, rows)
            for h in range(nh):
                a = alpha[i, j, h]
                for c in range(d):
                    out[i, h, c] += a * v[j, h, c]
                for l in range(m):
                    row = rows[l]
                    for c in range(d):
                        out[i, h, c] += a * tv_tab[row, h, c]


@njit(**_JIT)
def stream_forward(
    q, k, v, sig, tq_tab, tk_tab, tv_tab, quat, minquat, lengths, offsets,
    inv_sqrt_d, out, rowmax, rowden,
):
    """Per query: one pass over keys for the row max, one accumulating pass."""
    n = q.shape[0]
    nh = q.shape[1]
    d = q.shape[2]
    m = sig.shape[1]
    rows = np.empty(m, dtype=np.int64)
    for i in range(n):
        for h in range(nh):
            rowmax[i, h] = -math.inf
        for j in range(n):
            _fill_table_rows(sig, i, j, quat, minquat, lengths, offsets, rows)
            for h in range(nh):
                e = _pair_logit(q, k, tq_tab, tk_tab, rows, i, j, h, inv_sqrt_d)
                if e > rowmax[i, h]:
                    rowmax[i, h] = e
        for h in range(nh):
            rowden[i, h] = 0.0
        for j in range(n):
            _fill_table_rows(sig, i, j, quat, minquat, lengths, offsets, rows)
            for h in range(nh):
                e = _pair_logit(q, k, tq_tab, tk_tab, rows, i, j, h, inv_sqrt_d)
                w = math.exp(e - rowmax[i, h])
                rowden[i, h] += w
                for c in range(d):
                    out[i, h, c] += w * v[j, h, c]
                for l in range(m):
                    row = rows[l]
                    for c in range(d):
                        out[i, h, c] += w * tv_tab[row, h, c]
        for h in range(nh):
            for c in range(d):
                out[i, h, c] /= rowden[i, h]


@njit(**_JIT)
def stream_backward(
    q, k, v, sig, tq_tab, tk_tab, tv_tab, quat, minquat, lengths, offsets,
    inv_sqrt_d, rowmax, rowden, out, g,
    dq, dk, dv, dtq_tab, dtk_tab, dtv_tab,
):
    """Recompute each exp(e) once from the stored per-row (max, denominator)."""
    n = q.shape[0]
    nh = q.shape[1]
    d = q.shape[2]
    m = sig.shape[1]
    rows = np.empty(m, dtype=np.int64)
    sih = np.empty(nh, dtype=np.float64)
    for i in range(n):
        for h in range(nh):
            acc = 0.0
            for c in range(d):
                acc += g[i, h, c] * out[i, h, c]
            sih[h] = acc
        for j in range(n):
            _fill_table_rows(sig, i, j, quat, minquat, lengths, offsets, rows)
            for h in range(nh):
                e = _pair_logit(q, k, tq_tab, tk_tab, rows, i, j, h, inv_sqrt_d)
                a = math.exp(e - rowmax[i, h]) / rowden[i, h]
                gw = 0.0
                for c in range(d):
                    gw += g[i, h, c] * v[j, h, c]
                for l in range(m):
                    row = rows[l]
                    for c in range(d):
                        gw += g[i, h, c] * tv_tab[row, h, c]
                de = a * (gw - sih[h]) * inv_sqrt_d
                for c in range(d):
                    dq[i, h, c] += de * k[j, h, c]
                    dk[j, h, c] += de * q[i, h, c]
                    dv[j, h, c] += a * g[i, h, c]
                for l in range(m):
                    row = rows[l]
                    for c in range(d):
                        dq[i, h, c] += de * tk_tab[row, h, c]
                        dk[j, h, c] += de * tq_tab[row, h, c]
                        dtk_tab[row, h, c] += de * q[i, h, c]
                        dtq_tab[row, h, c] += de * k[j, h, c]
                        dtv_tab[row, h, c] += a * g[i, h, c]


@njit(**_JIT)
def vanilla_backward(
    alpha, q, k, v, sig, tq_tab, tk_tab, tv_tab, quat, minquat, lengths, offsets,
    inv_sqrt_d, out, g,
    dq, dk, dv, dtq_tab, dtk_tab, dtv_tab,
):
    """Same gradient algebra as the streaming kernel, coefficients read back."""
    n = q.shape[0]
    nh = q.shape[1]
    d = q.shape[2]
    m = sig.shape[1]
    rows = np.empty(m, dtype=np.int64)
    sih = np.empty(nh, dtype=np.float64)
    for i in range(n):
        for h in range(nh):
            acc = 0.0
            for c in range(d):
                acc += g[i, h, c] * out[i, h, c]
            sih[h] = acc
        for j in range(n):
            _fill_table_rows(sig, i, j, quat, minquat, lengths, offsets, rows)
            for h in range(nh):
                a = alpha[i, j, h]
                gw = 0.0
                for c in range(d):
                    gw += g[i, h, c] * v[j, h, c]
                for l in range(m):
                    row = rows[l]
                    for c in range(d):
                        gw += g[i, h, c] * tv_tab[row, h, c]
                de = a * (gw - sih[h]) * inv_sqrt_d
                for c in range(d):
                    dq[i, h, c] += de * k[j, h, c]
                    dk[j, h, c] += de * q[i, h, c]
                    dv[j, h, c] += a * g[i, h, c]
                for l in range(m):
                    row = rows[l]
                    for c in range(d):
                        dq[i, h, c] += de * tk_tab[row, h, c]
                        dk[j, h, c] += de * tq_tab[row, h, c]
                        dtk_tab[row, h, c] += de * q[i, h, c]
                        dtq_tab[row, h, c] += de * k[j, h, c]
                        dtv_tab[row, h, c] += a * g[i, h, c]
