"""Compiled inner loops. Kept free of Python objects so numba can run them
without the GIL; callers in ``chain`` and ``engine`` handle validation."""
from __future__ import annotations

import numba
import numpy as np

BLOWUP = 1e15


@numba.njit(cache=True, nogil=True)
def next_state(cum, state, u):
    row = cum[state]
    n = row.shape[0]
    j = 0
    while j < n - 1 and u >= row[j]:
        j += 1
    return j


@numba.njit(cache=True, nogil=True)
def sample_path(cum, state, uniforms, out):
    """Fill ``out`` with the states following ``state``; returns the last one."""
    for k in range(uniforms.shape[0]):
        state = next_state(cum, state, uniforms[k])
        out[k] = state
    return state


@numba.njit(cache=True, nogil=True)
def ttsa_chunk(
    mats, offs, alpha_beta, dx, z, state, cum, uniforms, t_start,
    record_every, n_steps, tail_start, tail_sum,
    rec_t, rec_z, rec_xi, rec_tail, rec_pos,
):
    """Advance one replica by ``uniforms.shape[0]`` steps of the raw recursion.

    ``mats[s]`` is the full per-state operator ``J + W(s)`` and ``offs[s]`` is
    ``b + u(s)``; the update is ``z -= step * (mats[s] @ z + offs[s])`` where
    ``step`` is alpha on the first ``dx`` coordinates and beta on the rest.
    ``z`` is the iterate at time ``t_start`` and ``state`` the chain state at
    that time. Returns ``(state, rec_pos, diverged_at)`` with ``diverged_at``
    equal to -1 when every iterate stayed below the blow-up threshold.
    """
    d = z.shape[0]
    tmp = np.empty(d)
    t = t_start
    for k in range(uniforms.shape[0]):
        m = mats[state]
        o = offs[state]
        for i in range(d):
            acc = o[i]
            for j in range(d):
                acc += m[i, j] * z[j]
            tmp[i] = acc
        bad = False
        for i in range(d):
            step = alpha_beta[0] if i < dx else alpha_beta[1]
            z[i] = z[i] - step * tmp[i]
            if not abs(z[i]) <= BLOWUP:
                bad = True
        t += 1
        state = next_state(cum, state, uniforms[k])
        if tail_start >= 0 and t >= tail_start:
            for i in range(d):
                tail_sum[i] += z[i]
        if bad:
            return state, rec_pos, t
        if t % record_every == 0 or t == n_steps:
            rec_t[rec_pos] = t
            rec_xi[rec_pos] = state
            for i in range(d):
                rec_z[rec_pos, i] = z[i]
            if tail_start >= 0 and t >= tail_start:
                cnt = t - tail_start + 1
                for i in range(d):
                    rec_tail[rec_pos, i] = tail_sum[i] / cnt
            rec_pos += 1
    return state, rec_pos, -1
