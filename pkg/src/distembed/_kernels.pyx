# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for SGD updates and rank-local walks.

The arithmetic order here is mirrored operation for operation by
``_kernels_py`` so both backends produce bit-identical results. Build with
FP contraction disabled (no fused multiply-add).
"""

from libc.math cimport exp
from libc.stdint cimport int64_t

DEF MAX_DOT = 35.0


cdef inline double _sigmoid_dot(const float[:, ::1] A, Py_ssize_t a,
                                const float[:, ::1] B, Py_ssize_t b, Py_ssize_t d) noexcept nogil:
    cdef double dot = 0.0
    cdef Py_ssize_t k
    for k in range(d):
        dot = dot + (<double>A[a, k]) * (<double>B[b, k])
    if dot > MAX_DOT:
        dot = MAX_DOT
    elif dot < -MAX_DOT:
        dot = -MAX_DOT
    return 1.0 / (1.0 + exp(-dot))


cdef inline void _local_update(float[:, ::1] U, Py_ssize_t u, float[:, ::1] C, Py_ssize_t v,
                               double g, double decay_f, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t k
    cdef double u0, c0
    for k in range(d):
        u0 = U[u, k]
        c0 = C[v, k]
        U[u, k] = <float>(u0 + g * c0 - decay_f * u0)
        C[v, k] = <float>(c0 + g * u0 - decay_f * c0)


def sgd_local_pass(float[:, ::1] U, float[:, ::1] C, Py_ssize_t lo, Py_ssize_t hi,
                   const int64_t[::1] us, const int64_t[::1] vs, const int64_t[::1] negs, int K,
                   double lr, double decay, double neg_weight,
                   int64_t[::1] rpos_u, int64_t[::1] rpos_v,
                   int64_t[::1] rneg_u, int64_t[::1] rneg_v):
    """Apply updates whose context row is owned; defer the rest.

    Returns ``(n_remote_pos, n_remote_neg, n_local)``.
    """
    cdef Py_ssize_t n = us.shape[0], d = U.shape[1]
    cdef Py_ssize_t i, j, u, v, w
    cdef Py_ssize_t npos = 0, nneg = 0, nloc = 0
    cdef double sig, g
    cdef double decay_f = lr * decay
    with nogil:
        for i in range(n):
            u = us[i] - lo
            v = vs[i]
            if lo <= v < hi:
                sig = _sigmoid_dot(U, u, C, v - lo, d)
                g = lr * (1.0 - sig)
                _local_update(U, u, C, v - lo, g, decay_f, d)
                nloc += 1
            else:
                rpos_u[npos] = us[i]
                rpos_v[npos] = v
                npos += 1
            for j in range(K):
                w = negs[i * K + j]
                if lo <= w < hi:
                    sig = _sigmoid_dot(U, u, C, w - lo, d)
                    g = -lr * neg_weight * sig
                    _local_update(U, u, C, w - lo, g, decay_f, d)
                    nloc += 1
                else:
                    rneg_u[nneg] = us[i]
                    rneg_v[nneg] = w
                    nneg += 1
    return npos, nneg, nloc


def sgd_remote_pass(float[:, ::1] U, Py_ssize_t lo, const int64_t[::1] ru, const int64_t[::1] rslot,
                    Py_ssize_t n_pos, const float[:, ::1] Z, double[:, ::1] delta,
                    double lr, double decay, double neg_weight):
    """Update owned U rows against fetched context snapshots ``Z``.

    The first ``n_pos`` records are positives, the rest negatives. ``Z`` is
    never written; the context-side change is accumulated into ``delta``.
    """
    cdef Py_ssize_t n = ru.shape[0], d = U.shape[1]
    cdef Py_ssize_t i, k, u, s
    cdef double sig, g, u0, z
    cdef double decay_f = lr * decay
    with nogil:
        for i in range(n):
            u = ru[i] - lo
            s = rslot[i]
            sig = _sigmoid_dot(U, u, Z, s, d)
            if i < n_pos:
                g = lr * (1.0 - sig)
            else:
                g = -lr * neg_weight * sig
            for k in range(d):
                u0 = U[u, k]
                z = Z[s, k]
                U[u, k] = <float>(u0 + g * z - decay_f * u0)
                delta[s, k] += g * u0 - decay_f * z


cdef inline Py_ssize_t _pick(const double[::1] cum, Py_ssize_t start, Py_ssize_t stop, double r) noexcept nogil:
    # first j in [start, stop) with cum[j] > r
    cdef Py_ssize_t a = start, b = stop, m
    while a < b:
        m = (a + b) >> 1
        if cum[m] > r:
            b = m
        else:
            a = m + 1
    if a >= stop:
        a = stop - 1
    return a


def walk_local(const int64_t[::1] row_offsets, const int64_t[::1] neighbors, const double[::1] row_cum,
               Py_ssize_t lo, Py_ssize_t hi, int64_t start, const double[::1] uniforms, int64_t[::1] out):
    """Weighted walk from owned ``start`` that stops at a remote or dead-end vertex.

    Takes at most ``len(uniforms)`` steps, consuming one uniform per step.
    The terminating remote vertex, if any, is included. Returns the path length.
    """
    cdef Py_ssize_t steps = uniforms.shape[0]
    cdef Py_ssize_t t, s, e, x, n = 1
    cdef double total
    cdef int64_t nxt
    out[0] = start
    with nogil:
        for t in range(steps):
            x = out[n - 1] - lo
            s = row_offsets[x]
            e = row_offsets[x + 1]
            if e == s:
                break
            total = row_cum[e - 1]
            if total <= 0.0:
                break
            nxt = neighbors[_pick(row_cum, s, e, uniforms[t] * total)]
            out[n] = nxt
            n += 1
            if nxt < lo or nxt >= hi:
                break
    return n
