"""Pure-Python twin of ``_kernels.pyx``.

Every floating-point operation happens in the same order as the compiled
version: products are formed in double precision and summed left to right
(``np.cumsum`` is strictly sequential), the sigmoid goes through ``math.exp``
(libm, like the C code), and stores round back to float32.
"""

import math

import numpy as np

MAX_DOT = 35.0


def _sigmoid_dot(a: np.ndarray, b: np.ndarray) -> float:
    prod = a.astype(np.float64) * b.astype(np.float64)
    dot = float(np.cumsum(prod)[-1]) if len(prod) else 0.0
    if dot > MAX_DOT:
        dot = MAX_DOT
    elif dot < -MAX_DOT:
        dot = -MAX_DOT
    return 1.0 / (1.0 + math.exp(-dot))


def _local_update(U, u, C, v, g, decay_f):
    u0 = U[u].astype(np.float64)
    c0 = C[v].astype(np.float64)
    U[u] = (u0 + g * c0 - decay_f * u0).astype(np.float32)
    C[v] = (c0 + g * u0 - decay_f * c0).astype(np.float32)


def sgd_local_pass(U, C, lo, hi, us, vs, negs, K, lr, decay, neg_weight,
                   rpos_u, rpos_v, rneg_u, rneg_v):
    npos = nneg = nloc = 0
    decay_f = lr * decay
    us, vs, negs = us.tolist(), vs.tolist(), negs.tolist()
    for i in range(len(us)):
        u = us[i] - lo
        v = vs[i]
        if lo <= v < hi:
            sig = _sigmoid_dot(U[u], C[v - lo])
            g = lr * (1.0 - sig)
            _local_update(U, u, C, v - lo, g, decay_f)
            nloc += 1
        else:
            rpos_u[npos] = us[i]
            rpos_v[npos] = v
            npos += 1
        for j in range(K):
            w = negs[i * K + j]
            if lo <= w < hi:
                sig = _sigmoid_dot(U[u], C[w - lo])
                g = -lr * neg_weight * sig
                _local_update(U, u, C, w - lo, g, decay_f)
                nloc += 1
            else:
                rneg_u[nneg] = us[i]
                rneg_v[nneg] = w
                nneg += 1
    return npos, nneg, nloc


def sgd_remote_pass(U, lo, ru, rslot, n_pos, Z, delta, lr, decay, neg_weight):
    decay_f = lr * decay
    ru, rslot = ru.tolist(), rslot.tolist()
    for i in range(len(ru)):
        u = ru[i] - lo
        s = rslot[i]
        sig = _sigmoid_dot(U[u], Z[s])
        if i < n_pos:
            g = lr * (1.0 - sig)
        else:
            g = -lr * neg_weight * sig
        u0 = U[u].astype(np.float64)
        z = Z[s].astype(np.float64)
        U[u] = (u0 + g * z - decay_f * u0).astype(np.float32)
        delta[s] += g * u0 - decay_f * z


def walk_local(row_offsets, neighbors, row_cum, lo, hi, start, uniforms, out):
    out[0] = start
    n = 1
    for t in range(len(uniforms)):
        x = int(out[n - 1]) - lo
        s, e = int(row_offsets[x]), int(row_offsets[x + 1])
        if e == s:
            break
        total = row_cum[e - 1]
        if total <= 0.0:
            break
        j = s + int(np.searchsorted(row_cum[s:e], uniforms[t] * total, side="right"))
        nxt = int(neighbors[min(j, e - 1)])
        out[n] = nxt
        n += 1
        if nxt < lo or nxt >= hi:
            break
    return n
