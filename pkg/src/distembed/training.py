"""Owner-computes LINE (second-order) training over a simulated world.

Each rank keeps vertex rows ``U`` and context rows ``C`` for the vertices it
owns. Per batch, updates whose context vertex is owned are applied right
away. Updates touching a remote context row are replayed against a copy of
that row fetched once per batch; what they would have done to it is summed
into a delta that the owner adds to its row after the batch.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from ._kernels_py import MAX_DOT, _sigmoid_dot
from .graph import GlobalGraph, PartitionMap, build_local_partition
from .sampling import PairSampler, WalkConfig
from .transport import Endpoint, ProtocolError, run_world

EMBED_MAGIC = b"NME1"
EMBED_VERSION = 1
_U64 = np.iinfo(np.uint64).max


@dataclass
class Hyperparams:
    dim: int = 128
    lr: float = 0.025
    weight_decay: float = 1e-4
    negatives: int = 1
    exponent: float = 0.75
    neg_weight: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if not 0 <= self.exponent <= 1:
            raise ValueError("exponent must lie in [0, 1]")
        # zero is allowed: it turns negative updates into pure decay steps
        if self.neg_weight < 0:
            raise ValueError("neg_weight must be >= 0")


@dataclass
class EmbeddingStore:
    """Rows for the owned vertices ``[lo, lo + len(U))``."""

    lo: int
    U: np.ndarray
    C: np.ndarray

    @property
    def dim(self) -> int:
        return self.U.shape[1]

    @property
    def hi(self) -> int:
        return self.lo + len(self.U)

    def check_finite(self) -> None:
        for name, m in (("U", self.U), ("C", self.C)):
            bad = np.flatnonzero(~np.isfinite(m).all(axis=1))
            if len(bad):
                raise FloatingPointError(f"non-finite {name} row for vertex {self.lo + int(bad[0])}")


def rank_streams(seed: int, rank: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Walk and negative-sampling generators private to ``rank``."""
    bits = np.random.Philox(key=np.array([seed & _U64, rank + 1], dtype=np.uint64))
    return np.random.Generator(bits), np.random.Generator(bits.jumped())


def init_embeddings(lo: int, hi: int, dim: int, seed: int) -> EmbeddingStore:
    """U uniform in ``[-0.5/dim, 0.5/dim)``, C zero.

    Row ``v`` is drawn from its own offset in one seed-wide stream, so the
    values do not depend on how vertices are split across ranks.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    stride = math.ceil(dim / 4)
    bits = np.random.Philox(key=np.array([seed & _U64, 0], dtype=np.uint64))
    bits.advance(lo * stride)
    raw = np.random.Generator(bits).random((hi - lo) * stride * 4).reshape(hi - lo, stride * 4)
    U = ((raw[:, :dim] - 0.5) / dim).astype(np.float32)
    return EmbeddingStore(lo, U, np.zeros((hi - lo, dim), dtype=np.float32))


def sigmoid_dot(u_row, c_row) -> float:
    """sigma(<u, c>) with the dot product clamped to +-35."""
    u_row, c_row = np.asarray(u_row), np.asarray(c_row)
    if u_row.shape != c_row.shape:
        raise ValueError(f"row shapes differ: {u_row.shape} vs {c_row.shape}")
    return _sigmoid_dot(u_row, c_row)


def line_update(u_row: np.ndarray, c_row: np.ndarray, g: float, lr: float, decay: float,
                mode: str = "local"):
    """One SGD step on a (vertex, context) pair; ``g`` already carries sign and lr.

    ``local`` updates both rows in place, each from the other's old value,
    and returns them. ``remote`` updates ``u_row`` in place and returns the
    delta for the context row, leaving ``c_row`` untouched.
    """
    if mode not in ("local", "remote"):
        raise ValueError(f"unknown update mode {mode!r}")
    if not (np.isfinite(u_row).all() and np.isfinite(c_row).all() and math.isfinite(g)):
        raise FloatingPointError("non-finite input to line_update")
    decay_f = lr * decay
    u0 = u_row.astype(np.float64)
    c0 = c_row.astype(np.float64)
    u_row[:] = u0 + g * c0 - decay_f * u0
    if mode == "local":
        c_row[:] = c0 + g * u0 - decay_f * c0
        return u_row, c_row
    return u_row, g * u0 - decay_f * c0


class NegativeSampler:
    """Alias-method draws from ``q(v)`` proportional to ``degree(v) ** exponent``."""

    def __init__(self, degrees, exponent: float = 0.75):
        deg = np.asarray(degrees, dtype=np.float64)
        w = np.where(deg > 0, deg ** exponent, 0.0)
        total = w.sum()
        if not total > 0:
            raise ValueError("negative sampler needs at least one vertex with positive degree")
        self.probabilities = w / total
        self.support = np.flatnonzero(w > 0)
        self.prob, self.alias = _alias_table(self.probabilities[self.support])

    @property
    def num_vertices(self) -> int:
        return len(self.probabilities)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        col = rng.integers(0, len(self.support), size)
        coin = rng.random(size)
        pick = np.where(coin < self.prob[col], col, self.alias[col])
        return self.support[pick]

    def sample_k(self, rng: np.random.Generator, k: int) -> np.ndarray:
        return self.sample(rng, k)


def _alias_table(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Vose's method
    n = len(p)
    scaled = p * n
    prob = np.ones(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = scaled[g] + scaled[s] - 1.0
        (small if scaled[g] < 1.0 else large).append(g)
    return prob, alias


def _row_records(dim: int) -> np.dtype:
    return np.dtype([("v", np.int64), ("row", np.float64, (dim,))])


def train_batch(pairs: np.ndarray, store: EmbeddingStore, sampler: NegativeSampler,
                ep: Endpoint, pmap: PartitionMap, hp: Hyperparams,
                rng: np.random.Generator) -> dict:
    """One owner-computes batch: two all-to-all exchanges, whatever the input."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    lo, hi = store.lo, store.hi
    us, vs = np.ascontiguousarray(pairs[:, 0]), np.ascontiguousarray(pairs[:, 1])
    if len(us) and ((us < lo) | (us >= hi)).any():
        raise ProtocolError(f"rank {ep.rank} got a pair whose first vertex it does not own")
    K = hp.negatives
    n = len(us)
    negs = sampler.sample(rng, n * K)
    rpos_u, rpos_v = np.empty(n, np.int64), np.empty(n, np.int64)
    rneg_u, rneg_v = np.empty(n * K, np.int64), np.empty(n * K, np.int64)
    npos, nneg, nloc = kernels.sgd_local_pass(
        store.U, store.C, lo, hi, us, vs, negs, K, hp.lr, hp.weight_decay, hp.neg_weight,
        rpos_u, rpos_v, rneg_u, rneg_v)

    ru = np.concatenate([rpos_u[:npos], rneg_u[:nneg]])
    rv = np.concatenate([rpos_v[:npos], rneg_v[:nneg]])
    wanted = np.unique(rv)
    rslot = np.searchsorted(wanted, rv).astype(np.int64)
    owners = pmap.owner(wanted) if len(wanted) else np.empty(0, np.int64)
    requests = [wanted[owners == d] for d in range(ep.size)]
    dt = _row_records(store.dim)

    def serve(src, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) and ((ids < lo) | (ids >= hi)).any():
            raise ProtocolError(f"rank {ep.rank} asked by {src} for rows it does not own")
        out = np.empty(len(ids), dtype=dt)
        out["v"] = ids
        out["row"] = store.C[ids - lo]
        return out

    replies = ep.all_to_all_fetch(requests, serve)
    for d, rep in enumerate(replies):
        if len(rep) != len(requests[d]) or not np.array_equal(rep["v"], requests[d]):
            raise ProtocolError(f"rank {ep.rank} got rows from {d} it did not request")
    Z = np.concatenate([r["row"] for r in replies]).astype(np.float32) if len(wanted) \
        else np.empty((0, store.dim), np.float32)
    Z = np.ascontiguousarray(Z)
    delta = np.zeros((len(wanted), store.dim), dtype=np.float64)
    kernels.sgd_remote_pass(store.U, lo, ru, rslot, npos, Z, delta, hp.lr, hp.weight_decay,
                            hp.neg_weight)

    outgoing = []
    for d in range(ep.size):
        sel = owners == d
        rec = np.empty(int(sel.sum()), dtype=dt)
        rec["v"] = wanted[sel]
        rec["row"] = delta[sel]
        outgoing.append(rec)
    incoming = ep.all_to_all_v(outgoing)
    for src, rec in enumerate(incoming):
        if not len(rec):
            continue
        ids = rec["v"]
        if ((ids < lo) | (ids >= hi)).any():
            raise ProtocolError(f"rank {ep.rank} got a delta from {src} for a row it does not own")
        rows = ids - lo
        store.C[rows] = (store.C[rows].astype(np.float64) + rec["row"]).astype(np.float32)
    store.check_finite()
    return {
        "pairs": n,
        "local_updates": int(nloc),
        "remote_positive": int(npos),
        "remote_negative": int(nneg),
        "fetched_rows": int(len(wanted)),
    }


@dataclass
class RankOutput:
    rank: int
    store: EmbeddingStore
    batch_stats: list = field(default_factory=list)
    sample_counts: list = field(default_factory=list)
    pre_prune_counts: list = field(default_factory=list)
    walks_invoked: int = 0
    trace: list = field(default_factory=list)
    cpu_seconds: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    pmap: PartitionMap
    outputs: list
    counters: list
    transcripts: list

    @property
    def stores(self) -> list:
        return [o.store for o in self.outputs]

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Full ``U`` and ``C`` in dense-id order."""
        return (np.concatenate([s.U for s in self.stores]),
                np.concatenate([s.C for s in self.stores]))


class _CpuClock:
    # thread CPU time, so waiting for other simulated ranks is not charged
    def __init__(self):
        self.totals: dict[str, float] = {}

    def charge(self, phase: str, since: float) -> float:
        now = time.thread_time()
        self.totals[phase] = self.totals.get(phase, 0.0) + now - since
        return now


def batches_per_epoch(graph: GlobalGraph, p: int, batch_size: int) -> int:
    """Batches for one pass over the edges when every rank trains ``batch_size`` pairs."""
    return max(1, math.ceil(graph.num_edges / (p * batch_size)))


def train(graph: GlobalGraph, pmap: PartitionMap, walk: WalkConfig, hp: Hyperparams,
          seed: int = 0, schedule: str = "deterministic", pair_trace: list | None = None,
          record_trace: bool = False) -> TrainResult:
    """Run the full sample-then-train loop on ``pmap.num_ranks`` simulated ranks.

    ``pair_trace[rank][b]`` replaces the walk sampler with fixed batches.
    """
    p = pmap.num_ranks
    if pmap.num_vertices != graph.num_vertices:
        raise ValueError("partition map does not cover the graph")
    if pair_trace is not None and len(pair_trace) != p:
        raise ValueError(f"pair trace needs one entry per rank ({p})")

    def program(rank: int, ep: Endpoint) -> RankOutput:
        clock = _CpuClock()
        t = time.thread_time()
        part = build_local_partition(graph, pmap, rank)
        with ep.in_phase("setup"):
            targets = part.neighbor_ranks()
            everyone = ep.all_gather(targets)
            ep.set_neighbors([r for r in range(p) if rank in everyone[r]], targets)
            degrees = np.concatenate(ep.all_gather(np.diff(part.row_offsets)))
        negatives = NegativeSampler(degrees, hp.exponent)
        walk_rng, neg_rng = rank_streams(seed, rank)
        store = init_embeddings(part.lo, part.hi, hp.dim, seed)
        out = RankOutput(rank, store)
        sampler = PairSampler(part, ep, walk, walk_rng)
        t = clock.charge("setup", t)

        if pair_trace is not None:
            batches = [np.asarray(b, dtype=np.int64).reshape(-1, 2) for b in pair_trace[rank]]
        else:
            batches = None
            if walk.variant.augmented and walk.num_batches > 0:
                with ep.in_phase("presample"):
                    sampler.prepare()
                t = clock.charge("sampling", t)
        n_batches = len(batches) if batches is not None else walk.num_batches

        for b in range(n_batches):
            with ep.in_phase("sampling"):
                pairs = batches[b] if batches is not None else sampler.next_batch()
            t = clock.charge("sampling", t)
            out.sample_counts.append(len(pairs))
            if record_trace:
                out.trace.append(pairs.copy())
            with ep.in_phase("training"):
                out.batch_stats.append(train_batch(pairs, store, negatives, ep, pmap, hp, neg_rng))
            t = clock.charge("training", t)

        out.pre_prune_counts = list(sampler.pre_prune_counts)
        out.walks_invoked = sampler.walks_invoked
        out.cpu_seconds = clock.totals
        return out

    world = run_world(p, program, seed=seed, schedule=schedule)
    return TrainResult(pmap, list(world.results), world.counters, world.transcripts)


# --- export -----------------------------------------------------------------

def write_embeddings_text(path, ids, U: np.ndarray) -> None:
    """One line per vertex: original id followed by its vector."""
    with open(path, "w") as f:
        for orig, row in zip(ids, U):
            f.write(str(orig) + " " + " ".join(repr(float(x)) for x in row) + "\n")


def write_embeddings_binary(path, ids, U: np.ndarray) -> None:
    """``NME1``, then u64 version, |V|, d, the original ids (u64), then float32 rows."""
    U = np.ascontiguousarray(U, dtype="<f4")
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(struct.pack("<QQQ", EMBED_VERSION, U.shape[0], U.shape[1]))
        f.write(np.asarray(ids, dtype="<u8").tobytes())
        f.write(U.tobytes())


def read_embeddings_binary(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != EMBED_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, n, d = struct.unpack_from("<QQQ", data, 4)
    if version != EMBED_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 28
    expected = off + 8 * n + 4 * n * d
    if len(data) != expected:
        raise ValueError(f"{path}: size {len(data)} != expected {expected}")
    ids = np.frombuffer(data, dtype="<u8", count=n, offset=off).astype(np.int64)
    U = np.frombuffer(data, dtype="<f4", count=n * d, offset=off + 8 * n).reshape(n, d)
    return ids, U.copy()


__all__ = [
    "MAX_DOT", "EmbeddingStore", "Hyperparams", "NegativeSampler", "RankOutput", "TrainResult",
    "batches_per_epoch", "init_embeddings", "line_update", "rank_streams", "read_embeddings_binary",
    "sigmoid_dot", "train", "train_batch", "write_embeddings_binary", "write_embeddings_text",
]
