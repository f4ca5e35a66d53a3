"""Distributed random walks and per-batch positive-pair generation.

A walk moves one vertex per superstep. Steps that stay on the rank are
recorded immediately; a step onto a vertex owned elsewhere is buffered as an
edge record ``(x, next)`` for the owner, which records it in its remote store
and continues the walk from ``next``. Once the global step budget is spent
(or no walker is left anywhere), every rank sends a zero-length message to
each of its targets and the walk ends when all of those markers arrived.

After a batch's walks, the remote stores are shipped back to the owner of
each edge's first vertex so every pair ``(u, v)`` ends up on ``owner(u)``.
"""

from __future__ import annotations

import enum
import itertools
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels
from .graph import LocalPartition
from .transport import Endpoint, ReduceOp

EMPTY_PAIRS = np.empty((0, 2), dtype=np.int64)


class SamplingError(RuntimeError):
    pass


class AugmentationError(SamplingError):
    pass


class Variant(str, enum.Enum):
    LOCAL = "local"
    FRESH = "fresh"
    REUSE_SPILL = "reuse-spill"
    REFRESH_SPILL = "refresh-spill"
    AUG_SINGLE = "aug-single"
    AUG_PAIR = "aug-pair"

    @property
    def augmented(self) -> bool:
        return self in (Variant.AUG_SINGLE, Variant.AUG_PAIR)

    @property
    def spill_policy(self) -> str | None:
        return {Variant.REUSE_SPILL: "reuse", Variant.REFRESH_SPILL: "refresh"}.get(self)


class Sync(str, enum.Enum):
    ALLREDUCE = "allreduce"
    IBARRIER = "ibarrier"


@dataclass
class WalkConfig:
    steps: int = 100
    buffer_size: int = 128
    window: int = 2
    variant: Variant = Variant.LOCAL
    sync: Sync = Sync.ALLREDUCE
    batch_size: int = 1000
    num_batches: int = 1

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.sync = Sync(self.sync)
        if self.variant.augmented:
            self.sync = Sync.IBARRIER
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.num_batches < 0:
            raise ValueError("num_batches must be >= 0")


class SpillBuffer:
    """Pairs left over after pruning a batch.

    ``reuse`` keeps leftovers until they are consumed; ``refresh`` lets them
    serve exactly one following batch.
    """

    def __init__(self, policy: str):
        if policy not in ("reuse", "refresh"):
            raise ValueError(f"unknown spill policy {policy!r}")
        self.policy = policy
        self.pairs = EMPTY_PAIRS

    def __len__(self):
        return len(self.pairs)

    def drain(self) -> np.ndarray:
        out, self.pairs = self.pairs, EMPTY_PAIRS
        return out


def sample_root_edge(part: LocalPartition, rng: np.random.Generator) -> tuple[int, int]:
    """A local edge drawn with probability proportional to its weight."""
    cum = part.edge_cumweights
    if len(cum) == 0 or cum[-1] <= 0:
        raise SamplingError(f"rank {part.rank} has no weighted local edges")
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    i = min(i, len(cum) - 1)
    u = part.lo + int(np.searchsorted(part.row_offsets, i, side="right")) - 1
    return u, int(part.neighbors[i])


def weighted_step(part: LocalPartition, x: int, rng: np.random.Generator) -> int | None:
    """Neighbor of owned ``x`` drawn proportional to edge weight, or ``None`` at a dead end."""
    i = x - part.lo
    s, e = int(part.row_offsets[i]), int(part.row_offsets[i + 1])
    if e == s or part.row_cumweights[e - 1] <= 0:
        return None
    cum = part.row_cumweights[s:e]
    j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return int(part.neighbors[s + min(j, e - s - 1)])


def expand_window(walk, window: int, owned_range: tuple[int, int] | None = None) -> np.ndarray:
    """All ``(walk[i], walk[j])`` with ``1 <= j - i <= window``.

    With ``owned_range`` only pairs whose first vertex lies in it are kept.
    Pairs of a vertex with itself (from revisits) are dropped.
    """
    w = np.asarray(walk, dtype=np.int64)
    chunks = []
    for k in range(1, window + 1):
        if k >= len(w):
            break
        a, b = w[:-k], w[k:]
        keep = a != b
        if owned_range is not None:
            keep &= (a >= owned_range[0]) & (a < owned_range[1])
        chunks.append(np.stack([a[keep], b[keep]], axis=1))
    return np.concatenate(chunks) if chunks else EMPTY_PAIRS


class PairSampler:
    """Per-rank walk state and batch producer for one walk variant."""

    def __init__(self, part: LocalPartition, endpoint: Endpoint, config: WalkConfig,
                 rng: np.random.Generator):
        self.part = part
        self.ep = endpoint
        self.config = config
        self.rng = rng
        self.targets = list(endpoint.targets if endpoint.targets is not None else part.neighbor_ranks())
        self.sources = list(endpoint.sources if endpoint.sources is not None else self.targets)
        self.visited = np.zeros(part.num_owned, dtype=np.int64)
        policy = config.variant.spill_policy
        self.spill = SpillBuffer(policy) if policy else None
        self.walks_invoked = 0
        self.pre_prune_counts: list[int] = []
        self.pool: np.ndarray | None = None
        self.batches_served = 0
        self._reset_stores()

    def _reset_stores(self):
        self.local_pairs: list[np.ndarray] = []
        self.remote_pairs: list[tuple[int, int]] = []
        self.n_local = 0
        self.n_sent = 0

    @property
    def owned_range(self):
        return self.part.lo, self.part.hi

    def _owned(self, v: int) -> bool:
        return self.part.lo <= v < self.part.hi

    def _add_local(self, pairs: np.ndarray) -> int:
        if len(pairs):
            self.local_pairs.append(pairs)
            self.n_local += len(pairs)
        return len(pairs)

    @property
    def collected(self) -> int:
        """Pairs this rank will own after assembly: local ones plus edges it sent out."""
        return self.n_local + self.n_sent

    def sample_root(self):
        if self.part.num_local_entries == 0:
            return None
        return sample_root_edge(self.part, self.rng)

    # --- walks ---------------------------------------------------------------

    def random_walk(self, root, steps: int | None = None) -> int:
        """Run one walk (collective unless the variant is ``local``); return new local pairs."""
        steps = self.config.steps if steps is None else steps
        self.walks_invoked += 1
        if self.config.variant is Variant.LOCAL:
            return self._local_walk(root, steps)
        return self._remote_walk(root, steps)

    def _local_walk(self, root, steps: int) -> int:
        if root is None or steps < 1:
            return 0
        u, v = root
        lo, hi = self.owned_range
        if self._owned(v):
            out = np.empty(steps, dtype=np.int64)
            n = kernels.walk_local(self.part.row_offsets, self.part.neighbors, self.part.row_cumweights,
                                   lo, hi, v, self.rng.random(steps - 1), out)
            path = np.concatenate(([u], out[:n]))
        else:
            path = np.array([u, v], dtype=np.int64)
        arrivals = path[1:]
        arrivals = arrivals[(arrivals >= lo) & (arrivals < hi)]
        np.add.at(self.visited, arrivals - lo, 1)
        return self._add_local(expand_window(path, self.config.window, (lo, hi)))

    def _remote_walk(self, root, steps: int) -> int:
        part, ep, size = self.part, self.ep, self.config.buffer_size
        lo = part.lo
        targets, sources = self.targets, self.sources
        slot = {t: i for i, t in enumerate(targets)}
        outgoing = [[] for _ in targets]
        sreqs = [None] * len(targets)
        segments: list[list[int]] = []
        cq: deque = deque()
        nq: deque = deque()
        visits = 0
        sent = received = 0
        exiting = steps <= 0
        done_sources = 0

        if root is not None and not exiting:
            u, v = root
            seg = [u]
            segments.append(seg)
            if self._owned(v):
                self.visited[v - lo] += 1
                visits += 1
                seg.append(v)
                cq.append((v, seg))
            else:
                outgoing[slot[part.owner(v)]].append((u, v))

        rreqs = [ep.irecv(s) for s in sources]
        held: dict[int, np.ndarray] = {}
        step = 0
        marker_step = None
        while True:
            # Frontier edges sent during the previous superstep, in source order.
            # A peer that already runs the current superstep may have sent more;
            # those are held back so the outcome does not depend on scheduling.
            ready, held = held, {}
            for i in ep.test_some(rreqs):
                h = rreqs[i]
                if h.count == 0:
                    done_sources += 1
                    rreqs[i] = None
                    continue
                (ready if h.tag < step else held)[i] = h.data
                rreqs[i] = ep.irecv(sources[i])
            for i in sorted(ready):
                for m, n in ready[i].tolist():
                    self.remote_pairs.append((m, n))
                    self.visited[n - lo] += 1
                    visits += 1
                    received += 1
                    if not exiting:
                        seg = [n]
                        segments.append(seg)
                        cq.append((n, seg))

            for i in ep.test_some(sreqs):
                sreqs[i] = None

            if not exiting:
                while cq:
                    x, seg = cq.popleft()
                    nxt = weighted_step(part, x, self.rng)
                    if nxt is None:
                        continue
                    if self._owned(nxt):
                        self.visited[nxt - lo] += 1
                        visits += 1
                        seg.append(nxt)
                        nq.append((nxt, seg))
                    else:
                        outgoing[slot[part.owner(nxt)]].append((x, nxt))
                # at most one data message per target per superstep
                for i, t in enumerate(targets):
                    if outgoing[i] and sreqs[i] is None:
                        chunk, outgoing[i] = outgoing[i][:size], outgoing[i][size:]
                        sreqs[i] = ep.isend(np.array(chunk, dtype=np.int64), t, tag=step)
                        sent += len(chunk)
            elif marker_step is None:
                for t in targets:
                    ep.isend(None, t, tag=step)
                marker_step = step
            ep.end_superstep()

            # every marker was sent in the same superstep and is delivered by
            # the collective below, so completion is judged one superstep later
            local_done = int(marker_step is not None and step > marker_step
                             and done_sources == len(sources))
            pending = len(nq) + sum(len(o) for o in outgoing)
            total = ep.all_reduce(np.array([visits, pending, sent, received, local_done], dtype=np.int64))
            if total[4] == ep.size:
                break
            if not exiting and (total[0] >= steps or total[1] + total[2] - total[3] == 0):
                exiting = True
            cq, nq = nq, deque()
            step += 1

        self.n_sent += sent
        new = [expand_window(seg, self.config.window) for seg in segments if len(seg) > 1]
        return sum(self._add_local(p) for p in new)

    # --- batch assembly --------------------------------------------------------

    def _sync_done(self, target: int, state: dict) -> bool:
        """One termination check of the sampling loop (collective)."""
        ep = self.ep
        if self.config.sync is Sync.ALLREDUCE:
            return ep.all_reduce(self.collected, ReduceOp.MAX) >= target
        if state["req"] is None and (self.collected >= target or self.part.num_local_entries == 0):
            state["req"] = ep.ibarrier()
        seen = 1 if state["req"] is not None and ep.test(state["req"]) else 0
        # A rank that observed completion proves every rank entered. Entries
        # from a later round sit behind this reduce, so the answer does not
        # depend on scheduling.
        if ep.all_reduce(seen, ReduceOp.MAX):
            ep.wait(state["req"])
            return True
        return False

    def _collect(self, target: int, check_first: bool = False, carried: int = 0) -> np.ndarray:
        """Walk until the sync rule says ``target`` pairs are in; return assembled pairs."""
        self._reset_stores()
        self.n_local = carried
        state = {"req": None}
        done = check_first and self._sync_done(target, state)
        while not done:
            self.random_walk(self.sample_root())
            done = self._sync_done(target, state)
        self.pre_prune_counts.append(self.collected)
        local = np.concatenate(self.local_pairs) if self.local_pairs else EMPTY_PAIRS
        if self.config.variant is not Variant.LOCAL:
            local = np.concatenate([local, self._assemble()])
        return local

    def _assemble(self) -> np.ndarray:
        """Ship remote-store edges to the owner of their first vertex."""
        remote = np.array(self.remote_pairs, dtype=np.int64).reshape(-1, 2)
        owners = self.part.owner(remote[:, 0]) if len(remote) else np.empty(0, dtype=np.int64)
        out = [remote[owners == d] for d in range(self.ep.size)]
        got = self.ep.all_to_all_v(out)
        return np.concatenate(got).reshape(-1, 2).astype(np.int64)

    def _shuffle(self, pairs: np.ndarray) -> np.ndarray:
        return pairs[self.rng.permutation(len(pairs))] if len(pairs) else pairs

    def generate_pairs(self) -> np.ndarray:
        """Produce the next batch of at most ``batch_size`` owned pairs."""
        B = self.config.batch_size
        if self.spill is None:
            fresh = self._shuffle(self._collect(B))
            return fresh[:B]
        carried = self.spill.drain()
        fresh = self._shuffle(self._collect(B, check_first=True, carried=len(carried)))
        pool = np.concatenate([carried, fresh])
        batch = pool[:B]
        if self.spill.policy == "reuse":
            self.spill.pairs = pool[B:]
        elif len(carried):
            # a spill serves one batch; whatever is left then is dropped
            self.spill.pairs = EMPTY_PAIRS
        else:
            self.spill.pairs = fresh[B:]
        return batch

    def augment_single(self) -> np.ndarray:
        """One long walk from a single root, topped up from fresh roots if short."""
        cfg = self.config
        total = cfg.batch_size * cfg.num_batches
        self._reset_stores()
        state = {"req": None}
        first = self.ep.all_reduce(self.ep.rank if self.part.num_local_entries else self.ep.size,
                                   ReduceOp.MIN)
        self.random_walk(self.sample_root() if self.ep.rank == first else None, steps=total)
        done = self._sync_done(total, state)
        while not done:
            self.random_walk(self.sample_root())
            done = self._sync_done(total, state)
        self.pre_prune_counts.append(self.collected)
        local = np.concatenate(self.local_pairs) if self.local_pairs else EMPTY_PAIRS
        pool = self._shuffle(np.concatenate([local, self._assemble()]))
        self.pool = pool[:total]
        return self.pool

    def augment_pair(self) -> np.ndarray:
        """Walk for a few seed pairs, then recombine seed vertices into a full pool."""
        cfg = self.config
        total = cfg.batch_size * cfg.num_batches
        seeds = self._shuffle(self._collect(seed_count(cfg.batch_size, cfg.num_batches)))
        seeds = seeds[:seed_count(cfg.batch_size, cfg.num_batches)]
        self.pool = expand_seed_pairs(seeds, total, self.owned_range)
        return self.pool

    def prepare(self) -> None:
        """Upfront sampling for the augmented variants; a no-op otherwise."""
        if self.config.variant is Variant.AUG_SINGLE:
            self.augment_single()
        elif self.config.variant is Variant.AUG_PAIR:
            self.augment_pair()

    def next_batch(self) -> np.ndarray:
        if self.config.variant.augmented:
            if self.pool is None:
                self.prepare()
            B = self.config.batch_size
            b = self.batches_served
            self.batches_served += 1
            return self.pool[b * B:(b + 1) * B]
        self.batches_served += 1
        return self.generate_pairs()


def seed_count(batch_size: int, num_batches: int) -> int:
    return math.ceil(math.sqrt(batch_size * num_batches * 2))


def expand_seed_pairs(seeds: np.ndarray, total: int, owned_range: tuple[int, int]) -> np.ndarray:
    """Grow ``seeds`` to exactly ``total`` pairs by cycling over vertex combinations.

    Combinations ``(a, b)`` with ``a < b`` of the distinct seed vertices are
    taken in lexicographic order. The owned endpoint goes first; if neither
    is owned, the first slot is filled by the owned seed vertices in turn.
    """
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 2)
    if len(seeds) >= total:
        return seeds[:total].copy()
    distinct = sorted(set(seeds.ravel().tolist()))
    if len(distinct) < 2:
        raise AugmentationError(f"need at least 2 distinct seed vertices, got {len(distinct)}")
    lo, hi = owned_range
    owned = [x for x in distinct if lo <= x < hi]
    if not owned:
        raise AugmentationError("no owned seed vertex to anchor recombined pairs")
    out = seeds.tolist()
    combos = itertools.cycle(itertools.combinations(distinct, 2))
    for k in range(total - len(out)):
        a, b = next(combos)
        if lo <= a < hi:
            out.append((a, b))
        elif lo <= b < hi:
            out.append((b, a))
        else:
            out.append((owned[k % len(owned)], b))
    return np.array(out, dtype=np.int64)
