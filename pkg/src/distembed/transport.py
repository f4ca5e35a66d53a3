"""Rank-scoped message passing over a deterministic in-process simulator.

Each simulated rank runs its program in its own thread, but only one thread
holds the baton at any time: a rank runs until it calls a transport
operation that yields, then the scheduler picks the next rank. Scheduling
is round-robin in ``deterministic`` mode and seeded-random in ``fuzzed``
mode, where point-to-point messages also sit in transit for a random number
of scheduling decisions (FIFO per channel).

Delivery guarantees the protocols rely on:

* a message is matched to a preposted receive as soon as it is delivered,
  and a newly posted receive immediately matches a pending message;
* every message in transit is delivered before any collective completes.
"""

from __future__ import annotations

import enum
import hashlib
import threading
from collections import Counter, defaultdict, deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

DEFAULT_QUIESCENCE_ROUNDS = 10


class TransportError(RuntimeError):
    pass


class ProtocolError(TransportError):
    """Ranks disagreed about a collective or sent something unexpected."""


class UsageError(TransportError):
    pass


class DeadlockError(TransportError):
    def __init__(self, message: str, blocked: dict[int, str]):
        super().__init__(message)
        self.blocked = blocked


class _Abort(BaseException):
    """Unwinds rank threads when the world is torn down."""


class ReduceOp(enum.Enum):
    SUM = "sum"
    MAX = "max"
    MIN = "min"


_REDUCERS = {
    ReduceOp.SUM: lambda xs: _fold(np.add, xs),
    ReduceOp.MAX: lambda xs: _fold(np.maximum, xs),
    ReduceOp.MIN: lambda xs: _fold(np.minimum, xs),
}


def _fold(fn, xs):
    acc = xs[0]
    for x in xs[1:]:
        acc = fn(acc, x)
    if isinstance(acc, np.generic):
        return acc.item()
    return acc


def _entries(payload) -> int:
    if payload is None:
        return 0
    return len(payload)


def _digest(payload) -> str:
    h = hashlib.sha1()
    if isinstance(payload, np.ndarray):
        h.update(str(payload.dtype).encode())
        h.update(np.ascontiguousarray(payload).tobytes())
    else:
        h.update(repr(payload).encode())
    return h.hexdigest()[:16]


class RequestHandle:
    """Pending nonblocking send, receive or barrier."""

    __slots__ = ("kind", "peer", "done", "count", "data", "tag", "completed_at")

    def __init__(self, kind: str, peer: int | None = None):
        self.kind = kind
        self.peer = peer
        self.done = False
        self.count = None
        self.data = None
        self.tag = None
        self.completed_at = None

    def __repr__(self):
        return f"RequestHandle({self.kind}, peer={self.peer}, done={self.done})"


@dataclass
class _Message:
    src: int
    dst: int
    payload: Any
    count: int
    send_handle: RequestHandle
    tag: int = 0


@dataclass
class _Slot:
    kind: str
    op: Any
    contrib: dict = field(default_factory=dict)
    done: bool = False
    result: Any = None
    fetched: int = 0


@dataclass
class _Barrier:
    entered: dict = field(default_factory=dict)
    handles: list = field(default_factory=list)
    completed_at: int | None = None


class Endpoint:
    """A rank's handle on the world: collectives, point-to-point, barriers."""

    def __init__(self, sim: "Simulator", rank: int):
        self._sim = sim
        self.rank = rank
        self.size = sim.p
        self.sources: list[int] | None = None
        self.targets: list[int] | None = None
        self.phase = "setup"
        self.counters: dict[str, Counter] = defaultdict(Counter)
        self.transcript: list[tuple] = []
        self._coll_seq = 0
        self._barrier_seq = 0
        self._step_entries = 0

    # --- bookkeeping -----------------------------------------------------

    def set_neighbors(self, sources: Sequence[int], targets: Sequence[int]) -> None:
        for name, ranks in (("sources", sources), ("targets", targets)):
            ranks = list(ranks)
            if len(set(ranks)) != len(ranks) or self.rank in ranks:
                raise UsageError(f"{name} must be duplicate-free and exclude rank {self.rank}")
            if any(not 0 <= r < self.size for r in ranks):
                raise UsageError(f"{name} contains an invalid rank: {ranks}")
        self.sources = list(sources)
        self.targets = list(targets)

    @contextmanager
    def in_phase(self, phase: str):
        prev, self.phase = self.phase, phase
        try:
            yield
        finally:
            self.phase = prev

    def count(self, key: str, n: int = 1) -> None:
        self.counters[self.phase][key] += n

    def end_superstep(self) -> None:
        c = self.counters[self.phase]
        c["supersteps"] += 1
        c["max_superstep_p2p_entries"] = max(c["max_superstep_p2p_entries"], self._step_entries)
        self._step_entries = 0

    @property
    def clock(self) -> int:
        return self._sim.clock

    def tick(self, n: int = 1) -> None:
        """Yield ``n`` times, modelling local work that takes simulated time."""
        for _ in range(n):
            self._sim.progress += 1
            self._sim.yield_(self.rank)

    # --- collectives -----------------------------------------------------

    def _collective(self, kind: str, op, value, combine: Callable[[dict], Any]):
        sim = self._sim
        seq = self._coll_seq
        self._coll_seq += 1
        slot = sim.slots.get(seq)
        if slot is None:
            slot = sim.slots[seq] = _Slot(kind, op)
        elif slot.kind != kind or slot.op != op:
            raise ProtocolError(
                f"rank {self.rank} called {kind}({op}) as collective #{seq} "
                f"but other ranks called {slot.kind}({slot.op})"
            )
        slot.contrib[self.rank] = value
        sim.progress += 1
        if len(slot.contrib) == sim.p:
            sim.flush_transit()
            slot.result = combine(slot.contrib)
            slot.done = True
        sim.yield_(self.rank, lambda: slot.done, lambda: self._describe_wait(seq, slot))
        out = slot.result[self.rank] if isinstance(slot.result, dict) else slot.result
        slot.fetched += 1
        if slot.fetched == sim.p:
            del sim.slots[seq]
        return out

    def _describe_wait(self, seq, slot) -> str:
        missing = [r for r in range(self.size) if r not in slot.contrib]
        return f"blocked in {slot.kind} #{seq} waiting for ranks {missing}"

    def all_reduce(self, value, op: ReduceOp = ReduceOp.SUM):
        op = ReduceOp(op)
        self.count("allreduce")
        out = self._collective(
            "allreduce", op, value, lambda c: _REDUCERS[op]([c[r] for r in range(self.size)])
        )
        self.transcript.append(("allreduce", _digest(out)))
        return out

    def all_to_all_v(self, payloads: Sequence, kind: str = "alltoallv") -> list:
        """Send ``payloads[d]`` to rank ``d``; return what each source sent here.

        The result is indexed by source rank.
        """
        if len(payloads) != self.size:
            raise UsageError(f"need one payload per rank ({self.size}), got {len(payloads)}")
        payloads = [np.array(x, copy=True) if isinstance(x, np.ndarray) else list(x) for x in payloads]
        if kind != "alltoallv-reply":
            self.count(kind)
        self.count("alltoallv_entries_sent", sum(_entries(x) for x in payloads))

        def route(c):
            return {d: [c[s][d] for s in range(self.size)] for d in range(self.size)}

        out = self._collective(kind, None, payloads, route)
        self.count("alltoallv_entries_recv", sum(_entries(x) for x in out))
        self.transcript.append((kind, tuple(_digest(x) for x in out)))
        return out

    def all_to_all_fetch(self, requests: Sequence, serve: Callable[[int, Any], Any]) -> list:
        """Fetch data owned elsewhere in one collective invocation.

        ``requests[d]`` is sent to rank ``d``; every rank answers each
        incoming request with ``serve(source, request)`` and the answers come
        back indexed by the rank that served them. The reply leg rides on
        the same invocation, the way Alltoallv folds in its count exchange.
        """
        incoming = self.all_to_all_v(requests)
        replies = [serve(s, req) for s, req in enumerate(incoming)]
        return self.all_to_all_v(replies, kind="alltoallv-reply")

    def all_gather(self, value) -> list:
        """Every rank's ``value``, indexed by rank."""
        return [x[0] for x in self.all_to_all_v([[value]] * self.size, kind="allgather")]

    # --- nonblocking barrier ----------------------------------------------

    def ibarrier(self) -> RequestHandle:
        sim = self._sim
        epoch = self._barrier_seq
        self._barrier_seq += 1
        bar = sim.barriers.setdefault(epoch, _Barrier())
        handle = RequestHandle("barrier")
        bar.entered[self.rank] = sim.clock
        bar.handles.append(handle)
        self.count("ibarrier")
        sim.progress += 1
        if len(bar.entered) == sim.p:
            bar.completed_at = sim.clock
            for h in bar.handles:
                h.done = True
                h.completed_at = sim.clock
        return handle

    def barrier_entries(self, epoch: int) -> dict:
        return dict(self._sim.barriers[epoch].entered)

    # --- point-to-point -----------------------------------------------------

    def isend(self, payload, dest: int, tag: int = 0) -> RequestHandle:
        """Buffered nonblocking send; an empty or ``None`` payload is a zero-length message.

        ``tag`` travels with the message and shows up on the matching receive.
        """
        if self.targets is not None and dest not in self.targets:
            raise UsageError(f"rank {self.rank} cannot send to {dest}: not in targets {self.targets}")
        if dest == self.rank or not 0 <= dest < self.size:
            raise UsageError(f"invalid destination {dest}")
        n = _entries(payload)
        data = None if n == 0 else (np.array(payload, copy=True) if isinstance(payload, np.ndarray) else list(payload))
        handle = RequestHandle("send", dest)
        if n:
            self.count("p2p_messages")
            self.count("p2p_entries", n)
            self._step_entries += n
        else:
            self.count("p2p_markers")
        self._sim.post_message(_Message(self.rank, dest, data, n, handle, tag))
        return handle

    def irecv(self, source: int) -> RequestHandle:
        if self.sources is not None and source not in self.sources:
            raise UsageError(f"rank {self.rank} cannot receive from {source}: not in sources {self.sources}")
        handle = RequestHandle("recv", source)
        self._sim.post_receive(source, self.rank, handle)
        return handle

    irecv_prepost = irecv

    def test(self, handle: RequestHandle | None) -> bool:
        if handle is None:
            raise UsageError("test on a request that was never started (e.g. a barrier never entered)")
        self._sim.yield_(self.rank)
        return handle.done

    def test_some(self, handles: Sequence[RequestHandle | None]) -> list[int]:
        self._sim.yield_(self.rank)
        return [i for i, h in enumerate(handles) if h is not None and h.done]

    def wait(self, handle: RequestHandle) -> None:
        if handle is None:
            raise UsageError("wait on a request that was never started")
        self._sim.yield_(self.rank, lambda: handle.done, lambda: f"blocked waiting on {handle!r}")

    @staticmethod
    def get_count(handle: RequestHandle) -> int:
        if not handle.done:
            raise UsageError("get_count on an incomplete request")
        return handle.count


class Simulator:
    """Runs ``p`` rank programs to completion under a controlled schedule."""

    def __init__(self, p: int, seed: int = 0, schedule: str = "deterministic",
                 quiescence_rounds: int = DEFAULT_QUIESCENCE_ROUNDS):
        if p < 1:
            raise ValueError("need at least one rank")
        if schedule not in ("deterministic", "fuzzed"):
            raise ValueError(f"unknown schedule mode {schedule!r}")
        self.p = p
        self.schedule = schedule
        self.rng = np.random.Generator(np.random.Philox(seed))
        self.quiescence_rounds = quiescence_rounds
        self.clock = 0
        self.progress = 0
        self.slots: dict[int, _Slot] = {}
        self.barriers: dict[int, _Barrier] = {}
        self.transit: dict[tuple, deque] = defaultdict(deque)
        self.pending: dict[tuple, deque] = defaultdict(deque)
        self.posted: dict[tuple, deque] = defaultdict(deque)
        self.endpoints = [Endpoint(self, r) for r in range(p)]
        self._go = [threading.Semaphore(0) for _ in range(p)]
        self._back = threading.Semaphore(0)
        self._state = ["ready"] * p
        self._wait: list[Callable | None] = [None] * p
        self._what: list[Callable | None] = [None] * p
        self._aborting = False
        self._results: list[Any] = [None] * p
        self._errors: dict[int, BaseException] = {}

    # --- called from rank threads while holding the baton ---------------------

    def yield_(self, rank: int, until: Callable[[], bool] | None = None, what=None) -> None:
        self._state[rank] = "blocked" if until is not None else "ready"
        self._wait[rank] = until
        self._what[rank] = what
        self._back.release()
        self._go[rank].acquire()
        if self._aborting:
            raise _Abort()

    def post_message(self, msg: _Message) -> None:
        key = (msg.src, msg.dst)
        self.progress += 1
        if self.schedule == "fuzzed":
            self.transit[key].append(msg)
        else:
            self.pending[key].append(msg)
            self._match(key)

    def post_receive(self, src: int, dst: int, handle: RequestHandle) -> None:
        self.posted[(src, dst)].append(handle)
        self.progress += 1
        self._match((src, dst))

    def _match(self, key) -> None:
        pending, posted = self.pending[key], self.posted[key]
        while pending and posted:
            msg, recv = pending.popleft(), posted.popleft()
            recv.data, recv.count, recv.tag, recv.done = msg.payload, msg.count, msg.tag, True
            recv.completed_at = msg.send_handle.completed_at = self.clock
            msg.send_handle.done = True
            ep = self.endpoints[msg.dst]
            ep.transcript.append(("recv", msg.src, msg.count, _digest(msg.payload)))
            ep.counters[ep.phase]["recv_messages"] += 1
            ep.counters[ep.phase]["recv_entries"] += msg.count
            self.progress += 1

    def _deliver_one(self, key) -> None:
        self.pending[key].append(self.transit[key].popleft())
        self._match(key)

    def flush_transit(self) -> None:
        keys = [k for k, q in self.transit.items() if q]
        if self.schedule == "fuzzed":
            self.rng.shuffle(keys)
        for k in keys:
            while self.transit[k]:
                self._deliver_one(k)

    # --- scheduler ---------------------------------------------------------

    def _fuzz_deliveries(self) -> None:
        keys = sorted(k for k, q in self.transit.items() if q)
        for k in keys:
            if self.rng.random() < 0.5:
                self._deliver_one(k)

    def _deliver_any(self) -> bool:
        """Deliver one in-transit message from a random channel, if any."""
        keys = sorted(k for k, q in self.transit.items() if q)
        if not keys:
            return False
        self._deliver_one(keys[int(self.rng.integers(len(keys)))])
        return True

    def _runnable(self, live):
        out = []
        for r in live:
            if self._state[r] == "ready" or (self._state[r] == "blocked" and self._wait[r]()):
                out.append(r)
        return out

    def _rank_main(self, rank: int, program) -> None:
        self._go[rank].acquire()
        try:
            if self._aborting:
                raise _Abort()
            self._state[rank] = "running"
            self._results[rank] = program(rank, self.endpoints[rank])
            self._state[rank] = "done"
        except _Abort:
            self._state[rank] = "done"
        except BaseException as exc:  # noqa: BLE001 - reported by run()
            self._errors[rank] = exc
            self._state[rank] = "failed"
        finally:
            self._back.release()

    def _describe(self, rank: int) -> str:
        state = self._state[rank]
        if state == "done":
            return "finished"
        if state == "failed":
            return f"failed: {self._errors[rank]!r}"
        what = self._what[rank]
        return what() if callable(what) else (what or "polling")

    def _teardown(self, threads) -> None:
        self._aborting = True
        for r, t in enumerate(threads):
            if t.is_alive():
                self._go[r].release()
                t.join()

    def run(self, program: Callable[[int, Endpoint], Any]) -> list:
        threads = [
            threading.Thread(target=self._rank_main, args=(r, program), daemon=True, name=f"rank-{r}")
            for r in range(self.p)
        ]
        for t in threads:
            t.start()
        last = -1
        idle = 0
        try:
            while True:
                if self._errors:
                    rank = min(self._errors)
                    self._teardown(threads)
                    raise self._errors[rank]
                live = [r for r in range(self.p) if self._state[r] not in ("done", "failed")]
                if not live:
                    break
                if self.schedule == "fuzzed":
                    self._fuzz_deliveries()
                runnable = self._runnable(live)
                while not runnable and self._deliver_any():
                    runnable = self._runnable(live)
                if not runnable or idle > self.quiescence_rounds * self.p * len(live):
                    self._deadlock(threads)
                if self.schedule == "fuzzed":
                    r = runnable[int(self.rng.integers(len(runnable)))]
                else:
                    r = min(runnable, key=lambda x: (x - last - 1) % self.p)
                last = r
                self.clock += 1
                before = self.progress
                self._state[r] = "running"
                self._go[r].release()
                self._back.acquire()
                idle = 0 if self.progress != before else idle + 1
        finally:
            if not self._aborting:
                for t in threads:
                    t.join()
        return list(self._results)

    def _deadlock(self, threads) -> None:
        blocked = {r: self._describe(r) for r in range(self.p)}
        stuck = [r for r in range(self.p) if self._state[r] not in ("done", "failed")]
        absent = set()
        for slot in self.slots.values():
            absent.update(r for r in range(self.p) if r not in slot.contrib)
        lines = [f"rank {r}: {blocked[r]}" for r in range(self.p)]
        msg = "deadlock detected"
        if absent:
            msg += f"; ranks {sorted(absent)} never entered a pending collective"
        msg += f"; stuck ranks {stuck}\n" + "\n".join(lines)
        self._teardown(threads)
        raise DeadlockError(msg, blocked)


@dataclass
class WorldResult:
    results: list
    counters: list[dict[str, Counter]]
    transcripts: list[list[tuple]]
    clock: int

    def __iter__(self):
        return iter(self.results)

    def __getitem__(self, i):
        return self.results[i]

    def __len__(self):
        return len(self.results)


def run_world(p: int, program: Callable[[int, Endpoint], Any], seed: int = 0,
              schedule: str = "deterministic",
              quiescence_rounds: int = DEFAULT_QUIESCENCE_ROUNDS) -> WorldResult:
    """Run ``program(rank, endpoint)`` on ``p`` simulated ranks."""
    sim = Simulator(p, seed, schedule, quiescence_rounds)
    results = sim.run(program)
    return WorldResult(
        results,
        [dict(ep.counters) for ep in sim.endpoints],
        [ep.transcript for ep in sim.endpoints],
        sim.clock,
    )


COUNTER_FIELDS = (
    "p2p_messages", "p2p_entries", "p2p_markers", "recv_messages", "recv_entries",
    "allreduce", "alltoallv", "alltoallv_entries_sent", "alltoallv_entries_recv",
    "ibarrier", "supersteps", "max_superstep_p2p_entries",
)


def counter_report(counters: Sequence[dict[str, Counter]]) -> list[dict]:
    """One record per rank per phase, in rank then phase order."""
    records = []
    for rank, by_phase in enumerate(counters):
        for phase in sorted(by_phase):
            c = by_phase[phase]
            rec = {"rank": rank, "phase": phase}
            rec.update({k: int(c.get(k, 0)) for k in COUNTER_FIELDS})
            records.append(rec)
    return records


SAMPLING_PHASES = ("sampling", "presample")


def cost_model_terms(counters: Sequence[dict[str, Counter]]) -> dict:
    """Split counters into synchronization, point-to-point and training all-to-all terms."""
    synch = p2p = p2p_msgs = a2a = a2a_calls = 0
    for by_phase in counters:
        for phase, c in by_phase.items():
            if phase in SAMPLING_PHASES:
                synch += c.get("allreduce", 0) + c.get("ibarrier", 0)
                p2p += c.get("p2p_entries", 0)
                p2p_msgs += c.get("p2p_messages", 0)
            elif phase == "training":
                a2a += c.get("alltoallv_entries_sent", 0)
                a2a_calls += c.get("alltoallv", 0)
    return {
        "synch_collectives": synch,
        "p2p_entries": p2p,
        "p2p_messages": p2p_msgs,
        "training_alltoallv_entries": a2a,
        "training_alltoallv_calls": a2a_calls,
    }
