"""Graph ingestion, binary CSR I/O and 1-D vertex partitioning."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

CSR_MAGIC = b"NMD1"
CSR_VERSION = 1
_HEADER = struct.Struct("<QQQ")
HEADER_SIZE = len(CSR_MAGIC) + _HEADER.size


class GraphFormatError(ValueError):
    """Malformed edge list, label file or binary CSR file."""


class PartitionError(ValueError):
    pass


@dataclass
class GlobalGraph:
    """Undirected weighted graph in CSR form.

    Every undirected edge is stored twice, once in each endpoint's row.
    ``ids[i]`` is the original (pre-densification) id of dense vertex ``i``.
    """

    row_offsets: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.row_offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        self.neighbors = np.ascontiguousarray(self.neighbors, dtype=np.int64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if self.ids is None:
            self.ids = np.arange(self.num_vertices, dtype=np.int64)

    @property
    def num_vertices(self) -> int:
        return len(self.row_offsets) - 1

    @property
    def num_entries(self) -> int:
        return len(self.neighbors)

    @property
    def num_edges(self) -> int:
        return self.num_entries // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def weighted_degrees(self) -> np.ndarray:
        out = np.zeros(self.num_vertices, dtype=np.float64)
        np.add.at(out, np.repeat(np.arange(self.num_vertices), self.degrees()), self.weights)
        return out

    def row(self, v: int) -> np.ndarray:
        return self.neighbors[self.row_offsets[v]:self.row_offsets[v + 1]]

    def edge_set(self) -> set[tuple[int, int]]:
        src = np.repeat(np.arange(self.num_vertices), self.degrees())
        return set(zip(src.tolist(), self.neighbors.tolist()))

    def has_edge(self, u: int, v: int) -> bool:
        row = self.row(u)
        i = np.searchsorted(row, v)
        return bool(i < len(row) and row[i] == v)

    def validate(self) -> None:
        ro, nb, w = self.row_offsets, self.neighbors, self.weights
        n = self.num_vertices
        if n < 0 or ro[0] != 0 or ro[-1] != len(nb) or np.any(np.diff(ro) < 0):
            raise GraphFormatError("row_offsets are not a valid CSR index")
        if len(w) != len(nb):
            raise GraphFormatError("weights and neighbors differ in length")
        if len(nb) and (nb.min() < 0 or nb.max() >= n):
            raise GraphFormatError("neighbor id out of range")
        if np.any(w < 0):
            raise GraphFormatError("negative edge weight")
        src = np.repeat(np.arange(n), np.diff(ro))
        fwd = {(a, b): c for a, b, c in zip(src.tolist(), nb.tolist(), w.tolist())}
        if len(fwd) != len(nb):
            raise GraphFormatError("duplicate entries within a row")
        for (a, b), c in fwd.items():
            if fwd.get((b, a)) != c:
                raise GraphFormatError(f"adjacency not symmetric at ({a}, {b})")

    def __eq__(self, other):
        if not isinstance(other, GlobalGraph):
            return NotImplemented
        return (
            np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.neighbors, other.neighbors)
            and np.array_equal(self.weights, other.weights)
        )


def from_edges(num_vertices: int, edges: Iterable[tuple], ids=None) -> GlobalGraph:
    """Build a CSR graph from undirected ``(u, v[, w])`` tuples over dense ids.

    Self loops are dropped and repeated pairs keep the first weight.
    """
    first: dict[tuple[int, int], float] = {}
    for e in edges:
        u, v = int(e[0]), int(e[1])
        w = float(e[2]) if len(e) > 2 else 1.0
        if u == v:
            continue
        first.setdefault((min(u, v), max(u, v)), w)
    m = len(first)
    src = np.empty(2 * m, dtype=np.int64)
    dst = np.empty(2 * m, dtype=np.int64)
    wts = np.empty(2 * m, dtype=np.float32)
    if m:
        pairs = np.array(list(first.keys()), dtype=np.int64)
        w = np.array(list(first.values()), dtype=np.float32)
        src[:m], dst[:m] = pairs[:, 0], pairs[:, 1]
        src[m:], dst[m:] = pairs[:, 1], pairs[:, 0]
        wts[:m] = wts[m:] = w
    order = np.lexsort((dst, src))
    src, dst, wts = src[order], dst[order], wts[order]
    row_offsets = np.zeros(num_vertices + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_vertices), out=row_offsets[1:])
    return GlobalGraph(row_offsets, dst, wts, ids)


def ingest_edge_list(lines: Iterable[str], directed: bool = False) -> GlobalGraph:
    """Parse ``u v [w]`` lines into a symmetric CSR graph.

    Ids are densified in order of first appearance; the original ids are kept
    in ``graph.ids``. A directed input is symmetrized; when both arcs of a pair
    appear, the first one's weight wins, exactly as for a repeated undirected
    edge. Blank lines and lines starting with ``#`` or ``%`` are skipped.
    """
    del directed  # both readings collapse to the same undirected graph
    dense: dict[int, int] = {}
    edges = []
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text[0] in "#%":
            continue
        parts = text.split()
        if len(parts) not in (2, 3):
            raise GraphFormatError(f"line {lineno}: expected 'u v' or 'u v w', got {text!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError:
            raise GraphFormatError(f"line {lineno}: cannot parse {text!r}") from None
        if u < 0 or v < 0:
            raise GraphFormatError(f"line {lineno}: negative vertex id")
        if not math.isfinite(w):
            raise GraphFormatError(f"line {lineno}: non-finite weight")
        if w < 0:
            raise ValueError(f"line {lineno}: negative weight {w}")
        du = dense.setdefault(u, len(dense))
        dv = dense.setdefault(v, len(dense))
        edges.append((du, dv, w))
    ids = np.fromiter(dense.keys(), dtype=np.int64, count=len(dense))
    return from_edges(len(dense), edges, ids)


def read_edge_list(path, directed: bool = False) -> GlobalGraph:
    with open(path) as fh:
        return ingest_edge_list(fh, directed)


def read_labels(path, graph: GlobalGraph) -> dict[int, int]:
    """Read ``vertex_id class_id`` lines, returning dense id -> class.

    Labels for ids absent from the graph are ignored.
    """
    index = {int(orig): i for i, orig in enumerate(graph.ids.tolist())}
    labels = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0][0] in "#%":
                continue
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'vertex_id class_id'")
            try:
                vid, cls = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from None
            if vid in index:
                labels[index[vid]] = cls
    return labels


def csr_file_size(num_vertices: int, num_entries: int) -> int:
    return HEADER_SIZE + 8 * (num_vertices + 1) + 8 * num_entries + 4 * num_entries


def write_binary_csr(graph: GlobalGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CSR_MAGIC)
        fh.write(_HEADER.pack(CSR_VERSION, graph.num_vertices, graph.num_entries))
        fh.write(graph.row_offsets.astype("<u8").tobytes())
        fh.write(graph.neighbors.astype("<u8").tobytes())
        fh.write(graph.weights.astype("<f4").tobytes())


def read_binary_csr(path) -> GlobalGraph:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise GraphFormatError(f"truncated header: {len(data)} bytes, need {HEADER_SIZE} (offset {len(data)})")
    if data[:4] != CSR_MAGIC:
        raise GraphFormatError(f"bad magic {data[:4]!r} at offset 0")
    version, nv, nnz = _HEADER.unpack_from(data, 4)
    if version != CSR_VERSION:
        raise GraphFormatError(f"unsupported version {version} at offset 4")
    expected = csr_file_size(nv, nnz)
    if len(data) != expected:
        raise GraphFormatError(
            f"file is {len(data)} bytes but header implies {expected} (offset {min(len(data), expected)})"
        )
    off = HEADER_SIZE
    ro = np.frombuffer(data, "<u8", nv + 1, off).astype(np.int64)
    off += 8 * (nv + 1)
    nb = np.frombuffer(data, "<u8", nnz, off).astype(np.int64)
    off += 8 * nnz
    w = np.frombuffer(data, "<f4", nnz, off).astype(np.float32)
    g = GlobalGraph(ro, nb, w)
    if ro[0] != 0 or ro[-1] != nnz or np.any(np.diff(ro) < 0):
        raise GraphFormatError(f"invalid row_offsets at offset {HEADER_SIZE}")
    if nnz and nb.max() >= nv:
        raise GraphFormatError(f"neighbor id out of range at offset {HEADER_SIZE + 8 * (nv + 1)}")
    return g


def load_graph(path, fmt: str = "edgelist") -> GlobalGraph:
    if fmt == "edgelist":
        return read_edge_list(path)
    if fmt == "csr":
        return read_binary_csr(path)
    raise ValueError(f"unknown graph format {fmt!r}")


@dataclass(frozen=True)
class PartitionMap:
    """Contiguous 1-D ownership: rank r owns ``[boundaries[r], boundaries[r+1])``."""

    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise PartitionError(f"invalid partition boundaries {b}")

    @property
    def num_ranks(self) -> int:
        return len(self.boundaries) - 1

    @property
    def num_vertices(self) -> int:
        return self.boundaries[-1]

    def owned_range(self, rank: int) -> tuple[int, int]:
        return self.boundaries[rank], self.boundaries[rank + 1]

    def owner(self, v):
        """Owning rank of a vertex id or an array of ids."""
        r = np.searchsorted(self.boundaries, v, side="right") - 1
        return int(r) if np.ndim(r) == 0 else r

    @classmethod
    def uniform(cls, num_vertices: int, p: int) -> "PartitionMap":
        return cls(tuple(r * num_vertices // p for r in range(p + 1)))


def partition_first_fit(graph: GlobalGraph, p: int) -> PartitionMap:
    """Edge-balanced contiguous split by a single first-fit sweep.

    Consecutive vertices go to the current rank until its CSR entry count
    reaches ``ceil(2|E| / p)``. If the sweep cannot produce ``p`` nonempty
    ranks, the uniform vertex split is used instead.
    """
    n = graph.num_vertices
    if p < 1 or p > n:
        raise PartitionError(f"need 1 <= p <= |V| = {n}, got p={p}")
    quota = -(-graph.num_entries // p)
    bounds = [0]
    filled = 0
    for v, d in enumerate(graph.degrees().tolist()):
        filled += d
        if filled >= quota and len(bounds) < p:
            bounds.append(v + 1)
            filled = 0
    bounds.append(n)
    if len(bounds) != p + 1 or any(x >= y for x, y in zip(bounds, bounds[1:])):
        return PartitionMap.uniform(n, p)
    return PartitionMap(tuple(bounds))


@dataclass
class LocalPartition:
    """One rank's rows of the global CSR (column ids stay global)."""

    rank: int
    pmap: PartitionMap
    row_offsets: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray
    ghosts: np.ndarray
    # per-row cumulative weights, restarting at every row
    row_cumweights: np.ndarray = field(repr=False)
    edge_cumweights: np.ndarray = field(repr=False)

    @property
    def lo(self) -> int:
        return self.pmap.boundaries[self.rank]

    @property
    def hi(self) -> int:
        return self.pmap.boundaries[self.rank + 1]

    @property
    def owned_range(self) -> tuple[int, int]:
        return self.lo, self.hi

    @property
    def num_owned(self) -> int:
        return self.hi - self.lo

    @property
    def num_local_entries(self) -> int:
        return len(self.neighbors)

    @property
    def num_local_edges(self) -> int:
        """Distinct undirected edges with at least one owned endpoint."""
        src = np.repeat(np.arange(self.lo, self.hi), np.diff(self.row_offsets))
        nb = self.neighbors
        internal = (nb >= self.lo) & (nb < self.hi)
        return int(np.count_nonzero(~internal) + np.count_nonzero(internal & (src < nb)))

    def owns(self, v: int) -> bool:
        return self.lo <= v < self.hi

    def owner(self, v):
        return self.pmap.owner(v)

    def degree(self, v: int) -> int:
        i = v - self.lo
        return int(self.row_offsets[i + 1] - self.row_offsets[i])

    def neighbor_ranks(self) -> list[int]:
        """Ranks owning at least one ghost; both send targets and receive sources."""
        return sorted(set(np.unique(self.pmap.owner(self.ghosts)).tolist())) if len(self.ghosts) else []


def build_local_partition(graph: GlobalGraph, pmap: PartitionMap, rank: int) -> LocalPartition:
    if not 0 <= rank < pmap.num_ranks:
        raise PartitionError(f"rank {rank} outside [0, {pmap.num_ranks})")
    lo, hi = pmap.owned_range(rank)
    start, stop = graph.row_offsets[lo], graph.row_offsets[hi]
    ro = graph.row_offsets[lo:hi + 1] - start
    nb = graph.neighbors[start:stop].copy()
    w = graph.weights[start:stop].copy()
    ghosts = np.unique(nb[(nb < lo) | (nb >= hi)])
    w64 = w.astype(np.float64)
    total = np.cumsum(w64)
    row_start = np.concatenate(([0.0], total))[ro[:-1]]
    row_cum = total - np.repeat(row_start, np.diff(ro))
    return LocalPartition(rank, pmap, ro, nb, w, ghosts, row_cum, total)


def edge_count_stats(parts: Iterable[LocalPartition]) -> dict:
    """Per-rank CSR entry counts and their population standard deviation."""
    counts = np.array([p.num_local_entries for p in parts], dtype=np.float64)
    return {
        "edge_counts": counts.astype(int).tolist(),
        "min": int(counts.min()),
        "max": int(counts.max()),
        "sigma": float(counts.std()),
    }
