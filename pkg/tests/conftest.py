import numpy as np
import pytest
from hypothesis import settings

from distembed.graph import from_edges

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def triangle():
    return from_edges(3, [(0, 1), (1, 2), (2, 0)])


def path_graph(n):
    return from_edges(n, [(i, i + 1) for i in range(n - 1)])


def ring(n):
    return from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def star(leaves):
    return from_edges(leaves + 1, [(0, i) for i in range(1, leaves + 1)])


def random_graph(n, m, seed=0, weighted=False):
    """Connected-ish random graph: a ring plus ``m`` random chords."""
    rng = np.random.default_rng(seed)
    edges = [(i, (i + 1) % n, 1.0) for i in range(n)]
    for _ in range(m):
        a, b = rng.integers(0, n, 2)
        edges.append((int(a), int(b), float(rng.uniform(0.5, 3.0)) if weighted else 1.0))
    return from_edges(n, edges)


def clustered_graph(n, classes, degree, intra, seed=0):
    """Planted partition with class-contiguous ids; returns (graph, labels)."""
    rng = np.random.default_rng(seed)
    labels = np.sort(rng.integers(0, classes, n))
    members = [np.flatnonzero(labels == c) for c in range(classes)]
    edges = set()
    target = n * degree // 2
    while len(edges) < target:
        u = int(rng.integers(n))
        if rng.random() < intra:
            pool = members[labels[u]]
            v = int(pool[rng.integers(len(pool))])
        else:
            v = int(rng.integers(n))
        if u != v:
            edges.add((min(u, v), max(u, v)))
    return from_edges(n, sorted(edges)), labels


@pytest.fixture
def tri():
    return triangle()


def sampler_world(graph, pmap, config, fn, seed=0, schedule="deterministic", world_seed=None):
    """Run ``fn(sampler)`` on every rank of a simulated world."""
    from distembed.graph import build_local_partition
    from distembed.sampling import PairSampler
    from distembed.training import rank_streams
    from distembed.transport import run_world

    def prog(rank, ep):
        part = build_local_partition(graph, pmap, rank)
        nbrs = part.neighbor_ranks()
        ep.set_neighbors(nbrs, nbrs)
        return fn(PairSampler(part, ep, config, rank_streams(seed, rank)[0]))

    return run_world(pmap.num_ranks, prog, seed=seed if world_seed is None else world_seed,
                     schedule=schedule)


def hop_distances(graph, source, limit):
    """BFS distances from ``source`` up to ``limit`` hops."""
    dist = {source: 0}
    frontier = [source]
    for d in range(1, limit + 1):
        nxt = []
        for x in frontier:
            for y in graph.row(x).tolist():
                if y not in dist:
                    dist[y] = d
                    nxt.append(y)
        frontier = nxt
    return dist


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, status: str, detail: str) -> str:
    line = f"criterion {number:2d}: {status:7s} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
