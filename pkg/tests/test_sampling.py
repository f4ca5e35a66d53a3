import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distembed.evaluation import chi_square_fit
from distembed.graph import PartitionMap, build_local_partition, from_edges, partition_first_fit
from distembed.sampling import (
    AugmentationError,
    SamplingError,
    SpillBuffer,
    Sync,
    Variant,
    WalkConfig,
    expand_seed_pairs,
    expand_window,
    sample_root_edge,
    seed_count,
    weighted_step,
)

from conftest import hop_distances, path_graph, random_graph, ring, sampler_world, triangle

REMOTE = [Variant.FRESH, Variant.REUSE_SPILL, Variant.REFRESH_SPILL]
WALKING = [Variant.LOCAL, *REMOTE]


def _single(graph):
    return build_local_partition(graph, PartitionMap((0, graph.num_vertices)), 0)


# --- config --------------------------------------------------------------------------------

def test_augmented_variants_force_ibarrier():
    for v in ("aug-single", "aug-pair"):
        assert WalkConfig(variant=v, sync="allreduce").sync is Sync.IBARRIER


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        WalkConfig(variant="bogus")


def test_spill_policy_mapping():
    assert Variant.REUSE_SPILL.spill_policy == "reuse"
    assert Variant.REFRESH_SPILL.spill_policy == "refresh"
    assert Variant.FRESH.spill_policy is None
    with pytest.raises(ValueError):
        SpillBuffer("keep")


# --- roots and steps -------------------------------------------------------------------------

def test_triangle_roots_uniform_over_edges():
    part = _single(triangle())
    passed = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        counts = Counter(frozenset(sample_root_edge(part, rng)) for _ in range(30_000))
        assert len(counts) == 3
        passed += chi_square_fit(list(counts.values()), [1 / 3] * 3) > 0.01
    # a fair sampler fails a 1% test on 2+ of 10 seeds with probability ~0.4%
    assert passed >= 9


def test_single_edge_partition_always_returns_it():
    g = path_graph(3)
    part = build_local_partition(g, PartitionMap((0, 1, 3)), 0)
    rng = np.random.default_rng(1)
    assert {sample_root_edge(part, rng) for _ in range(100)} == {(0, 1)}


def test_root_weights_one_to_three():
    g = from_edges(3, [(0, 1, 1.0), (0, 2, 3.0)])
    part = _single(g)
    rng = np.random.default_rng(2)
    n = 40_000
    heavy = sum(frozenset(sample_root_edge(part, rng)) == {0, 2} for _ in range(n))
    sd = math.sqrt(n * 0.75 * 0.25)
    assert abs(heavy - 0.75 * n) < 3 * sd


def test_empty_partition_has_no_roots():
    g = from_edges(4, [(0, 1)])
    part = build_local_partition(g, PartitionMap((0, 2, 4)), 1)
    with pytest.raises(SamplingError):
        sample_root_edge(part, np.random.default_rng(0))


def test_step_with_one_neighbor():
    part = _single(path_graph(2))
    assert weighted_step(part, 0, np.random.default_rng(0)) == 1


def test_step_uniform_over_four_neighbors():
    g = from_edges(5, [(0, i) for i in range(1, 5)])
    part = _single(g)
    rng = np.random.default_rng(3)
    counts = Counter(weighted_step(part, 0, rng) for _ in range(100_000))
    assert chi_square_fit([counts[i] for i in range(1, 5)], [0.25] * 4) > 0.01


def test_step_weights_two_two_six():
    g = from_edges(4, [(0, 1, 2.0), (0, 2, 2.0), (0, 3, 6.0)])
    part = _single(g)
    rng = np.random.default_rng(4)
    n = 40_000
    hits = sum(weighted_step(part, 0, rng) == 3 for _ in range(n))
    assert abs(hits / n - 0.6) < 3 * math.sqrt(0.24 / n)


def test_step_from_isolated_vertex_is_dead_end():
    g = from_edges(3, [(0, 1)])
    assert weighted_step(_single(g), 2, np.random.default_rng(0)) is None


# --- window expansion -----------------------------------------------------------------------

def test_window_one():
    assert sorted(map(tuple, expand_window([1, 2, 3], 1).tolist())) == [(1, 2), (2, 3)]


def test_window_two():
    assert sorted(map(tuple, expand_window([1, 2, 3], 2).tolist())) == [(1, 2), (1, 3), (2, 3)]


def test_window_two_on_ten_vertices_gives_2n_minus_3():
    assert len(expand_window(list(range(10)), 2)) == 17


@given(st.lists(st.integers(0, 5), max_size=30), st.integers(1, 4))
def test_window_pairs_within_reach(seq, w):
    pairs = expand_window(seq, w, owned_range=(0, 3))
    brute = [(seq[i], seq[j]) for i in range(len(seq)) for j in range(i + 1, min(len(seq), i + w + 1))
             if seq[i] != seq[j] and seq[i] < 3]
    assert sorted(map(tuple, pairs.tolist())) == sorted(brute)


# --- single walks ---------------------------------------------------------------------------

def test_local_walk_on_path_emits_budgeted_edges():
    g = path_graph(5)
    cfg = WalkConfig(steps=4, window=1, variant="local")

    def fn(s):
        n = s.random_walk(s.sample_root())
        return n, np.concatenate(s.local_pairs), int(s.visited.sum())

    n, pairs, visits = sampler_world(g, PartitionMap((0, 5)), cfg, fn)[0]
    assert n == 4 and visits == 4
    assert all(g.has_edge(u, v) for u, v in pairs.tolist())
    # consecutive edges of one walk
    assert all(pairs[i][1] == pairs[i + 1][0] for i in range(3))


@pytest.mark.parametrize("seed", range(10))
def test_triangle_split_over_two_ranks(seed):
    g = triangle()
    cfg = WalkConfig(steps=6, window=1, variant="fresh")

    def fn(s):
        s.random_walk(s.sample_root())
        return int(s.visited.sum()), np.concatenate(s.local_pairs or [np.empty((0, 2), int)]), s.remote_pairs

    res = sampler_world(g, PartitionMap((0, 1, 3)), cfg, fn, seed=seed, schedule="fuzzed")
    visits = sum(r[0] for r in res)
    # Each rank roots one walker. In the superstep that crosses the budget a
    # walker can arrive and step once more, or send a step that lands later.
    walkers = 2
    assert 6 <= visits <= 6 - 1 + 2 * walkers
    for _, local, remote in res:
        for u, v in local.tolist() + remote:
            assert g.has_edge(u, v)


def test_zero_step_budget_sends_only_markers():
    g = triangle()

    def fn(s):
        n = s.random_walk(s.sample_root(), steps=0)
        c = s.ep.counters["setup"]
        return n, len(s.remote_pairs), c["p2p_messages"], c["p2p_markers"]

    res = sampler_world(g, PartitionMap((0, 1, 2, 3)), WalkConfig(variant="fresh"), fn)
    assert res.results == [(0, 0, 0, 2)] * 3


# --- batch generation -----------------------------------------------------------------------

def test_path_batch_of_eight_edges():
    g = path_graph(6)
    cfg = WalkConfig(steps=5, window=1, variant="fresh", batch_size=8)
    pairs = sampler_world(g, PartitionMap((0, 6)), cfg, lambda s: s.generate_pairs())[0]
    assert len(pairs) == 8
    assert all(g.has_edge(u, v) for u, v in pairs.tolist())


@pytest.mark.parametrize("seed", range(3))
def test_sync_modes_pre_prune_counts(seed):
    g = random_graph(80, 160, seed)
    pm = partition_first_fit(g, 4)
    B = 30
    for sync, check in ((Sync.ALLREDUCE, any), (Sync.IBARRIER, all)):
        cfg = WalkConfig(steps=10, variant="fresh", sync=sync, batch_size=B)
        res = sampler_world(g, pm, cfg, lambda s: (s.generate_pairs(), s.pre_prune_counts[-1]), seed=seed)
        assert check(count >= B for _, count in res)
        assert all(len(b) <= B for b, _ in res)


def _ring_spill(variant):
    # one walk of 10 steps on a ring yields exactly 10 window-1 pairs
    cfg = WalkConfig(steps=10, window=1, variant=variant, batch_size=4)

    def fn(s):
        out = []
        for _ in range(3):
            before = s.walks_invoked
            b = s.generate_pairs()
            out.append((len(b), s.walks_invoked - before, len(s.spill)))
        return out

    return sampler_world(ring(12), PartitionMap((0, 12)), cfg, fn)[0]


def test_reuse_spill_skips_walks_while_spill_covers_batch():
    assert _ring_spill("reuse-spill") == [(4, 1, 6), (4, 0, 2), (4, 1, 8)]


def test_refresh_spill_is_single_use():
    assert _ring_spill("refresh-spill") == [(4, 1, 6), (4, 0, 0), (4, 1, 6)]


def test_fresh_discards_excess():
    cfg = WalkConfig(steps=10, window=1, variant="fresh", batch_size=4)

    def fn(s):
        return [(len(s.generate_pairs()), s.walks_invoked) for _ in range(2)]

    assert sampler_world(ring(12), PartitionMap((0, 12)), cfg, fn)[0] == [(4, 1), (4, 2)]


@pytest.mark.parametrize("variant", WALKING)
@pytest.mark.parametrize("sync", list(Sync))
def test_empty_rank_still_participates(variant, sync):
    g = from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 0)])
    cfg = WalkConfig(steps=5, variant=variant, sync=sync, batch_size=4, num_batches=2)
    res = sampler_world(g, PartitionMap((0, 2, 4, 6)), cfg,
                        lambda s: [len(s.next_batch()) for _ in range(2)])
    assert res[2] == [0, 0]
    assert all(n > 0 for n in res[0] + res[1])


@given(st.integers(0, 500), st.integers(1, 5), st.sampled_from(WALKING), st.sampled_from(list(Sync)),
       st.integers(1, 3))
def test_pairs_owned_and_within_window(seed, p, variant, sync, window):
    g = random_graph(24, 30, seed)
    pm = partition_first_fit(g, p)
    cfg = WalkConfig(steps=8, window=window, variant=variant, sync=sync, batch_size=10, num_batches=2)
    res = sampler_world(g, pm, cfg, lambda s: [s.next_batch() for _ in range(2)], seed=seed)
    for rank, batches in enumerate(res):
        lo, hi = pm.owned_range(rank)
        for b in batches:
            assert len(b) <= 10
            for u, v in b.tolist():
                assert lo <= u < hi
                assert 1 <= hop_distances(g, u, window).get(v, window + 1) <= window


# --- augmented variants -----------------------------------------------------------------------

def test_aug_single_pool_and_quiet_training_loop():
    g = random_graph(20, 10, seed=5)
    cfg = WalkConfig(steps=10, variant="aug-single", batch_size=4, num_batches=3)

    def fn(s):
        with s.ep.in_phase("presample"):
            pool = s.augment_single()
        with s.ep.in_phase("sampling"):
            batches = [s.next_batch() for _ in range(3)]
        return len(pool), [len(b) for b in batches], dict(s.ep.counters.get("sampling", {}))

    for pool, sizes, sampling in sampler_world(g, partition_first_fit(g, 2), cfg, fn):
        assert pool >= 12
        assert sizes == [4, 4, 4]
        assert sum(sampling.get(k, 0) for k in ("allreduce", "ibarrier", "alltoallv", "p2p_messages")) == 0


def test_aug_single_refills_from_fresh_roots():
    # rank 0 holds only a 2-vertex component, so rank 1 gets nothing from the long walk
    g = from_edges(22, [(0, 1)] + [(i, i + 1) for i in range(2, 21)] + [(21, 2)])
    cfg = WalkConfig(steps=10, variant="aug-single", batch_size=4, num_batches=3)
    res = sampler_world(g, PartitionMap((0, 2, 22)), cfg,
                        lambda s: (len(s.augment_single()), s.walks_invoked))
    assert all(pool == 12 for pool, _ in res)
    assert res[1][1] > 1


def test_aug_single_one_batch_behaves_like_a_fresh_batch():
    g = random_graph(30, 20, seed=2)
    cfg = WalkConfig(steps=10, variant="aug-single", batch_size=6, num_batches=1)
    pool = sampler_world(g, PartitionMap((0, 30)), cfg, lambda s: s.augment_single())[0]
    assert len(pool) == 6
    assert all(1 <= hop_distances(g, u, 2).get(v, 9) <= 2 for u, v in pool.tolist())


def test_aug_pair_seed_count_and_pool():
    assert seed_count(8, 4) == 8
    g = random_graph(40, 40, seed=1)
    cfg = WalkConfig(steps=10, variant="aug-pair", batch_size=8, num_batches=4)
    res = sampler_world(g, partition_first_fit(g, 4), cfg, lambda s: s.augment_pair())
    sizes = [len(pool) for pool in res]
    assert sizes == [32] * 4
    assert max(sizes) / min(sizes) == 1


def test_five_distinct_seed_vertices_cycle_ten_combinations():
    seeds = np.array([[0, 3], [1, 4], [2, 3]])
    out = expand_seed_pairs(seeds, 3 + 25, owned_range=(0, 3))
    assert out[:3].tolist() == seeds.tolist()
    combos = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]
    expect = []
    for k in range(25):
        a, b = combos[k % 10]
        # (3, 4) has no owned endpoint, so an owned seed vertex takes the first slot
        expect.append((a, b) if a < 3 else ((0, 1, 2)[k % 3], b))
    assert [tuple(x) for x in out[3:].tolist()] == expect


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=6),
       st.integers(0, 40))
def test_expanded_pairs_are_owned(seeds, extra):
    seeds = [(u % 4, v) for u, v in seeds]
    if len({x for pr in seeds for x in pr}) < 2:
        return
    out = expand_seed_pairs(np.array(seeds), len(seeds) + extra, owned_range=(0, 4))
    assert len(out) == len(seeds) + extra
    assert np.all(out[:, 0] < 4)


def test_too_few_seed_vertices():
    with pytest.raises(AugmentationError):
        expand_seed_pairs(np.empty((0, 2), dtype=np.int64), 4, (0, 3))


@pytest.mark.parametrize("variant", [*REMOTE, Variant.AUG_SINGLE, Variant.AUG_PAIR])
def test_batches_do_not_depend_on_schedule(variant):
    g = random_graph(60, 90, seed=9)
    pm = partition_first_fit(g, 4)
    cfg = WalkConfig(steps=12, variant=variant, batch_size=16, num_batches=3, buffer_size=4)

    def fn(s):
        return [s.next_batch().tolist() for _ in range(3)]

    base = sampler_world(g, pm, cfg, fn, seed=1).results
    for ws in range(5):
        assert sampler_world(g, pm, cfg, fn, seed=1, schedule="fuzzed", world_seed=ws).results == base
