import random

import pytest

from lorakvsim.blockpool import BlockPool, PoolConfig, Tier
from lorakvsim.deptree import (
    ClosureViolation, DependencyTree, PinUnderflowError,
)


def make(hbm=1000, main=1000):
    return DependencyTree(), BlockPool(PoolConfig(hbm_blocks=hbm,
                                                  main_blocks=main))


def add_lora(tree, pool, lora_id, blocks=2, tier=Tier.HBM):
    node = tree.ensure_lora(lora_id, rank=32, size_blocks=blocks)
    if node.tier is None and tier is not None:
        node.alloc = pool.allocate(tier, blocks, owner=f"l{lora_id}")
        tree.commit_tier(node, tier)
    return node


def insert_chain(tree, pool, lora, keys, now=0.0, pin=False):
    parent = lora
    nodes = []
    for k in keys:
        child = parent.children.get(k)
        if child is None:
            child = tree.insert_kv(parent, k, now, pool, pin=pin)
        parent = child
        nodes.append(child)
    return nodes


# ---------------------------------------------------------------------------
# construction and matching

def test_ensure_lora_idempotent():
    tree, pool = make()
    a = tree.ensure_lora(7, 32, 2)
    b = tree.ensure_lora(7, 32, 2)
    assert a is b
    assert a.parent is tree.root


def test_many_loras_on_layer_two():
    tree, pool = make()
    for i in range(100):
        tree.ensure_lora(i, 32, 1)
    assert len(tree.root.children) == 100


def test_match_empty_subtree():
    tree, pool = make()
    add_lora(tree, pool, 1)
    m = tree.match_query(1, [10, 11, 12], now=1.0)
    assert m.matched_kv == []
    assert m.miss_blocks == 3


def test_match_full_hit_after_insert():
    tree, pool = make()
    lora = add_lora(tree, pool, 1)
    insert_chain(tree, pool, lora, [10, 11, 12])
    m = tree.match_query(1, [10, 11, 12], now=2.0)
    assert len(m.matched_kv) == 3
    assert m.miss_blocks == 0
    assert m.hbm_hit_blocks == 3


def test_match_shared_prefix():
    tree, pool = make()
    lora = add_lora(tree, pool, 1)
    insert_chain(tree, pool, lora, [1, 2, 3, 4])
    # second sequence shares first 3 blocks
    m = tree.match_query(1, [1, 2, 3, 99, 100], now=2.0)
    assert len(m.matched_kv) == 3


def test_kv_namespaces_are_per_lora():
    tree, pool = make()
    l1 = add_lora(tree, pool, 1)
    add_lora(tree, pool, 2)
    insert_chain(tree, pool, l1, [10, 11])
    m = tree.match_query(2, [10, 11], now=1.0)
    assert m.matched_kv == []


def test_match_updates_stats():
    tree, pool = make()
    lora = add_lora(tree, pool, 1)
    nodes = insert_chain(tree, pool, lora, [10])
    v = nodes[0].visits
    tree.match_query(1, [10], now=5.0)
    assert nodes[0].visits == v + 1
    assert nodes[0].last_visit == 5.0
    tree.match_query(1, [10], now=6.0, update_stats=False)
    assert nodes[0].visits == v + 1


def test_insert_under_main_parent_rejected():
    tree, pool = make()
    lora = add_lora(tree, pool, 1, tier=Tier.MAIN)
    with pytest.raises(ClosureViolation):
        tree.insert_kv(lora, 10, 0.0, pool)


def test_insert_chain_allocates_blocks():
    tree, pool = make()
    lora = add_lora(tree, pool, 1, blocks=2)
    used = pool.used_blocks(Tier.HBM)
    insert_chain(tree, pool, lora, list(range(5)))
    assert pool.used_blocks(Tier.HBM) == used + 5


# ---------------------------------------------------------------------------
# prefix-match oracle

def brute_force_match(stored_sequences, query):
    """Longest block-aligned common prefix against any stored sequence."""
    best = 0
    for seq in stored_sequences:
        k = 0
        while k < min(len(seq), len(query)) and seq[k] == query[k]:
            k += 1
        best = max(best, k)
    return best


def test_match_oracle_random_interleavings():
    for seed in range(5):
        rng = random.Random(seed)
        tree, pool = make(hbm=100000)
        lora = add_lora(tree, pool, 1, blocks=1)
        stored = []
        for _ in range(1000):
            length = rng.randint(1, 64)
            if stored and rng.random() < 0.6:
                base = rng.choice(stored)
                cut = rng.randint(0, min(len(base), length))
                seq = list(base[:cut]) + [rng.randrange(50)
                                         for _ in range(length - cut)]
            else:
                seq = [rng.randrange(50) for _ in range(length)]
            if rng.random() < 0.5:
                insert_chain(tree, pool, lora, seq)
                stored.append(seq)
            m = tree.match_query(1, seq, now=0.0, update_stats=False)
            assert len(m.matched_kv) == brute_force_match(stored, seq)


# ---------------------------------------------------------------------------
# candidates and residency moves

def test_out_candidates_leaf_only():
    tree, pool = make()
    lora = add_lora(tree, pool, 1)
    a, b = insert_chain(tree, pool, lora, [1, 2])
    assert tree.swap_out_candidates() == [b.id]
    tree.pin(b)
    assert tree.swap_out_candidates() == []
    tree.unpin(b)
    tree.apply_move(b, Tier.MAIN, pool)
    tree.apply_move(a, Tier.MAIN, pool)
    # all KV gone from HBM -> the adapter itself is now a leaf candidate
    assert tree.swap_out_candidates() == [lora.id]


def test_in_candidates_frontier():
    tree, pool = make()
    lora = add_lora(tree, pool, 1)
    a, b = insert_chain(tree, pool, lora, [1, 2])
    tree.apply_move(b, Tier.MAIN, pool)
    tree.apply_move(a, Tier.MAIN, pool)
    tree.apply_move(lora, Tier.MAIN, pool)
    assert tree.swap_in_candidates() == [lora.id]
    tree.apply_move(lora, Tier.HBM, pool)
    assert tree.swap_in_candidates() == [a.id]


def test_apply_move_closure_violations():
    tree, pool = make()
    lora = add_lora(tree, pool, 1)
    a, b = insert_chain(tree, pool, lora, [1, 2])
    with pytest.raises(ClosureViolation):
        tree.apply_move(a, Tier.MAIN, pool)       # child b still in HBM
    tree.apply_move(b, Tier.MAIN, pool)
    tree.apply_move(a, Tier.MAIN, pool)
    with pytest.raises(ClosureViolation):
        tree.apply_move(b, Tier.HBM, pool)        # parent a not resident


def test_apply_move_updates_pool():
    tree, pool = make(hbm=10, main=10)
    lora = add_lora(tree, pool, 1, blocks=2)
    (a,) = insert_chain(tree, pool, lora, [1])
    hbm_before = pool.free_blocks(Tier.HBM)
    tree.apply_move(a, Tier.MAIN, pool)
    assert pool.free_blocks(Tier.HBM) == hbm_before + 1
    assert pool.used_blocks(Tier.MAIN) == 1


def test_discard_leaf():
    tree, pool = make()
    lora = add_lora(tree, pool, 1)
    a, b = insert_chain(tree, pool, lora, [1, 2])
    with pytest.raises(ClosureViolation):
        tree.apply_move(a, None, pool)     # has a child
    tree.apply_move(b, Tier.MAIN, pool)
    tree.apply_move(b, None, pool)
    assert b.id not in tree.nodes
    assert pool.used_blocks(Tier.MAIN) == 0


def test_pin_underflow():
    tree, pool = make()
    lora = add_lora(tree, pool, 1)
    with pytest.raises(PinUnderflowError):
        tree.unpin(lora)


def test_random_valid_moves_preserve_closure_and_candidates():
    rng = random.Random(3)
    tree, pool = make(hbm=500, main=500)
    loras = [add_lora(tree, pool, i, blocks=1) for i in range(4)]
    for lora in loras:
        for _ in range(3):
            keys = [rng.randrange(6) for _ in range(rng.randint(1, 6))]
            insert_chain(tree, pool, lora, keys)
    for step in range(5000):
        if rng.random() < 0.5:
            cands = tree.swap_out_candidates()
            if cands:
                tree.apply_move(tree.nodes[rng.choice(cands)], Tier.MAIN, pool)
        else:
            cands = tree.swap_in_candidates()
            if cands:
                tree.apply_move(tree.nodes[rng.choice(cands)], Tier.HBM, pool)
        assert tree.check_closure()
        assert tree.invalid_kv_fraction() == 0.0
        if step % 250 == 0:
            assert tree.swap_out_candidates() == tree.scan_out_candidates()
            assert tree.swap_in_candidates() == tree.scan_in_candidates()
            tree.check_connectivity()
            pool.check_conservation()


# ---------------------------------------------------------------------------
# invalid-KV accounting

def test_invalid_fraction_definition():
    tree, pool = make()
    l1 = add_lora(tree, pool, 1)
    l2 = add_lora(tree, pool, 2)
    insert_chain(tree, pool, l1, [1, 2])
    insert_chain(tree, pool, l2, [1, 2])
    assert tree.invalid_kv_fraction() == 0.0
    # simulate a dependency-unaware eviction of adapter 1
    tree.commit_tier(l1, Tier.MAIN)
    assert tree.invalid_kv_fraction() == pytest.approx(0.5)
    assert tree.invalid_kv_fraction_scan() == pytest.approx(0.5)
    tree.commit_tier(l1, Tier.HBM)
    assert tree.invalid_kv_fraction() == 0.0


def test_invalid_fraction_zero_over_zero():
    tree, pool = make()
    assert tree.invalid_kv_fraction() == 0.0


def test_invalid_fraction_matches_scan_on_random_states():
    rng = random.Random(11)
    tree, pool = make(hbm=2000, main=2000)
    loras = [add_lora(tree, pool, i) for i in range(5)]
    for lora in loras:
        for _ in range(4):
            insert_chain(tree, pool, lora,
                         [rng.randrange(8) for _ in range(rng.randint(1, 8))])
    kvs = [n for n in tree.nodes.values() if n.kind == "kv"]
    for _ in range(2000):
        node = rng.choice(loras + kvs)
        # dependency-unaware residency flips, as a baseline would do
        target = Tier.MAIN if node.tier is Tier.HBM else Tier.HBM
        tree.commit_tier(node, target)
        assert tree.invalid_kv_fraction() == pytest.approx(
            tree.invalid_kv_fraction_scan())


def test_dump_is_line_oriented_and_stable():
    tree, pool = make()
    lora = add_lora(tree, pool, 1)
    insert_chain(tree, pool, lora, [5, 6])
    d1 = tree.dump()
    d2 = tree.dump()
    assert d1 == d2
    assert len(d1.splitlines()) == 3
    assert "lora" in d1 and "kv" in d1
