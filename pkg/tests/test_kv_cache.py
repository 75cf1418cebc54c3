import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import digest_oracle
from treespec.draft_tree import DraftTree, new_tree
from treespec.errors import CapacityError, ConsistencyViolation
from treespec.kv_cache import (
    EMPTY_DIGEST,
    KVStore,
    append_prefix,
    ensure_capacity,
    extend_digest,
    path_digest,
    reorganize_on_reroot,
)

oracle = digest_oracle()


def expand(tree: DraftTree, store: KVStore, ref: int, children: list[tuple[int, float]]) -> list[int]:
    """Expand ``ref`` the way the draft worker does: digest, slot, children."""
    if ref != tree.root:
        parent = tree.arena[tree.arena[ref].parent]
        pd = store.last_digest() if parent.kv_slot is None else store.slot_digest(parent.kv_slot)
        tree.arena[ref].kv_slot = store.allocate_slot(ref, store.compute_digest(pd, tree.arena[ref].token, "expand"))
    return tree.attach_children(ref, children, len(children))


def check_store(tree: DraftTree, store: KVStore) -> None:
    """Every prefix and slot digest equals the from-scratch oracle."""
    for i, d in enumerate(store.prefix_digests):
        assert d == oracle(store.prefix_tokens[: i + 1])
    base = store.prefix_tokens[:-1]
    owners = {}
    for ref in tree.live_nodes():
        node = tree.arena[ref]
        if node.kv_slot is not None:
            owners[node.kv_slot] = ref
            node_ref, digest = store.tree_slots[node.kv_slot]
            assert node_ref == ref
            assert digest == oracle(base + tree.path_tokens(ref))
        elif node.expanded:
            assert ref == tree.root
    assert sorted(owners) == list(range(store.occupied_slots))


def compaction_example():
    """Prefix (t1, t3, t7, t10); tree under t10."""
    store = KVStore(64)
    store.extend_prefix([1, 3, 7, 10], reason="prefill")
    tree = new_tree(10)
    t11, t12 = expand(tree, store, tree.root, [(11, -0.5), (12, -0.6)])
    expand(tree, store, t11, [(13, -0.3), (14, -0.9)])
    t15, t16 = expand(tree, store, t12, [(15, -0.2), (16, -0.8)])
    t17, t18 = expand(tree, store, t15, [(17, -0.2), (18, -0.4)])
    expand(tree, store, t16, [(19, -0.1)])
    expand(tree, store, t17, [(20, -0.1)])
    expand(tree, store, t18, [(21, -0.1)])
    return tree, store, dict(t11=t11, t12=t12, t15=t15, t16=t16, t17=t17, t18=t18)


def test_append_prefix_basic():
    store = KVStore(8)
    append_prefix(store, 3, extend_digest(EMPTY_DIGEST, 3))
    assert store.prefix_len == 1
    assert store.prefix_digests[0] == oracle([3])


def test_append_prefix_digest_mismatch_is_detectable():
    store = KVStore(8)
    store.extend_prefix([1, 2])
    append_prefix(store, 3, extend_digest(EMPTY_DIGEST, 3))  # wrong parent on purpose
    assert store.prefix_digests[2] != oracle([1, 2, 3])


def test_initial_prefix_digest():
    store = KVStore(8)
    store.extend_prefix([1, 3, 7, 10])
    assert store.prefix_len == 4
    assert store.last_digest() == path_digest([1, 3, 7, 10]) == oracle([1, 3, 7, 10])


def test_compaction_example():
    tree, store, t = compaction_example()
    check_store(tree, store)
    old_slot = {name: tree.arena[ref].kv_slot for name, ref in t.items()}
    before = store.computations.copy()

    outcome = tree.reroot([10, 12, 15])
    plan = reorganize_on_reroot(store, outcome)

    assert store.prefix_tokens == [1, 3, 7, 10, 12, 15]
    assert plan.promote == ((old_slot["t12"], 12), (old_slot["t15"], 15))
    assert plan.extended == ()
    assert dict(plan.moves) == {old_slot["t17"]: 0, old_slot["t18"]: 1}
    assert tree.arena[t["t17"]].kv_slot == 0 and tree.arena[t["t18"]].kv_slot == 1
    assert old_slot["t11"] in plan.frees and old_slot["t16"] in plan.frees
    # promote, moves and frees partition the old slots
    promoted = {s for s, _ in plan.promote}
    moved = {s for s, _ in plan.moves}
    freed = set(plan.frees)
    assert not (promoted & moved or promoted & freed or moved & freed)
    assert promoted | moved | freed == set(range(6))
    # nothing was hashed during the move
    assert store.computations == before
    check_store(tree, store)


def test_fresh_outcome_frees_everything():
    tree, store, _ = compaction_example()
    occupied = store.occupied_slots
    plan = reorganize_on_reroot(store, tree.reroot([10, 12, 40]))
    assert plan.moves == ()
    assert set(plan.frees) == set(range(occupied)) - {s for s, _ in plan.promote}
    assert store.occupied_slots == 0
    assert store.prefix_tokens[-2:] == [12, 40]
    assert plan.extended == (40,)
    check_store(tree, store)


def test_unexpanded_chain_tokens_are_extended():
    tree, store, _ = compaction_example()
    # t13 exists but was never expanded; it becomes the new root
    before = store.computations["extend"]
    plan = reorganize_on_reroot(store, tree.reroot([10, 11, 13]))
    assert plan.extended == (13,)
    assert store.computations["extend"] == before + 1
    assert store.occupied_slots == 0
    check_store(tree, store)


def test_reorganize_detects_foreign_slot():
    tree, store, t = compaction_example()
    outcome = tree.reroot([10, 12, 15])
    store.tree_slots[outcome.verified[0].kv_slot] = (999, b"x" * 16)
    with pytest.raises(ConsistencyViolation):
        reorganize_on_reroot(store, outcome)


def test_ensure_capacity():
    store = KVStore(8)
    store.extend_prefix([1, 2, 3, 4])
    ensure_capacity(store, 4)
    store.extend_prefix([5, 6])
    with pytest.raises(CapacityError, match="prefix=6"):
        ensure_capacity(store, 4)


def test_capacity_counts_tree_slots():
    store = KVStore(3)
    store.extend_prefix([1, 2])
    store.allocate_slot(0, b"\0" * 16)
    with pytest.raises(CapacityError):
        store.allocate_slot(1, b"\0" * 16)


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**32))
def test_random_reroot_zero_recompute(seed):
    rng = random.Random(seed)
    store = KVStore(4096)
    prompt = [rng.randrange(50) for _ in range(rng.randint(1, 6))]
    store.extend_prefix(prompt, reason="prefill")
    tree = new_tree(prompt[-1])
    for _ in range(rng.randint(1, 40)):
        frontier = tree.frontier()
        leaf = rng.choice(frontier)
        toks = rng.sample(range(50), rng.randint(1, 3))
        expand(tree, store, leaf, [(tok, -rng.random() - 1e-9) for tok in toks])
    check_store(tree, store)

    path = [tree.arena[tree.root].token]
    cur = tree.root
    while tree.arena[cur].children and rng.random() < 0.85:
        cur = rng.choice(tree.arena[cur].children)
        path.append(tree.arena[cur].token)
    if len(path) == 1 or rng.random() < 0.3:
        taken = {tree.arena[c].token for c in tree.arena[cur].children}
        path.append(next(x for x in range(60) if x not in taken))

    before = store.computations.copy()
    outcome = tree.reroot(path)
    retained_expanded = len(outcome.retained_slots)
    plan = reorganize_on_reroot(store, outcome)

    assert len(plan.moves) == retained_expanded
    assert store.occupied_slots == retained_expanded
    # only never-expanded verified tokens were hashed
    new = store.computations - before
    assert sum(new.values()) == len(plan.extended)
    assert store.prefix_tokens == prompt + path[1:]
    check_store(tree, store)
