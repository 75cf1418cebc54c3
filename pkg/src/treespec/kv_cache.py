"""Two-region KV store: a verified prefix followed by compacted tree slots.

Real KV tensors are replaced by 128-bit path digests.  A digest is a pure
function of the token path ending at a position, so "the cache is consistent"
becomes an exact equality check against :func:`path_digest`.

Every digest the store produces goes through :meth:`KVStore.compute_digest`,
which tallies computations by reason.  Moving an entry never computes.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from treespec.draft_tree import DraftTree, RerootOutcome
from treespec.errors import CapacityError, ConsistencyViolation

DIGEST_BYTES = 16
EMPTY_DIGEST = hashlib.blake2b(b"", digest_size=DIGEST_BYTES, person=b"treespec-path").digest()


def extend_digest(parent: bytes, token: int) -> bytes:
    return hashlib.blake2b(
        parent + int(token).to_bytes(4, "little"), digest_size=DIGEST_BYTES
    ).digest()


def path_digest(tokens: Iterable[int]) -> bytes:
    """Digest of a full token path, computed from scratch."""
    d = EMPTY_DIGEST
    for t in tokens:
        d = extend_digest(d, t)
    return d


@dataclass(frozen=True)
class CompactionPlan:
    promote: tuple[tuple[int, int], ...]
    extended: tuple[int, ...]
    moves: tuple[tuple[int, int], ...]
    frees: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "promote": [list(p) for p in self.promote],
            "extended": list(self.extended),
            "moves": [list(m) for m in self.moves],
            "frees": list(self.frees),
        }


class KVStore:
    """Per-model cache owned by exactly one worker."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.prefix_tokens: list[int] = []
        self.prefix_digests: list[bytes] = []
        # always dense: compaction rebuilds the list, so there are no holes
        self.tree_slots: list[tuple[int, bytes]] = []
        self.computations: Counter[str] = Counter()

    @property
    def prefix_len(self) -> int:
        return len(self.prefix_tokens)

    @property
    def occupied_slots(self) -> int:
        return len(self.tree_slots)

    @property
    def occupancy(self) -> int:
        return self.prefix_len + self.occupied_slots

    @property
    def headroom(self) -> int:
        return self.capacity - self.occupancy

    def last_digest(self) -> bytes:
        return self.prefix_digests[-1] if self.prefix_digests else EMPTY_DIGEST

    def compute_digest(self, parent: bytes, token: int, reason: str) -> bytes:
        self.computations[reason] += 1
        return extend_digest(parent, token)

    def ensure_capacity(self, needed: int) -> None:
        if self.occupancy + needed > self.capacity:
            raise CapacityError(
                f"need {needed} more entries but store holds prefix={self.prefix_len} "
                f"+ tree={self.occupied_slots} of capacity {self.capacity}"
            )

    def append_prefix(self, token: int, digest: bytes) -> None:
        self.ensure_capacity(1)
        self.prefix_tokens.append(int(token))
        self.prefix_digests.append(digest)

    def extend_prefix(self, tokens: Sequence[int], reason: str = "extend") -> None:
        """Compute and append digests for ``tokens`` continuing the prefix."""
        self.ensure_capacity(len(tokens))
        for t in tokens:
            self.append_prefix(t, self.compute_digest(self.last_digest(), t, reason))

    def allocate_slot(self, node: int, digest: bytes) -> int:
        self.ensure_capacity(1)
        self.tree_slots.append((node, digest))
        return len(self.tree_slots) - 1

    def slot_digest(self, slot: int) -> bytes:
        return self.tree_slots[slot][1]


def append_prefix(store: KVStore, token: int, digest: bytes) -> None:
    store.append_prefix(token, digest)


def ensure_capacity(store: KVStore, needed: int) -> None:
    store.ensure_capacity(needed)


def reorganize_on_reroot(store: KVStore, outcome: RerootOutcome) -> CompactionPlan:
    """Move verified tree entries into the prefix and compact the survivors.

    Verified tokens whose node owned a slot are moved into the prefix.  Those
    never expanded (including a terminal token absent from the tree) get their
    digest by extending the prefix.  Expanded nodes of the retained subtree
    keep their digests and are packed into slots ``0..n-1`` in old-slot order,
    which is topological because parents are always expanded before children.
    """
    if not store.prefix_tokens:
        raise ConsistencyViolation("cannot extend an empty prefix")
    occupied = set(range(len(store.tree_slots)))

    promote: list[tuple[int, int]] = []
    extended: list[int] = []
    used: set[int] = set()
    new_prefix: list[tuple[int, bytes]] = []
    parent = store.last_digest()
    for entry in outcome.verified:
        if entry.kv_slot is not None:
            slot_entry = store.tree_slots[entry.kv_slot]
            if slot_entry[0] != entry.node:
                raise ConsistencyViolation(
                    f"slot {entry.kv_slot} does not hold verified node {entry.node}"
                )
            digest = slot_entry[1]
            promote.append((entry.kv_slot, entry.token))
            used.add(entry.kv_slot)
        else:
            digest = store.compute_digest(parent, entry.token, "extend")
            extended.append(entry.token)
        new_prefix.append((entry.token, digest))
        parent = digest

    moves: list[tuple[int, int]] = []
    new_slots: list[tuple[int, bytes]] = []
    for node, old in sorted(outcome.retained_slots, key=lambda ns: ns[1]):
        slot_entry = store.tree_slots[old]
        if slot_entry[0] != node:
            raise ConsistencyViolation(f"slot {old} does not hold retained node {node}")
        moves.append((old, len(new_slots)))
        new_slots.append(slot_entry)
        used.add(old)

    frees = tuple(sorted(occupied - used))
    store.tree_slots = new_slots
    for token, digest in new_prefix:
        store.prefix_tokens.append(token)
        store.prefix_digests.append(digest)
    if store.occupancy > store.capacity:
        raise CapacityError(
            f"reorganized store holds {store.occupancy} entries, capacity {store.capacity}"
        )

    tree: DraftTree | None = outcome.tree
    if tree is not None and outcome.is_retained:
        for _, dst in moves:
            tree.arena[store.tree_slots[dst][0]].kv_slot = dst
    return CompactionPlan(tuple(promote), tuple(extended), tuple(moves), frees)
