"""Speculative token tree owned by the draft worker.

The tree is an arena of :class:`TreeNode` records.  Each node carries the
draft model's log-probability for its token (``value``) and the cumulative
log-probability of its root path (``weight``).  Unexpanded leaves sit in a
max-weight frontier so the draft can always grow the most likely part of the
tree next.

Besides growth, the tree answers three questions for the rest of the system:

* which ``bs`` nodes go to the target for verification (:meth:`DraftTree.select_subgraph`),
* which cached positions each leaf may attend to (:func:`build_nonsquare_mask`),
* what survives once the target has verified a path (:meth:`DraftTree.reroot`).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from treespec.errors import ConsistencyViolation, ContractViolation

ROOT = -1
"""Parent position marker for the first entry of a :class:`Subgraph`."""


@dataclass(slots=True)
class TreeNode:
    token: int
    parent: int | None
    value: float = 0.0
    weight: float = 0.0
    children: list[int] = field(default_factory=list)
    expanded: bool = False
    kv_slot: int | None = None
    alive: bool = True


@dataclass(frozen=True)
class Subgraph:
    """Ancestor-closed, topologically ordered selection sent to the target.

    ``nodes`` holds ``(node_ref, token, parent_pos)`` triples where
    ``parent_pos`` indexes into ``nodes`` itself (``ROOT`` for the first entry).
    ``node_ref`` is ``-1`` for subgraphs rebuilt from the wire.
    """

    nodes: tuple[tuple[int, int, int], ...]

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def tokens(self) -> list[int]:
        return [tok for _, tok, _ in self.nodes]

    @property
    def parents(self) -> list[int]:
        return [p for _, _, p in self.nodes]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "Subgraph":
        """Build from ``(token, parent_pos)`` pairs, validating structure."""
        nodes = tuple((-1, int(tok), int(parent)) for tok, parent in pairs)
        sub = cls(nodes)
        sub.validate()
        return sub

    def validate(self) -> None:
        if not self.nodes:
            raise ContractViolation("subgraph is empty")
        if self.nodes[0][2] != ROOT:
            raise ContractViolation("first subgraph entry must be the root")
        for i, (_, _, parent) in enumerate(self.nodes[1:], start=1):
            if not 0 <= parent < i:
                raise ContractViolation(
                    f"subgraph entry {i} has parent position {parent}; parents must precede children"
                )

    def ancestors_or_self(self, i: int) -> list[int]:
        out = []
        while i != ROOT:
            out.append(i)
            i = self.nodes[i][2]
        return out[::-1]

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "parents": self.parents}


@dataclass(frozen=True)
class TreeMask:
    """Row-major visibility matrix.

    Columns are ``prefix_len`` always-visible prefix positions followed by the
    non-prefix key positions.  The last ``rows`` columns are the queried
    positions themselves, in row order.
    """

    bits: np.ndarray
    prefix_len: int

    @property
    def rows(self) -> int:
        return int(self.bits.shape[0])

    @property
    def cols(self) -> int:
        return int(self.bits.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def visible(self, row: int) -> set[int]:
        return set(np.flatnonzero(self.bits[row]).tolist())


@dataclass(frozen=True)
class VerifiedEntry:
    """A newly verified token as seen by the draft tree before re-rooting."""

    token: int
    node: int | None
    kv_slot: int | None


@dataclass(frozen=True)
class RerootOutcome:
    """Result of walking the tree along a verified path.

    ``chain`` lists the pre-reroot nodes on the matched path that do not
    survive as tree nodes (old root included).  ``retained`` is the surviving
    subtree (new root first) and ``discarded`` everything else; together they
    partition the pre-reroot node set.  ``verified`` describes every token of
    the path after the old root, which kv_cache needs to extend the prefix.
    ``retained_slots`` lists ``(node, old_slot)`` for the surviving expanded
    nodes below the new root.
    """

    kind: str
    new_root_token: int
    chain: tuple[int, ...]
    retained: tuple[int, ...]
    discarded: tuple[int, ...]
    verified: tuple[VerifiedEntry, ...]
    retained_slots: tuple[tuple[int, int], ...]
    tree: "DraftTree | None" = field(default=None, compare=False, repr=False)

    @property
    def is_retained(self) -> bool:
        return self.kind == "retained"


class DraftTree:
    """Arena-backed token tree with a max-weight expansion frontier."""

    def __init__(self, root_token: int):
        self.epoch = 0
        self._reset(root_token)

    def _reset(self, root_token: int) -> None:
        self.arena: list[TreeNode] = [TreeNode(token=int(root_token), parent=None)]
        self.root = 0
        self._frontier: list[tuple[float, int]] = [(-0.0, 0)]
        self._in_frontier: set[int] = {0}
        self._live: set[int] = {0}

    # -- basic accessors -------------------------------------------------

    @property
    def size(self) -> int:
        return len(self._live)

    def __len__(self) -> int:
        return len(self._live)

    def node(self, ref: int) -> TreeNode:
        return self.arena[ref]

    def live_nodes(self) -> list[int]:
        return sorted(self._live)

    def frontier(self) -> list[int]:
        """Current frontier members, highest weight first."""
        return [i for _, i in sorted(self._frontier) if i in self._in_frontier]

    def path_tokens(self, ref: int) -> list[int]:
        """Tokens from the root down to ``ref`` inclusive."""
        out = []
        cur: int | None = ref
        while cur is not None:
            out.append(self.arena[cur].token)
            cur = self.arena[cur].parent
        return out[::-1]

    def ancestors(self, ref: int) -> list[int]:
        """Strict ancestors of ``ref``, root first."""
        out = []
        cur = self.arena[ref].parent
        while cur is not None:
            out.append(cur)
            cur = self.arena[cur].parent
        return out[::-1]

    def subtree(self, ref: int) -> list[int]:
        """``ref`` and all its descendants in arena (hence topological) order."""
        out, stack = [], [ref]
        while stack:
            cur = stack.pop()
            out.append(cur)
            stack.extend(self.arena[cur].children)
        return sorted(out)

    def slot_tokens(self) -> list[int]:
        """Tokens of the live nodes that own a KV slot, ordered by slot."""
        arena = self.arena
        owned = sorted((arena[i].kv_slot, arena[i].token) for i in self._live if arena[i].kv_slot is not None)
        return [tok for _, tok in owned]

    # -- growth ----------------------------------------------------------

    def pop_frontier(self, w: int) -> list[int]:
        """Remove and return up to ``w`` unexpanded leaves of highest weight.

        Ties break toward the earlier arena index.  An empty frontier yields
        an empty list.
        """
        if w < 1:
            raise ContractViolation(f"w must be >= 1, got {w}")
        out: list[int] = []
        while self._frontier and len(out) < w:
            _, ref = heapq.heappop(self._frontier)
            if ref in self._in_frontier:
                self._in_frontier.discard(ref)
                out.append(ref)
        return out

    def attach_children(
        self,
        parent: int,
        child_logprobs: Sequence[tuple[int, float]] | np.ndarray,
        k_children: int,
    ) -> list[int]:
        """Mark ``parent`` expanded and attach its top-``k_children`` tokens.

        ``child_logprobs`` is either ``(token, logprob)`` pairs or a dense
        array indexed by token id.  Ranking is by log-probability, ties toward
        the lower token id.
        """
        node = self.arena[parent]
        if not node.alive:
            raise ContractViolation(f"node {parent} is not live")
        if node.expanded:
            raise ContractViolation(f"node {parent} is already expanded")
        if isinstance(child_logprobs, np.ndarray):
            lp = child_logprobs
            order = np.argsort(-lp, kind="stable")[:k_children]
            picks = [(int(t), float(lp[t])) for t in order]
        else:
            picks = sorted(child_logprobs, key=lambda tv: (-tv[1], tv[0]))[:k_children]

        node.expanded = True
        self._in_frontier.discard(parent)
        arena, frontier, in_frontier, live = self.arena, self._frontier, self._in_frontier, self._live
        children = node.children
        base = node.weight
        refs = []
        for tok, lp_val in picks:
            if lp_val > 0:
                raise ContractViolation(f"log-probability {lp_val} > 0 for token {tok}")
            ref = len(arena)
            weight = base + lp_val
            arena.append(TreeNode(int(tok), parent, float(lp_val), weight))
            children.append(ref)
            heapq.heappush(frontier, (-weight, ref))
            in_frontier.add(ref)
            live.add(ref)
            refs.append(ref)
        return refs

    # -- selection -------------------------------------------------------

    def select_subgraph(self, bs: int) -> Subgraph:
        """Root plus the ``bs - 1`` heaviest non-root nodes, in arena order."""
        if bs < 1:
            raise ContractViolation(f"bs must be >= 1, got {bs}")
        if self.size < bs:
            raise ContractViolation(f"tree has {self.size} nodes, need at least bs={bs}")
        candidates = [i for i in self._live if i != self.root]
        candidates.sort(key=lambda i: (-self.arena[i].weight, i))
        chosen = sorted([self.root, *candidates[: bs - 1]])
        pos = {ref: p for p, ref in enumerate(chosen)}
        nodes = []
        for ref in chosen:
            n = self.arena[ref]
            if ref == self.root:
                nodes.append((ref, n.token, ROOT))
            else:
                if n.parent not in pos:
                    raise ConsistencyViolation(f"subgraph is not ancestor-closed at node {ref}")
                nodes.append((ref, n.token, pos[n.parent]))
        return Subgraph(tuple(nodes))

    # -- re-rooting ------------------------------------------------------

    def reroot(self, output_path: Sequence[int]) -> RerootOutcome:
        """Walk ``output_path`` from the root and re-root at its last token.

        If the final token is already a node, that node's subtree survives
        (``retained``); otherwise the whole tree is replaced by a fresh
        single-node tree rooted at the final token.
        """
        path = [int(t) for t in output_path]
        if len(path) < 2:
            raise ContractViolation("output path needs the root and at least one new token")
        root = self.arena[self.root]
        if path[0] != root.token:
            raise ConsistencyViolation(
                f"verified path starts with {path[0]} but draft root is {root.token}"
            )

        chain = [self.root]
        cur = self.root
        matched_all = True
        for i, tok in enumerate(path[1:], start=1):
            nxt = next((c for c in self.arena[cur].children if self.arena[c].token == tok), None)
            if nxt is None:
                if i != len(path) - 1:
                    raise ConsistencyViolation(
                        f"verified token {tok} at position {i} is missing from the draft tree"
                    )
                matched_all = False
                break
            chain.append(nxt)
            cur = nxt

        verified = []
        for i, tok in enumerate(path[1:], start=1):
            if i < len(chain):
                n = self.arena[chain[i]]
                verified.append(VerifiedEntry(tok, chain[i], n.kv_slot))
            else:
                verified.append(VerifiedEntry(tok, None, None))

        live = set(self.live_nodes())
        if matched_all:
            new_root = chain[-1]
            chain = chain[:-1]
            keep = self.subtree(new_root)
        else:
            new_root = None
            keep = []
        keep_set = set(keep)
        discarded = sorted(live - keep_set - set(chain))
        retained_slots = tuple(
            (ref, self.arena[ref].kv_slot)
            for ref in keep
            if ref != new_root and self.arena[ref].kv_slot is not None
        )
        outcome = RerootOutcome(
            kind="retained" if matched_all else "fresh",
            new_root_token=path[-1],
            chain=tuple(chain),
            retained=tuple(keep),
            discarded=tuple(discarded),
            verified=tuple(verified),
            retained_slots=retained_slots,
            tree=self,
        )

        if matched_all:
            self._promote(new_root, keep_set)
        else:
            self.epoch += 1
            self._reset(path[-1])
        return outcome

    def _promote(self, new_root: int, keep: set[int]) -> None:
        for i in self._live - keep:
            self.arena[i].alive = False
        self._live = set(keep)
        rn = self.arena[new_root]
        rn.parent = None
        rn.value = 0.0
        rn.weight = 0.0
        # new root's KV now lives at the end of the verified prefix
        rn.kv_slot = None
        self.root = new_root
        for ref in sorted(keep):
            if ref == new_root:
                continue
            n = self.arena[ref]
            n.weight = self.arena[n.parent].weight + n.value
        self._in_frontier = {ref for ref in keep if not self.arena[ref].expanded}
        self._frontier = [(-self.arena[ref].weight, ref) for ref in self._in_frontier]
        heapq.heapify(self._frontier)

    # -- export ----------------------------------------------------------

    def to_json(self) -> dict:
        live = self.live_nodes()
        index = {ref: i for i, ref in enumerate(live)}
        nodes = []
        for ref in live:
            n = self.arena[ref]
            nodes.append(
                {
                    "token": n.token,
                    "parent": None if ref == self.root else index[n.parent],
                    "weight": n.weight,
                    "expanded": n.expanded,
                }
            )
        return {"epoch": self.epoch, "root": index[self.root], "nodes": nodes}


def new_tree(root_token: int) -> DraftTree:
    return DraftTree(root_token)


def build_nonsquare_mask(tree: DraftTree, leaves: Sequence[int], prefix_len: int) -> TreeMask:
    """Visibility of ``leaves`` over the prefix, the cached tree slots and themselves.

    Columns: ``prefix_len`` prefix positions, one per occupied KV slot (in slot
    order), then one per leaf.  An expanded node without a slot is only allowed
    for the root, whose state is the final prefix position.
    """
    arena = tree.arena
    slots = sorted(arena[r].kv_slot for r in tree._live if arena[r].kv_slot is not None)
    n_slots = len(slots)
    if slots != list(range(n_slots)):
        raise ContractViolation("tree KV slots are not contiguous")

    leaves = list(leaves)
    leaf_set = set(leaves)
    bits = np.zeros((len(leaves), prefix_len + n_slots + len(leaves)), dtype=bool)
    bits[:, :prefix_len] = True
    for row, leaf in enumerate(leaves):
        node = arena[leaf]
        if node.expanded:
            raise ContractViolation(f"leaf {leaf} is already expanded")
        anc = node.parent
        while anc is not None:
            a = arena[anc]
            if not a.expanded:
                if anc in leaf_set:
                    raise ContractViolation(f"leaf {leaf} has ancestor {anc} in the same batch")
                raise ContractViolation(f"leaf {leaf} has unexpanded ancestor {anc}")
            if a.kv_slot is not None:
                bits[row, prefix_len + a.kv_slot] = True
            elif anc != tree.root:
                raise ContractViolation(f"expanded node {anc} has no KV slot")
            anc = a.parent
        bits[row, prefix_len + n_slots + row] = True
    return TreeMask(bits, prefix_len)


def build_square_mask(subgraph: Subgraph, prefix_len: int) -> TreeMask:
    """Ancestor-or-self visibility within ``subgraph``, behind an open prefix."""
    n = subgraph.size
    bits = np.zeros((n, prefix_len + n), dtype=bool)
    bits[:, :prefix_len] = True
    for i in range(n):
        parent = subgraph.nodes[i][2]
        if parent != ROOT:
            bits[i, prefix_len : prefix_len + i] = bits[parent, prefix_len : prefix_len + i]
        bits[i, prefix_len + i] = True
    return TreeMask(bits, prefix_len)


def pad_mask(mask: TreeMask, max_cols: int) -> TreeMask:
    """Right-align ``mask`` in ``max_cols`` columns; the new leading columns are open prefix."""
    if max_cols < mask.cols:
        raise ContractViolation(f"cannot pad {mask.cols} columns down to {max_cols}")
    pad = max_cols - mask.cols
    if pad == 0:
        return mask
    bits = np.ones((mask.rows, max_cols), dtype=bool)
    bits[:, pad:] = mask.bits
    return TreeMask(bits, mask.prefix_len + pad)
