"""Deterministic hash-seeded n-gram language models.

Logits are a pure function of ``(seed, epsilon, last n tokens)``::

    logits[v] = base(seed, window, v) + epsilon * noise(seed ^ NOISE_KEY, window, v)

``base`` and ``noise`` are splitmix64-style keyed hashes mapped to
``[-1, 1)`` with 2**-31 resolution.  A draft model is the target with a
non-zero ``epsilon``; ``epsilon == 0`` reproduces the base model exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from treespec.draft_tree import TreeMask, Subgraph, build_square_mask
from treespec.errors import ConsistencyViolation, ContractViolation
from treespec.kv_cache import KVStore

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
NOISE_KEY = 0xD1B54A32D192ED03
PAD_TOKEN = -1

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _window_key(seed: int, window: tuple[int, ...]) -> int:
    h = _mix64(seed ^ GOLDEN)
    for t in window:
        h = _mix64(h ^ ((t + 1) * GOLDEN))
    return _mix64(h ^ len(window))


def _unit_values(key: int, vocab: int) -> np.ndarray:
    v = np.arange(vocab, dtype=np.uint64)
    h = _mix64_array(np.uint64(key) ^ ((v + np.uint64(1)) * np.uint64(GOLDEN)))
    return (h >> np.uint64(32)).astype(np.float64) / float(1 << 31) - 1.0


@dataclass(frozen=True)
class LMConfig:
    vocab: int = 64
    order: int = 2
    seed: int = 0
    epsilon: float = 0.0
    eos: int = 0

    def __post_init__(self) -> None:
        if self.vocab < 2:
            raise ValueError(f"vocab must be >= 2, got {self.vocab}")
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 <= self.eos < self.vocab:
            raise ValueError(f"eos {self.eos} outside vocabulary of {self.vocab}")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must fit in 64 bits")

    def with_epsilon(self, epsilon: float) -> "LMConfig":
        return LMConfig(self.vocab, self.order, self.seed, epsilon, self.eos)


@lru_cache(maxsize=1 << 17)
def _window_logits(lm: LMConfig, window: tuple[int, ...]) -> np.ndarray:
    out = _unit_values(_window_key(lm.seed, window), lm.vocab)
    if lm.epsilon != 0.0:
        out = out + lm.epsilon * _unit_values(_window_key(lm.seed ^ NOISE_KEY, window), lm.vocab)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=1 << 17)
def _window_logprobs(lm: LMConfig, window: tuple[int, ...]) -> np.ndarray:
    out = log_softmax(_window_logits(lm, window))
    out.flags.writeable = False
    return out


def logits_for_path(lm: LMConfig, path: Sequence[int]) -> np.ndarray:
    """Next-token logits after ``path``; only the last ``order`` tokens matter."""
    if len(path) == 0:
        raise ContractViolation("path must be nonempty")
    return _window_logits(lm, tuple(int(t) for t in path[-lm.order :]))


def logprobs_for_path(lm: LMConfig, path: Sequence[int]) -> np.ndarray:
    if len(path) == 0:
        raise ContractViolation("path must be nonempty")
    return _window_logprobs(lm, tuple(int(t) for t in path[-lm.order :]))


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = float(np.max(x))
    return x - (m + float(np.log(np.sum(np.exp(x - m)))))


def greedy_sample(logits: np.ndarray) -> int:
    """Argmax, ties to the lowest token id."""
    return int(np.argmax(logits))


def _row_windows(
    lm: LMConfig, prefix: Sequence[int], keys: Sequence[int], mask: TreeMask
) -> list[tuple[int, ...]]:
    rows, cols = mask.shape
    n_prefix = len(prefix)
    pad = mask.prefix_len - n_prefix
    if pad < 0:
        raise ContractViolation(f"mask has {mask.prefix_len} prefix columns for {n_prefix} prefix tokens")
    if cols - mask.prefix_len != len(keys):
        raise ContractViolation(f"mask has {cols - mask.prefix_len} key columns for {len(keys)} keys")
    if rows > len(keys):
        raise ContractViolation(f"mask has {rows} query rows but only {len(keys)} keys")
    if pad and not mask.bits[:, :pad].all():
        raise ContractViolation("padding columns must be fully visible")
    if rows == 0:
        return []
    order = lm.order
    start = mask.prefix_len
    width = cols - start
    key_bits = mask.bits[:, start:]
    windows = []
    for i in range(rows):
        idx = np.flatnonzero(key_bits[i])
        if idx.size == 0 or idx[-1] != width - rows + i:
            raise ContractViolation(f"row {i} must see its own column and nothing after it")
        toks = [int(keys[c]) for c in idx[-order:].tolist()]
        need = order - len(toks)
        if need > 0 and start:
            # rows near the root run out of key columns and continue into the prefix
            lo = max(0, start - need)
            row = mask.bits[i]
            if row[lo:start].all():
                vis = range(lo, start)
            else:
                vis = np.flatnonzero(row[:start])[-need:].tolist()
            toks = [int(prefix[c - pad]) for c in vis if c >= pad] + toks
        windows.append(tuple(toks))
    return windows


def batch_infer(
    lm: LMConfig, prefix: Sequence[int], keys: Sequence[int], mask: TreeMask
) -> list[np.ndarray]:
    """Masked batched inference.

    ``prefix`` fills the last ``len(prefix)`` prefix columns (any extra leading
    prefix columns are padding and contribute nothing).  ``keys`` are the
    tokens of the remaining columns; the final ``mask.rows`` of them are the
    queried positions.  Row ``i`` attends to exactly the tokens its mask row
    exposes, in column order.
    """
    return [_window_logits(lm, w) for w in _row_windows(lm, prefix, keys, mask)]


def batch_logprobs(
    lm: LMConfig, prefix: Sequence[int], keys: Sequence[int], mask: TreeMask
) -> list[np.ndarray]:
    return [_window_logprobs(lm, w) for w in _row_windows(lm, prefix, keys, mask)]


@lru_cache(maxsize=1 << 17)
def _window_topk(lm: LMConfig, window: tuple[int, ...], k: int) -> tuple[tuple[int, float], ...]:
    lp = _window_logprobs(lm, window)
    order = np.argsort(-lp, kind="stable")[:k]
    return tuple((int(t), float(lp[t])) for t in order)


def batch_topk(
    lm: LMConfig, prefix: Sequence[int], keys: Sequence[int], mask: TreeMask, k: int
) -> list[tuple[tuple[int, float], ...]]:
    """Top-``k`` ``(token, logprob)`` per row, best first, ties to the lower id."""
    return [_window_topk(lm, w, k) for w in _row_windows(lm, prefix, keys, mask)]


@dataclass(frozen=True)
class VerifiedResult:
    path: tuple[int, ...]
    hit_eos: bool

    @property
    def accepted(self) -> int:
        return len(self.path) - 1


def verify(target: LMConfig, target_store: KVStore, subgraph: Subgraph) -> VerifiedResult:
    """Verify ``subgraph`` greedily against the target and extend its prefix.

    The root's KV is already the last prefix entry, but the target has never
    produced logits at it, so the whole subgraph (root included) is the batch.
    """
    if not target_store.prefix_tokens:
        raise ConsistencyViolation("target store has no verified prefix")
    root_token = subgraph.nodes[0][1]
    if root_token != target_store.prefix_tokens[-1]:
        raise ConsistencyViolation(
            f"subgraph root {root_token} differs from last verified token "
            f"{target_store.prefix_tokens[-1]}"
        )
    context = target_store.prefix_tokens[:-1]
    mask = build_square_mask(subgraph, len(context))
    logits = batch_infer(target, context, subgraph.tokens, mask)

    children: dict[int, dict[int, int]] = {}
    for i, (_, tok, parent) in enumerate(subgraph.nodes[1:], start=1):
        children.setdefault(parent, {}).setdefault(tok, i)

    path = [root_token]
    cur = 0
    while True:
        t = greedy_sample(logits[cur])
        path.append(t)
        if t == target.eos:
            break
        nxt = children.get(cur, {}).get(t)
        if nxt is None:
            break
        cur = nxt
    target_store.extend_prefix(path[1:], reason="verify")
    return VerifiedResult(tuple(path), hit_eos=path[-1] == target.eos)


def autoregressive_decode(lm: LMConfig, prompt: Sequence[int], max_tokens: int) -> list[int]:
    """Plain greedy decoding, one token at a time; the golden oracle."""
    path = list(prompt)
    out: list[int] = []
    while len(out) < max_tokens:
        t = greedy_sample(logits_for_path(lm, path))
        out.append(t)
        path.append(t)
        if t == lm.eos:
            break
    return out
