"""Flag-embedded single-producer/single-consumer channel.

Each ring slot is 16 bytes laid out as four 32-bit lanes
``(data1, flag1, data2, flag2)``.  A 64-bit value is split into halves and
each half is written together with the round's flag as one 8-byte store, so a
reader that sees the expected flag in both lanes holds an untorn value.
Readiness is conveyed only by flag equality: the data path takes no locks
and waits on no condition variables.  Pollers spin, optionally yielding the
interpreter between polls.

8-byte atomicity comes from single-element numpy ``uint64`` loads and stores,
which complete inside one bytecode and therefore cannot be observed half
written by another thread.
"""

from __future__ import annotations

import enum
import os
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from treespec.errors import ChannelOverrun, ChannelTimeout, MessageTooLarge, ProtocolError

LOW32 = 0xFFFFFFFF
FLAG_MOD = 1 << 32


def yield_cpu() -> None:
    """Give the interpreter and the CPU to another runnable context.

    ``sched_yield`` drops the GIL and asks the OS to run someone else, so a
    poller on a single core does not starve the context it is waiting for.
    """
    _yield()


_yield = getattr(os, "sched_yield", None) or (lambda: time.sleep(0))


def next_flag(flag: int) -> int:
    """Flag for the round after ``flag``; 0 is the idle value and is skipped."""
    nxt = (flag + 1) % FLAG_MOD
    return nxt if nxt else 1


def _pack(data: int, flag: int) -> int:
    return (data & LOW32) | ((flag & LOW32) << 32)


class LLSlotArray:
    """Ring storage: ``length`` slots of two 8-byte words each, zero-initialised."""

    def __init__(self, length: int):
        self.words = np.zeros((length, 2), dtype=np.uint64)

    def __len__(self) -> int:
        return self.words.shape[0]

    def lanes(self, index: int) -> tuple[int, int, int, int]:
        """``(data1, flag1, data2, flag2)`` of one slot, for inspection."""
        lo, hi = int(self.words[index, 0]), int(self.words[index, 1])
        return (lo & LOW32, lo >> 32, hi & LOW32, hi >> 32)


def store_ll(slots: LLSlotArray, index: int, val: int, flag: int) -> None:
    """Store ``val`` into slot ``index`` tagged with ``flag`` (low half first)."""
    w = slots.words
    w[index, 0] = _pack(val, flag)
    w[index, 1] = _pack(val >> 32, flag)


def try_read_ll(slots: LLSlotArray, index: int, flag: int) -> int | None:
    w = slots.words
    lo = int(w[index, 0])
    hi = int(w[index, 1])
    if (lo >> 32) == flag and (hi >> 32) == flag:
        return (lo & LOW32) + ((hi & LOW32) << 32)
    return None


def read_ll(
    slots: LLSlotArray,
    index: int,
    flag: int,
    *,
    poll_budget: int | None = None,
    yield_every: int = 1,
) -> int:
    """Poll slot ``index`` until both lanes carry ``flag``; return the value."""
    polls = 0
    while True:
        val = try_read_ll(slots, index, flag)
        if val is not None:
            return val
        polls += 1
        if poll_budget is not None and polls >= poll_budget:
            raise ChannelTimeout(f"slot {index} never showed flag {flag} after {polls} polls")
        if yield_every and polls % yield_every == 0:
            yield_cpu()


class MessageKind(enum.IntEnum):
    SUBGRAPH = 1
    VERIFIED = 2
    STOP = 3


@dataclass(frozen=True)
class WireMessage:
    kind: MessageKind
    payload: tuple[int, ...] = ()

    def encode(self) -> list[int]:
        header = int(self.kind) | (len(self.payload) << 8)
        return [header, *self.payload]

    @classmethod
    def subgraph(cls, tokens: Sequence[int], parents: Sequence[int]) -> "WireMessage":
        # parent position shifted by one so ROOT (-1) encodes as 0
        return cls(
            MessageKind.SUBGRAPH,
            tuple((t & LOW32) | ((p + 1) << 32) for t, p in zip(tokens, parents)),
        )

    def subgraph_pairs(self) -> list[tuple[int, int]]:
        return [(w & LOW32, (w >> 32) - 1) for w in self.payload]

    @classmethod
    def verified(cls, path: Sequence[int]) -> "WireMessage":
        return cls(MessageKind.VERIFIED, tuple(int(t) for t in path))

    @classmethod
    def stop(cls, path: Sequence[int] = ()) -> "WireMessage":
        return cls(MessageKind.STOP, tuple(int(t) for t in path))


class LLChannel:
    """Ring of LL slots shared by exactly one producer and one consumer.

    One round is one message (or one raw word via :meth:`push`); every word of
    a round carries the same flag.  The consumer publishes how many slots it
    has drained in a separate 8-byte cell, which the producer checks before
    reusing a slot.
    """

    def __init__(self, length: int = 64, *, yield_every: int = 1):
        if length < 2:
            raise ValueError("ring needs at least 2 slots")
        self.slots = LLSlotArray(length)
        self.length = length
        self.yield_every = yield_every
        self._consumed = np.zeros(1, dtype=np.uint64)
        # producer-private
        self._send_flag = 1
        self._write_pos = 0
        # consumer-private
        self._recv_flag = 1
        self._read_pos = 0

    # -- producer side ---------------------------------------------------

    def _reserve(self, n: int, wait: bool, poll_budget: int | None) -> None:
        if n > self.length:
            raise MessageTooLarge(f"message of {n} words exceeds ring of {self.length}")
        polls = 0
        while self._write_pos + n - int(self._consumed[0]) > self.length:
            if not wait:
                raise ChannelOverrun(
                    f"ring full: {self._write_pos - int(self._consumed[0])} of {self.length} slots unconsumed"
                )
            polls += 1
            if poll_budget is not None and polls >= poll_budget:
                raise ChannelTimeout("consumer did not drain the ring")
            if self.yield_every and polls % self.yield_every == 0:
                yield_cpu()

    def send_words(self, words: Sequence[int], *, wait: bool = False, poll_budget: int | None = None) -> None:
        self._reserve(len(words), wait, poll_budget)
        flag = self._send_flag
        base = self._write_pos
        for i, word in enumerate(words):
            store_ll(self.slots, (base + i) % self.length, word, flag)
        self._write_pos = base + len(words)
        self._send_flag = next_flag(flag)

    def push(self, value: int, *, wait: bool = False, poll_budget: int | None = None) -> None:
        """Send one raw 64-bit word as its own round."""
        self._reserve(1, wait, poll_budget)
        store_ll(self.slots, self._write_pos % self.length, value, self._send_flag)
        self._write_pos += 1
        self._send_flag = next_flag(self._send_flag)

    def send_message(self, msg: WireMessage, *, wait: bool = False, poll_budget: int | None = None) -> None:
        self.send_words(msg.encode(), wait=wait, poll_budget=poll_budget)

    # -- consumer side ---------------------------------------------------

    def _read(self, poll_budget: int | None) -> int:
        val = read_ll(
            self.slots,
            self._read_pos % self.length,
            self._recv_flag,
            poll_budget=poll_budget,
            yield_every=self.yield_every,
        )
        self._read_pos += 1
        return val

    def _finish_round(self) -> None:
        self._consumed[0] = self._read_pos
        self._recv_flag = next_flag(self._recv_flag)

    def ready(self) -> bool:
        """Whether the next round's first word is visible (non-blocking)."""
        return try_read_ll(self.slots, self._read_pos % self.length, self._recv_flag) is not None

    def pop(self, *, poll_budget: int | None = None) -> int:
        val = self._read(poll_budget)
        self._finish_round()
        return val

    def recv_message(self, *, poll_budget: int | None = None) -> WireMessage:
        header = self._read(poll_budget)
        kind_code, count = header & 0xFF, header >> 8
        if kind_code not in MessageKind._value2member_map_ or count > self.length - 1:
            raise ProtocolError(f"malformed header word {header:#x}")
        payload = tuple(self._read(poll_budget) for _ in range(count))
        self._finish_round()
        return WireMessage(MessageKind(kind_code), payload)

    # -- test hooks ------------------------------------------------------

    def force_rounds(self, flag: int) -> None:
        """Set both round counters to ``flag`` (for wraparound tests on an idle channel)."""
        self._send_flag = flag
        self._recv_flag = flag


def send_message(ch: LLChannel, msg: WireMessage, **kw) -> None:
    ch.send_message(msg, **kw)


def recv_message(ch: LLChannel, **kw) -> WireMessage:
    return ch.recv_message(**kw)
