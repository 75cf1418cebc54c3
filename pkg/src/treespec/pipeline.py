"""Draft/target worker loops for serial and parallel tree speculation.

Both modes share :class:`DraftWorker` and :class:`TargetWorker`; they differ
only in when the draft expands relative to verification:

* ``parallel``: the draft performs its ``d`` expansion steps while the target
  verifies the previous subgraph, then re-roots on the verified path.
* ``serial``: the draft waits for the verified path, re-roots, and only then
  expands.

Under ``clock="virtual"`` both workers run in one context and time advances
from a :class:`LatencyProfile`.  Under ``clock="wall"`` parallel runs use two
threads talking over a pair of :class:`~treespec.ll_channel.LLChannel` rings.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from treespec.draft_tree import DraftTree, Subgraph, build_nonsquare_mask
from treespec.errors import CapacityError, ConsistencyViolation, ContractViolation
from treespec.kv_cache import CompactionPlan, KVStore, reorganize_on_reroot
from treespec.ll_channel import LLChannel, MessageKind, WireMessage, yield_cpu
from treespec.toy_lm import LMConfig, VerifiedResult, batch_topk, verify

logger = logging.getLogger(__name__)

MODES = ("serial", "parallel")
CLOCKS = ("virtual", "wall")


@dataclass(frozen=True)
class LatencyProfile:
    t_target: float = 10.48
    t_draft: float = 3.25
    t_sync: float = 0.0

    def __post_init__(self) -> None:
        if min(self.t_target, self.t_draft, self.t_sync) < 0:
            raise ValueError("latencies must be non-negative")


@dataclass(frozen=True)
class PipelineConfig:
    prompt: tuple[int, ...]
    bs: int = 8
    w: int = 8
    d: int = 3
    k_children: int = 2
    max_tokens: int = 256
    mode: str = "parallel"
    clock: str = "virtual"
    latencies: LatencyProfile = LatencyProfile()
    capacity: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        for name in ("bs", "w", "d", "k_children", "max_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.clock not in CLOCKS:
            raise ValueError(f"clock must be one of {CLOCKS}")

    @property
    def kv_capacity(self) -> int:
        if self.capacity is not None:
            return self.capacity
        return self.max_tokens + len(self.prompt) + self.bs + self.w * self.k_children * self.d


@dataclass
class IterationTrace:
    index: int
    subgraph_tokens: list[int]
    subgraph_parents: list[int]
    output_path: list[int]
    accepted: int
    outcome: str
    draft_expansions: int
    growth_expansions: int
    draft_busy: float
    target_busy: float
    elapsed: float
    end: float
    compaction: dict | None = None

    def message_contents(self) -> tuple:
        """Fields that must not depend on the clock."""
        return (
            self.index,
            tuple(self.subgraph_tokens),
            tuple(self.subgraph_parents),
            tuple(self.output_path),
            self.accepted,
            self.outcome,
            self.draft_expansions,
            self.growth_expansions,
            None if self.compaction is None else repr(self.compaction),
        )

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Metrics:
    compression_ratio: float
    tokens_per_second: float | None
    discard_fraction: float
    target_inferences: int
    draft_inferences: int
    generated: int
    elapsed_ms: float
    stalls: int


@dataclass
class DecodeResult:
    tokens: list[int]
    iterations: list[IterationTrace]
    metrics: Metrics
    mode: str
    clock: str
    bootstrap_ms: float = 0.0
    digest_computations: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "tokens": self.tokens,
            "mode": self.mode,
            "clock": self.clock,
            "bootstrap_ms": self.bootstrap_ms,
            "metrics": asdict(self.metrics),
            "digest_computations": dict(self.digest_computations),
            "iterations": [it.to_json() for it in self.iterations],
        }


class DraftWorker:
    """Owns the draft tree and the draft model's KV store."""

    def __init__(self, cfg: PipelineConfig, lm: LMConfig):
        self.cfg = cfg
        self.lm = lm
        self.store = KVStore(cfg.kv_capacity)
        self.store.extend_prefix(cfg.prompt, reason="prefill")
        self.tree = DraftTree(cfg.prompt[-1])
        self.inferences = 0
        self.expanded_nodes = 0
        self.discarded_nodes = 0
        self.stalls = 0
        self.last_plan: CompactionPlan | None = None

    def expand_step(self, *, optional: bool) -> int:
        """Expand up to ``w`` most probable leaves; return how many were expanded.

        Optional steps (the ``d`` per round) keep ``2 * bs`` entries of
        headroom so the next re-root and regrowth always fit.
        """
        budget = self.cfg.w
        if optional:
            budget = min(budget, self.store.headroom - 2 * self.cfg.bs)
        if budget <= 0:
            self.stalls += 1
            return 0
        tree, store = self.tree, self.store
        leaves = tree.pop_frontier(budget)
        if not leaves:
            self.stalls += 1
            logger.debug("draft frontier empty; expansion stalled")
            return 0

        if leaves == [tree.root]:
            # lone unexpanded root: its state is already the last prefix entry
            prefix = store.prefix_tokens[:-1]
            keys = [tree.arena[tree.root].token]
        else:
            prefix = store.prefix_tokens
            keys = tree.slot_tokens() + [tree.arena[r].token for r in leaves]
        mask = build_nonsquare_mask(tree, leaves, len(prefix))
        rows = batch_topk(self.lm, prefix, keys, mask, self.cfg.k_children)

        for leaf, picks in zip(leaves, rows):
            node = tree.arena[leaf]
            if leaf != tree.root:
                parent = tree.arena[node.parent]
                parent_digest = (
                    store.last_digest() if parent.kv_slot is None else store.slot_digest(parent.kv_slot)
                )
                digest = store.compute_digest(parent_digest, node.token, "expand")
                node.kv_slot = store.allocate_slot(leaf, digest)
            tree.attach_children(leaf, picks, self.cfg.k_children)
        self.inferences += 1
        self.expanded_nodes += len(leaves)
        return len(leaves)

    def expand_round(self) -> int:
        """The ``d`` optional expansion steps; returns the count that did work."""
        return sum(1 for _ in range(self.cfg.d) if self.expand_step(optional=True) > 0)

    def grow(self) -> int:
        steps = 0
        while self.tree.size < self.cfg.bs:
            if self.expand_step(optional=False) == 0:
                raise CapacityError(
                    f"draft tree stuck at {self.tree.size} nodes, cannot reach bs={self.cfg.bs}"
                )
            steps += 1
        return steps

    def select(self) -> Subgraph:
        return self.tree.select_subgraph(self.cfg.bs)

    def apply_verified(self, path: Sequence[int]) -> tuple[str, CompactionPlan]:
        outcome = self.tree.reroot(path)
        plan = reorganize_on_reroot(self.store, outcome)
        self.discarded_nodes += len(plan.frees)
        self.last_plan = plan
        return outcome.kind, plan


class TargetWorker:
    """Owns the target model's prefix-only KV store."""

    def __init__(self, cfg: PipelineConfig, lm: LMConfig):
        self.cfg = cfg
        self.lm = lm
        self.store = KVStore(cfg.kv_capacity)
        self.store.extend_prefix(cfg.prompt, reason="prefill")
        self.generated: list[int] = []
        self.inferences = 0

    def verify(self, subgraph: Subgraph) -> tuple[VerifiedResult, bool]:
        if subgraph.size != self.cfg.bs:
            raise ConsistencyViolation(
                f"received subgraph of {subgraph.size} nodes, expected bs={self.cfg.bs}"
            )
        result = verify(self.lm, self.store, subgraph)
        self.inferences += 1
        self.generated.extend(result.path[1:])
        done = result.hit_eos or len(self.generated) >= self.cfg.max_tokens
        return result, done


def _check_sync(draft: DraftWorker, target: TargetWorker) -> None:
    if draft.store.prefix_tokens != target.store.prefix_tokens:
        raise ConsistencyViolation("draft and target prefixes diverged")
    root = draft.tree.arena[draft.tree.root].token
    if root != target.store.prefix_tokens[-1]:
        raise ConsistencyViolation(f"draft root {root} is not the last verified token")


def _finish(
    cfg: PipelineConfig,
    draft: DraftWorker,
    target: TargetWorker,
    traces: list[IterationTrace],
    elapsed_ms: float,
    bootstrap_ms: float,
) -> DecodeResult:
    tokens = target.generated[: cfg.max_tokens]
    accepted = [t.accepted for t in traces]
    metrics = Metrics(
        compression_ratio=sum(accepted) / len(accepted),
        tokens_per_second=(len(tokens) / (elapsed_ms / 1000.0)) if elapsed_ms > 0 else None,
        discard_fraction=(draft.discarded_nodes / draft.expanded_nodes) if draft.expanded_nodes else 0.0,
        target_inferences=target.inferences,
        draft_inferences=draft.inferences,
        generated=len(tokens),
        elapsed_ms=elapsed_ms,
        stalls=draft.stalls,
    )
    computations = {f"draft.{k}": v for k, v in draft.store.computations.items()}
    computations.update({f"target.{k}": v for k, v in target.store.computations.items()})
    return DecodeResult(tokens, traces, metrics, cfg.mode, cfg.clock, bootstrap_ms, computations)


def parallel_elapsed(lat: LatencyProfile, d_eff: int, growth: int) -> float:
    return max(lat.t_target, d_eff * lat.t_draft) + lat.t_sync + growth * lat.t_draft


def serial_elapsed(lat: LatencyProfile, d_eff: int, growth: int) -> float:
    return lat.t_target + (d_eff + growth) * lat.t_draft + lat.t_sync


def virtual_clock_advance(mode: str, lat: LatencyProfile, d_eff: int, growth: int) -> float:
    """Virtual duration of one iteration."""
    if mode == "parallel":
        return parallel_elapsed(lat, d_eff, growth)
    return serial_elapsed(lat, d_eff, growth)


Observer = Callable[[DraftWorker, TargetWorker, IterationTrace], None]


def _run_virtual(
    cfg: PipelineConfig, target_lm: LMConfig, draft_lm: LMConfig, observer: Observer | None
) -> DecodeResult:
    lat = cfg.latencies
    draft = DraftWorker(cfg, draft_lm)
    target = TargetWorker(cfg, target_lm)
    parallel = cfg.mode == "parallel"

    boot_d = 0 if parallel else draft.expand_round()
    boot_g = draft.grow()
    bootstrap = (boot_d + boot_g) * lat.t_draft
    sub = draft.select()
    now = bootstrap
    traces: list[IterationTrace] = []
    i = 0
    while True:
        d_eff = draft.expand_round() if parallel else 0
        result, done = target.verify(sub)
        msg = WireMessage.stop(result.path) if done else WireMessage.verified(result.path)
        growth = 0
        kind, plan = "stop", None
        if msg.kind is MessageKind.VERIFIED:
            kind, plan = draft.apply_verified(msg.payload)
            if not parallel:
                d_eff = draft.expand_round()
            growth = draft.grow()
            _check_sync(draft, target)
            next_sub = draft.select()
        elapsed = virtual_clock_advance(cfg.mode, lat, d_eff, growth)
        now += elapsed
        trace = IterationTrace(
            index=i,
            subgraph_tokens=sub.tokens,
            subgraph_parents=sub.parents,
            output_path=list(result.path),
            accepted=result.accepted,
            outcome=kind,
            draft_expansions=d_eff,
            growth_expansions=growth,
            draft_busy=(d_eff + growth) * lat.t_draft,
            target_busy=lat.t_target,
            elapsed=elapsed,
            end=now,
            compaction=None if plan is None else plan.to_json(),
        )
        traces.append(trace)
        if observer is not None:
            observer(draft, target, trace)
        if done:
            break
        sub = next_sub
        i += 1
    return _finish(cfg, draft, target, traces, now, bootstrap)


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0


def _run_wall_serial(
    cfg: PipelineConfig, target_lm: LMConfig, draft_lm: LMConfig, observer: Observer | None
) -> DecodeResult:
    t0 = time.perf_counter()
    draft = DraftWorker(cfg, draft_lm)
    target = TargetWorker(cfg, target_lm)
    draft.expand_round()
    draft.grow()
    sub = draft.select()
    bootstrap = _ms(t0)
    traces = []
    i = 0
    while True:
        start = _ms(t0)
        result, done = target.verify(sub)
        t_busy = _ms(t0) - start
        d_eff = growth = 0
        kind, plan = "stop", None
        dstart = _ms(t0)
        if not done:
            kind, plan = draft.apply_verified(result.path)
            d_eff = draft.expand_round()
            growth = draft.grow()
            _check_sync(draft, target)
            next_sub = draft.select()
        end = _ms(t0)
        trace = IterationTrace(
            i, sub.tokens, sub.parents, list(result.path), result.accepted, kind, d_eff, growth,
            draft_busy=end - dstart, target_busy=t_busy, elapsed=end - start, end=end,
            compaction=None if plan is None else plan.to_json(),
        )
        traces.append(trace)
        if observer is not None:
            observer(draft, target, trace)
        if done:
            break
        sub = next_sub
        i += 1
    return _finish(cfg, draft, target, traces, _ms(t0), bootstrap)


def _wait_ready(ch: LLChannel, abort: list[bool]) -> bool:
    """Spin until the channel's next round is visible or the run is aborted."""
    while not ch.ready():
        if abort[0]:
            return False
        yield_cpu()
    return True


def _run_wall_parallel(
    cfg: PipelineConfig, target_lm: LMConfig, draft_lm: LMConfig, observer: Observer | None
) -> DecodeResult:
    ring = max(64, cfg.bs + 4)
    to_target = LLChannel(ring)
    to_draft = LLChannel(ring)
    abort = [False]
    errors: list[BaseException] = []
    t0 = time.perf_counter()
    draft = DraftWorker(cfg, draft_lm)
    target = TargetWorker(cfg, target_lm)
    traces: list[IterationTrace] = []
    target_busy: list[float] = []
    timing = {"bootstrap": 0.0, "end": 0.0}

    def draft_loop() -> None:
        try:
            draft.grow()
            sub = draft.select()
            to_target.send_message(WireMessage.subgraph(sub.tokens, sub.parents), wait=True)
            timing["bootstrap"] = _ms(t0)
            i = 0
            while True:
                start = _ms(t0)
                d_eff = draft.expand_round()
                d_busy = _ms(t0) - start
                if not _wait_ready(to_draft, abort):
                    return
                msg = to_draft.recv_message()
                growth = 0
                kind, plan = "stop", None
                if msg.kind is MessageKind.VERIFIED:
                    kind, plan = draft.apply_verified(msg.payload)
                    g_start = _ms(t0)
                    growth = draft.grow()
                    d_busy += _ms(t0) - g_start
                    next_sub = draft.select()
                    to_target.send_message(
                        WireMessage.subgraph(next_sub.tokens, next_sub.parents), wait=True
                    )
                elif msg.kind is not MessageKind.STOP:
                    raise ConsistencyViolation(f"draft received unexpected {msg.kind.name}")
                end = _ms(t0)
                traces.append(
                    IterationTrace(
                        i, sub.tokens, sub.parents, list(msg.payload), len(msg.payload) - 1, kind,
                        d_eff, growth, draft_busy=d_busy, target_busy=0.0,
                        elapsed=end - start, end=end,
                        compaction=None if plan is None else plan.to_json(),
                    )
                )
                if msg.kind is MessageKind.STOP:
                    timing["end"] = end
                    return
                sub = next_sub
                i += 1
        except BaseException as exc:  # surfaced in the main context
            errors.append(exc)
            abort[0] = True

    def target_loop() -> None:
        try:
            while True:
                if not _wait_ready(to_target, abort):
                    return
                msg = to_target.recv_message()
                if msg.kind is not MessageKind.SUBGRAPH:
                    raise ConsistencyViolation(f"target received unexpected {msg.kind.name}")
                start = _ms(t0)
                result, done = target.verify(Subgraph.from_pairs(msg.subgraph_pairs()))
                target_busy.append(_ms(t0) - start)
                reply = WireMessage.stop(result.path) if done else WireMessage.verified(result.path)
                to_draft.send_message(reply, wait=True)
                if done:
                    return
        except BaseException as exc:
            errors.append(exc)
            abort[0] = True

    workers = [
        threading.Thread(target=draft_loop, name="draft-worker"),
        threading.Thread(target=target_loop, name="target-worker"),
    ]
    for th in workers:
        th.start()
    for th in workers:
        th.join()
    if errors:
        raise errors[0]
    for trace, busy in zip(traces, target_busy):
        trace.target_busy = busy
    for trace in traces:
        if observer is not None:
            observer(draft, target, trace)
    if traces[-1].outcome != "stop":
        raise ConsistencyViolation("wall-clock run ended without a STOP")
    return _finish(cfg, draft, target, traces, timing["end"], timing["bootstrap"])


def run_parallel(
    cfg: PipelineConfig, target: LMConfig, draft: LMConfig, *, observer: Observer | None = None
) -> DecodeResult:
    if cfg.mode != "parallel":
        raise ContractViolation("run_parallel needs mode='parallel'")
    _check_models(target, draft)
    if cfg.clock == "wall":
        return _run_wall_parallel(cfg, target, draft, observer)
    return _run_virtual(cfg, target, draft, observer)


def run_serial(
    cfg: PipelineConfig, target: LMConfig, draft: LMConfig, *, observer: Observer | None = None
) -> DecodeResult:
    if cfg.mode != "serial":
        raise ContractViolation("run_serial needs mode='serial'")
    _check_models(target, draft)
    if cfg.clock == "wall":
        return _run_wall_serial(cfg, target, draft, observer)
    return _run_virtual(cfg, target, draft, observer)


def run(cfg: PipelineConfig, target: LMConfig, draft: LMConfig, **kw) -> DecodeResult:
    if cfg.mode == "parallel":
        return run_parallel(cfg, target, draft, **kw)
    return run_serial(cfg, target, draft, **kw)


def _check_models(target: LMConfig, draft: LMConfig) -> None:
    if target.vocab != draft.vocab or target.eos != draft.eos:
        raise ContractViolation("draft and target must share vocabulary and eos")
