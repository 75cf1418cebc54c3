"""Profiling and parameter selection.

* :func:`compute_depth` turns a target/draft latency ratio into the two
  candidate expansion depths ``(r, r + 1)``.
* :func:`profile_pair` produces a :class:`LatencyProfile`, either from a
  :class:`LatencyTable` or by timing real calls.
* :func:`choose_allocation` splits ``k`` resource units between target and
  draft by simulating a short decode for every candidate split.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from numbers import Rational
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from treespec.errors import ConfigError
from treespec.pipeline import DraftWorker, LatencyProfile, PipelineConfig, TargetWorker, run_parallel
from treespec.toy_lm import LMConfig

N_EVAL = 256


class InputError(ConfigError):
    """Bad scheduler input (non-positive latency, missing table entry)."""


def compute_depth(t_target: float | Rational, t_draft: float | Rational) -> tuple[int, int]:
    """``(r, r + 1)`` with ``r = floor(t_target / t_draft)``, clamped to at least 1.

    The floor is taken on the exact rational value of the inputs, so float
    rounding in the division can never push ``r`` across an integer.
    """
    if t_draft <= 0:
        raise InputError(f"t_draft must be positive, got {t_draft}")
    if t_target < 0:
        raise InputError(f"t_target must be non-negative, got {t_target}")
    r = int(Fraction(t_target) // Fraction(t_draft))
    r = max(r, 1)
    return r, r + 1


class LatencyTable:
    """Per-inference duration (ms) keyed by ``(model, resource units)``."""

    def __init__(self, entries: Mapping[tuple[str, int], float]):
        for key, ms in entries.items():
            if not ms > 0:
                raise InputError(f"latency for {key} must be positive, got {ms}")
        self.entries = dict(entries)

    def __getitem__(self, key: tuple[str, int]) -> float:
        try:
            return self.entries[key]
        except KeyError:
            raise InputError(f"latency table has no entry for model={key[0]!r} units={key[1]}") from None

    def __contains__(self, key: tuple[str, int]) -> bool:
        return key in self.entries

    def models(self) -> list[str]:
        return sorted({m for m, _ in self.entries})

    def units(self, model: str) -> list[int]:
        return sorted(g for m, g in self.entries if m == model)

    @classmethod
    def from_csv(cls, path: str | Path) -> "LatencyTable":
        entries: dict[tuple[str, int], float] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["model", "units", "ms"]:
                raise InputError(f"{path}: header must be 'model,units,ms', got {reader.fieldnames}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    key = (row["model"].strip(), int(row["units"]))
                    entries[key] = float(row["ms"])
                except (TypeError, ValueError) as exc:
                    raise InputError(f"{path}:{lineno}: {exc}") from None
        return cls(entries)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "units", "ms"])
            for (model, units), ms in sorted(self.entries.items()):
                writer.writerow([model, units, ms])


def default_table_path() -> Path:
    return Path(__file__).parent / "data" / "llama3_latency.csv"


def median_ms(fn: Callable[[], object], trials: int) -> float:
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(samples)


def profile_pair(
    cfg: PipelineConfig,
    target: LMConfig,
    draft: LMConfig,
    trials: int,
    *,
    table: LatencyTable | None = None,
    target_key: tuple[str, int] | None = None,
    draft_key: tuple[str, int] | None = None,
    inject_ms: float | Callable[[], float] | None = None,
) -> LatencyProfile:
    """Latency profile for a model pair.

    With ``cfg.clock == "virtual"`` the durations come from ``table``.  With
    ``"wall"`` each of ``trials`` verify calls and draft expansion steps is
    timed and the medians reported.  ``inject_ms`` adds a sleep to every
    timed call (a constant or a callable returning one), which stands in for
    model compute in tests.
    """
    if trials < 1:
        raise InputError("trials must be >= 1")
    if cfg.clock == "virtual":
        if table is None or target_key is None or draft_key is None:
            raise InputError("virtual profiling needs a latency table and both model keys")
        return LatencyProfile(table[target_key], table[draft_key], cfg.latencies.t_sync)

    def pause() -> None:
        if inject_ms is None:
            return
        ms = inject_ms() if callable(inject_ms) else inject_ms
        time.sleep(ms / 1000.0)

    def one_verify() -> float:
        dw = DraftWorker(cfg, draft)
        dw.grow()
        sub = dw.select()
        tw = TargetWorker(cfg, target)
        t0 = time.perf_counter()
        tw.verify(sub)
        pause()
        return (time.perf_counter() - t0) * 1000.0

    def one_expand() -> float:
        dw = DraftWorker(cfg, draft)
        dw.grow()
        t0 = time.perf_counter()
        dw.expand_step(optional=False)
        pause()
        return (time.perf_counter() - t0) * 1000.0

    t_target = statistics.median(one_verify() for _ in range(trials))
    t_draft = statistics.median(one_expand() for _ in range(trials))
    return LatencyProfile(t_target, t_draft, cfg.latencies.t_sync)


@dataclass(frozen=True)
class AllocationPlan:
    x: int
    draft_units: int
    tokens_per_second: float
    d: int
    t_target: float
    t_draft: float
    candidates: tuple[tuple[int, int, float], ...] = ()

    def to_json(self) -> dict:
        return {
            "target_units": self.x,
            "draft_units": self.draft_units,
            "tokens_per_second": self.tokens_per_second,
            "d": self.d,
            "t_target": self.t_target,
            "t_draft": self.t_draft,
            "evaluated": [
                {"target_units": x, "d": d, "tokens_per_second": tps} for x, d, tps in self.candidates
            ],
        }


def choose_allocation(
    table: LatencyTable,
    k: int,
    candidates: Iterable[int],
    *,
    target_model: str,
    draft_model: str,
    target: LMConfig,
    draft: LMConfig,
    base: PipelineConfig,
    n_eval: int = N_EVAL,
) -> AllocationPlan:
    """Pick the target/draft split with the highest simulated tokens/sec.

    Every candidate ``x`` is evaluated with both depths from
    :func:`compute_depth` on a fixed-seed virtual-clock parallel decode of
    ``n_eval`` tokens.  Ties prefer the larger ``x``, then the smaller ``d``.
    """
    xs = sorted(set(candidates))
    if not xs:
        raise InputError("candidate set is empty")
    for x in xs:
        if not 1 <= x <= k - 1:
            raise InputError(f"candidate x={x} outside [1, {k - 1}]")
        table[(target_model, x)]
        table[(draft_model, k - x)]

    evaluated: list[tuple[int, int, float]] = []
    best: tuple[tuple[float, int, int], AllocationPlan] | None = None
    for x in xs:
        t_target, t_draft = table[(target_model, x)], table[(draft_model, k - x)]
        for d in compute_depth(t_target, t_draft):
            cfg = replace(
                base,
                d=d,
                max_tokens=n_eval,
                mode="parallel",
                clock="virtual",
                latencies=LatencyProfile(t_target, t_draft, base.latencies.t_sync),
                capacity=None,
            )
            tps = run_parallel(cfg, target, draft).metrics.tokens_per_second or math.inf
            evaluated.append((x, d, tps))
            key = (tps, x, -d)
            if best is None or key > best[0]:
                best = (key, AllocationPlan(x, k - x, tps, d, t_target, t_draft))
    assert best is not None
    return replace(best[1], candidates=tuple(evaluated))


def sweep_allocations(
    table: LatencyTable, k: int, candidates: Sequence[int], **kw
) -> list[AllocationPlan]:
    """One plan per single candidate; handy for reporting the whole curve."""
    return [choose_allocation(table, k, [x], **kw) for x in candidates]
