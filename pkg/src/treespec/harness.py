"""Experiment orchestration: configs, prompt sources, ablations and reports.

A run is described by a YAML file.  Every section is optional except the
prompt source; unknown keys are rejected with the offending line::

    model: {vocab: 64, order: 2, eos: 0}
    epsilon: 0.5
    seed: 0
    pipeline: {bs: 8, w: 8, d: 3, k_children: 2, max_tokens: 256,
               mode: parallel, clock: virtual,
               t_target: 10.48, t_draft: 3.25, t_sync: 0.0}
    datasets:
      - {name: synth, count: 4, min_len: 4, max_len: 16, seed: 7}
      - {name: mine, file: prompts.txt}
    sweep: {bs: [4, 8], epsilon: [0.3, 1.0], x: [2, 4], cap: 256}
    allocation: {table: table.csv, k: 6, target: llama3-70b, draft: llama3-3b}
    repetitions: 2
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import platform
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from treespec import __version__
from treespec.errors import ConfigError, ConsistencyViolation
from treespec.pipeline import LatencyProfile, PipelineConfig, run
from treespec.scheduler import LatencyTable, default_table_path
from treespec.toy_lm import LMConfig, autoregressive_decode

SWEEP_AXES = ("bs", "w", "d", "epsilon", "x")
DEFAULT_SWEEP_CAP = 1024

# allowed keys per section; a nested dict is a sub-schema, None means a leaf
_SCHEMA: dict[str, Any] = {
    "model": {"vocab": None, "order": None, "eos": None},
    "epsilon": None,
    "seed": None,
    "prompt": None,
    "datasets": [{"name": None, "file": None, "count": None, "min_len": None, "max_len": None, "seed": None}],
    "pipeline": {
        "bs": None,
        "w": None,
        "d": None,
        "k_children": None,
        "max_tokens": None,
        "mode": None,
        "clock": None,
        "capacity": None,
        "t_target": None,
        "t_draft": None,
        "t_sync": None,
    },
    "sweep": {"bs": None, "w": None, "d": None, "epsilon": None, "x": None, "cap": None},
    "allocation": {"table": None, "k": None, "target": None, "draft": None, "candidates": None},
    "repetitions": None,
    "out": None,
    "trace": None,
    "jobs": None,
}


class GoldenMismatch(ConsistencyViolation):
    """A speculative run diverged from plain greedy decoding."""

    def __init__(self, message: str, trace: dict):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Dataset:
    name: str
    prompts: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class AllocationSource:
    table: str
    k: int
    target: str
    draft: str
    candidates: tuple[int, ...] = ()

    def load(self) -> LatencyTable:
        return LatencyTable.from_csv(self.table)


@dataclass(frozen=True)
class RunSpec:
    pipeline: PipelineConfig
    target: LMConfig
    draft: LMConfig
    datasets: tuple[Dataset, ...]
    sweep: dict[str, tuple] = field(default_factory=dict)
    sweep_cap: int = DEFAULT_SWEEP_CAP
    repetitions: int = 1
    seed: int = 0
    allocation: AllocationSource | None = None
    out: str | None = None
    trace: str | None = None
    jobs: int = 1

    def points(self) -> list[dict[str, Any]]:
        """Cross product of the sweep axes; an empty sweep is one point."""
        axes = [a for a in SWEEP_AXES if a in self.sweep]
        combos = list(itertools.product(*(self.sweep[a] for a in axes)))
        return [dict(zip(axes, c)) for c in combos]

    def to_json(self) -> dict:
        p = asdict(self.pipeline)
        p.pop("prompt")
        return {
            "pipeline": p,
            "target": asdict(self.target),
            "epsilon": self.draft.epsilon,
            "datasets": [{"name": d.name, "prompts": [list(x) for x in d.prompts]} for d in self.datasets],
            "sweep": {k: list(v) for k, v in self.sweep.items()},
            "sweep_cap": self.sweep_cap,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "allocation": None if self.allocation is None else asdict(self.allocation),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# -- prompts ---------------------------------------------------------------


def gen_prompts(seed: int, count: int, len_range: tuple[int, int], vocab: int, *, eos: int | None = 0) -> list[list[int]]:
    """Seeded random prompts; ``eos`` (if given) never appears in them."""
    lo, hi = len_range
    if count < 0:
        raise ConfigError(f"prompt count must be >= 0, got {count}")
    if not 1 <= lo <= hi:
        raise ConfigError(f"invalid prompt length range {len_range}")
    rng = random.Random(seed)
    choices = [t for t in range(vocab) if t != eos]
    return [[rng.choice(choices) for _ in range(rng.randint(lo, hi))] for _ in range(count)]


def read_prompts(path: str | Path, vocab: int) -> list[list[int]]:
    prompts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                toks = [int(t) for t in line.split()]
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: token ids must be integers") from None
            bad = [t for t in toks if not 0 <= t < vocab]
            if bad:
                raise ConfigError(f"{path}:{lineno}: token id {bad[0]} outside vocabulary of {vocab}")
            prompts.append(toks)
    return prompts


def write_prompts(path: str | Path, prompts: Iterable[Sequence[int]]) -> None:
    with open(path, "w") as fh:
        for p in prompts:
            fh.write(" ".join(str(t) for t in p) + "\n")


# -- config loading ----------------------------------------------------------


def _line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


def _check_keys(node: yaml.Node, schema: Any, where: str, path: str) -> None:
    if isinstance(schema, dict):
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{path}:{_line(node)}: {where or 'top level'} must be a mapping")
        seen = set()
        for key_node, value_node in node.value:
            key = key_node.value
            label = f"{where}.{key}" if where else key
            if key not in schema:
                raise ConfigError(f"{path}:{_line(key_node)}: unknown key '{label}'")
            if key in seen:
                raise ConfigError(f"{path}:{_line(key_node)}: duplicate key '{label}'")
            seen.add(key)
            if schema[key] is not None:
                _check_keys(value_node, schema[key], label, path)
    elif isinstance(schema, list):
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{path}:{_line(node)}: {where} must be a list")
        for i, item in enumerate(node.value):
            _check_keys(item, schema[0], f"{where}[{i}]", path)


def read_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        if node is None:
            return {}
        _check_keys(node, _SCHEMA, "", str(path))
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: {exc.problem}") from None
    return data


def _as_tuple(v: Any) -> tuple:
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)


def build_spec(raw: dict, overrides: dict[str, Any] | None = None, *, base_dir: Path | None = None) -> RunSpec:
    """Turn a parsed config (plus flag overrides) into a validated :class:`RunSpec`."""
    raw = dict(raw)
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    base_dir = base_dir or Path.cwd()

    def resolve(p: str) -> str:
        q = Path(p)
        return str(q if q.is_absolute() else base_dir / q)

    try:
        model = dict(raw.get("model") or {})
        seed = int(ov.get("seed", raw.get("seed", 0)))
        epsilon = float(ov.get("epsilon", raw.get("epsilon", 0.0)))
        target = LMConfig(
            vocab=int(model.get("vocab", 64)),
            order=int(model.get("order", 2)),
            seed=seed,
            eos=int(model.get("eos", 0)),
        )
        draft = target.with_epsilon(epsilon)

        pipe = dict(raw.get("pipeline") or {})
        for key in ("bs", "w", "d", "k_children", "max_tokens", "mode", "clock"):
            if key in ov:
                pipe[key] = ov[key]
        lat = LatencyProfile(
            float(pipe.pop("t_target", 10.48)),
            float(pipe.pop("t_draft", 3.25)),
            float(pipe.pop("t_sync", 0.0)),
        )

        datasets: list[Dataset] = []
        if "prompt" in raw:
            prompt = raw["prompt"]
            toks = [int(t) for t in (prompt.split() if isinstance(prompt, str) else prompt)]
            _check_vocab(toks, target.vocab, "prompt")
            datasets.append(Dataset("prompt", (tuple(toks),)))
        for i, ds in enumerate(raw.get("datasets") or []):
            name = str(ds.get("name", f"dataset{i}"))
            if "file" in ds:
                prompts = read_prompts(resolve(ds["file"]), target.vocab)
            else:
                prompts = gen_prompts(
                    int(ds.get("seed", seed)),
                    int(ds.get("count", 1)),
                    (int(ds.get("min_len", 4)), int(ds.get("max_len", 16))),
                    target.vocab,
                    eos=target.eos,
                )
            datasets.append(Dataset(name, tuple(tuple(p) for p in prompts)))
        if not datasets:
            raise ConfigError("config needs a 'prompt' or at least one entry under 'datasets'")
        first = next((p for d in datasets for p in d.prompts), None)
        if first is None:
            raise ConfigError("all datasets are empty")

        pipeline = PipelineConfig(prompt=first, latencies=lat, **pipe)

        sweep_raw = dict(raw.get("sweep") or {})
        cap = int(sweep_raw.pop("cap", DEFAULT_SWEEP_CAP))
        sweep = {k: _as_tuple(v) for k, v in sweep_raw.items()}
        for k, v in sweep.items():
            if not v:
                raise ConfigError(f"sweep axis '{k}' is empty")

        alloc_raw = raw.get("allocation")
        allocation = None
        if alloc_raw is not None:
            allocation = AllocationSource(
                table=resolve(alloc_raw.get("table", str(default_table_path()))),
                k=int(alloc_raw.get("k", 8)),
                target=str(alloc_raw.get("target", "llama3-70b")),
                draft=str(alloc_raw.get("draft", "llama3-3b")),
                candidates=tuple(int(x) for x in _as_tuple(alloc_raw.get("candidates", ()))),
            )
        if "x" in sweep and allocation is None:
            raise ConfigError("sweeping 'x' needs an 'allocation' section")

        spec = RunSpec(
            pipeline=pipeline,
            target=target,
            draft=draft,
            datasets=tuple(datasets),
            sweep=sweep,
            sweep_cap=cap,
            repetitions=int(raw.get("repetitions", 1)),
            seed=seed,
            allocation=allocation,
            out=ov.get("out", raw.get("out")),
            trace=ov.get("trace", raw.get("trace")),
            jobs=int(ov.get("jobs", raw.get("jobs", 1))),
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None

    if spec.repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    if spec.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    n_points = len(spec.points())
    if n_points > spec.sweep_cap:
        raise ConfigError(f"sweep has {n_points} points, cap is {spec.sweep_cap}")
    return spec


def _check_vocab(toks: Sequence[int], vocab: int, what: str) -> None:
    bad = [t for t in toks if not 0 <= t < vocab]
    if bad:
        raise ConfigError(f"{what}: token id {bad[0]} outside vocabulary of {vocab}")
    if not toks:
        raise ConfigError(f"{what} is empty")


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> RunSpec:
    """Read a YAML run description; ``overrides`` (CLI flags) win over file values."""
    raw = read_config(path)
    return build_spec(raw, overrides, base_dir=Path(path).resolve().parent)


# -- running ----------------------------------------------------------------


@dataclass(frozen=True)
class Job:
    """One (sweep point, dataset, prompt, repetition) pair of runs."""

    point: tuple[tuple[str, Any], ...]
    dataset: str
    prompt_index: int
    rep: int
    seed: int
    cfg: PipelineConfig
    target: LMConfig
    draft: LMConfig


def _point_config(spec: RunSpec, point: dict[str, Any], table: LatencyTable | None) -> tuple[PipelineConfig, float]:
    cfg = spec.pipeline
    changes = {k: point[k] for k in ("bs", "w", "d") if k in point}
    if "x" in point:
        assert spec.allocation is not None and table is not None
        x, k = int(point["x"]), spec.allocation.k
        if not 1 <= x <= k - 1:
            raise ConfigError(f"sweep x={x} outside [1, {k - 1}]")
        changes["latencies"] = LatencyProfile(
            table[(spec.allocation.target, x)],
            table[(spec.allocation.draft, k - x)],
            cfg.latencies.t_sync,
        )
    eps = float(point.get("epsilon", spec.draft.epsilon))
    return replace(cfg, **changes), eps


def plan_jobs(spec: RunSpec) -> list[Job]:
    table = spec.allocation.load() if spec.allocation is not None and "x" in spec.sweep else None
    jobs = []
    for point in spec.points():
        cfg, eps = _point_config(spec, point, table)
        for ds in spec.datasets:
            for i, prompt in enumerate(ds.prompts):
                for rep in range(spec.repetitions):
                    seed = spec.seed + rep
                    target = replace(spec.target, seed=seed)
                    jobs.append(
                        Job(tuple(point.items()), ds.name, i, rep, seed,
                            replace(cfg, prompt=prompt), target, target.with_epsilon(eps))
                    )
    return jobs


def _golden_check(job: Job, mode: str, tokens: list[int], result_json: dict) -> None:
    expected = autoregressive_decode(job.target, job.cfg.prompt, job.cfg.max_tokens)
    if tokens != expected:
        first = next((i for i, (a, b) in enumerate(zip(tokens, expected)) if a != b), min(len(tokens), len(expected)))
        raise GoldenMismatch(
            f"{mode} run diverged from greedy decoding at token {first} "
            f"(dataset={job.dataset} prompt={job.prompt_index} seed={job.seed} point={dict(job.point)})",
            result_json,
        )


def run_job(job: Job, clock: str | None = None) -> list[dict]:
    """Run serial and parallel on the same job, check both, return two rows."""
    rows = []
    for mode in ("serial", "parallel"):
        cfg = replace(job.cfg, mode=mode, clock=clock or job.cfg.clock)
        res = run(cfg, job.target, job.draft)
        _golden_check(job, mode, res.tokens, res.to_json())
        m = res.metrics
        rows.append(
            {
                "dataset": job.dataset,
                "prompt_index": job.prompt_index,
                "rep": job.rep,
                "seed": job.seed,
                "mode": mode,
                "bs": cfg.bs,
                "w": cfg.w,
                "d": cfg.d,
                "k_children": cfg.k_children,
                "epsilon": job.draft.epsilon,
                "x": dict(job.point).get("x"),
                "t_target": cfg.latencies.t_target,
                "t_draft": cfg.latencies.t_draft,
                "compression_ratio": m.compression_ratio,
                "tokens_per_second": m.tokens_per_second,
                "discard_fraction": m.discard_fraction,
                "generated": m.generated,
                "target_inferences": m.target_inferences,
                "draft_inferences": m.draft_inferences,
                "elapsed_ms": m.elapsed_ms,
                "golden": True,
            }
        )
    return rows


@dataclass
class Report:
    rows: list[dict]
    aggregates: list[dict]
    by_dataset: list[dict]
    environment: dict

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "report.json", "csv": out / "rows.csv", "table": out / "by_dataset.csv"}
        paths["json"].write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        _write_csv(paths["csv"], self.rows)
        _write_csv(paths["table"], self.by_dataset)
        return paths


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        fields = list(rows[0])
        for r in rows[1:]:
            fields += [k for k in r if k not in fields]
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


_POINT_KEYS = ("bs", "w", "d", "epsilon", "x", "t_target", "t_draft")


def _mean(vals: list[float | None]) -> float | None:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(rows: list[dict], datasets: Sequence[str]) -> tuple[list[dict], list[dict]]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["mode"], *(r[k] for k in _POINT_KEYS)), []).append(r)
    aggregates, by_dataset = [], []
    for key, rs in groups.items():
        head = dict(zip(("mode", *_POINT_KEYS), key))
        aggregates.append(
            {
                **head,
                "runs": len(rs),
                "compression_ratio": _mean([r["compression_ratio"] for r in rs]),
                "tokens_per_second": _mean([r["tokens_per_second"] for r in rs]),
                "discard_fraction": _mean([r["discard_fraction"] for r in rs]),
            }
        )
        line = dict(head)
        for ds in datasets:
            line[ds] = _mean([r["compression_ratio"] for r in rs if r["dataset"] == ds])
        line["tokens_per_second"] = _mean([r["tokens_per_second"] for r in rs])
        by_dataset.append(line)
    return aggregates, by_dataset


def environment(spec: RunSpec) -> dict:
    return {
        "config_hash": spec.config_hash(),
        "seed": spec.seed,
        "treespec": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pyyaml": yaml.__version__,
    }


def run_ablation(spec: RunSpec) -> Report:
    """Serial and parallel on every (sweep point, prompt, repetition), paired seeds.

    Every run is checked against greedy decoding before its row is kept; the
    first mismatch raises :class:`GoldenMismatch` carrying the failing trace.
    """
    jobs = plan_jobs(spec)
    if spec.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            chunks = list(pool.map(run_job, jobs))
    else:
        chunks = [run_job(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    aggregates, by_dataset = aggregate(rows, [d.name for d in spec.datasets])
    return Report(rows, aggregates, by_dataset, environment(spec))


def check_report_invariants(report: Report) -> list[str]:
    """Paired-row checks: parallel virtual time never exceeds serial."""
    problems = []
    by_key: dict[tuple, dict[str, dict]] = {}
    for r in report.rows:
        key = (r["dataset"], r["prompt_index"], r["rep"], *(r[k] for k in _POINT_KEYS))
        by_key.setdefault(key, {})[r["mode"]] = r
    for key, pair in by_key.items():
        if set(pair) != {"serial", "parallel"}:
            problems.append(f"unpaired row {key}")
        elif pair["parallel"]["elapsed_ms"] > pair["serial"]["elapsed_ms"] + 1e-9:
            problems.append(f"parallel slower than serial at {key}")
    return problems
