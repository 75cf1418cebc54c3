import csv
import json
import textwrap

import pytest

from treespec import cli, harness
from treespec.errors import ConfigError
from treespec.harness import (
    GoldenMismatch,
    build_spec,
    check_report_invariants,
    gen_prompts,
    load_config,
    read_prompts,
    run_ablation,
    write_prompts,
)
from treespec.toy_lm import LMConfig, autoregressive_decode


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


# -- config --------------------------------------------------------------------------


def test_minimal_config_defaults(tmp_path):
    spec = load_config(write(tmp_path, "model: {vocab: 32}\nprompt: 1 2 3\n"))
    assert (spec.pipeline.bs, spec.pipeline.w) == (8, 8)
    assert spec.pipeline.prompt == (1, 2, 3)
    assert spec.target.vocab == 32 and spec.draft.epsilon == 0.0


def test_unknown_key_rejected_with_line(tmp_path):
    p = write(tmp_path, "prompt: 1 2\npipeline:\n  bs: 4\n  bogus: 1\n")
    with pytest.raises(ConfigError, match=r"run.yaml:4: unknown key 'pipeline.bogus'"):
        load_config(p)


def test_unknown_key_in_dataset_list(tmp_path):
    p = write(tmp_path, "datasets:\n  - {name: a, count: 1}\n  - {name: b, colour: red}\n")
    with pytest.raises(ConfigError, match=r"datasets\[1\]\.colour"):
        load_config(p)


def test_duplicate_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="duplicate"):
        load_config(write(tmp_path, "prompt: 1\nseed: 1\nseed: 2\n"))


def test_yaml_syntax_error_has_line(tmp_path):
    with pytest.raises(ConfigError, match=r"run.yaml:2"):
        load_config(write(tmp_path, "prompt: 1\n\tseed: 2\n"))


def test_flag_overrides_file(tmp_path):
    p = write(tmp_path, "prompt: 1 2\npipeline: {bs: 8}\nepsilon: 0.2\n")
    spec = load_config(p, {"bs": 4, "epsilon": None})
    assert spec.pipeline.bs == 4
    assert spec.draft.epsilon == 0.2


@pytest.mark.parametrize(
    "text",
    [
        "seed: 1\n",  # no prompt source
        "prompt: 1 99\n",  # token outside vocab
        "prompt: 1\npipeline: {bs: 0}\n",
        "prompt: 1\npipeline: {mode: sideways}\n",
        "prompt: 1\nrepetitions: 0\n",
        "prompt: 1\nsweep: {bs: [1, 2, 3], w: [1, 2], cap: 5}\n",
        "prompt: 1\nsweep: {x: [2]}\n",
        "prompt: 1\nsweep: {bs: []}\n",
        "datasets:\n  - {count: 2, min_len: 5, max_len: 3}\n",
    ],
)
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text))


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.yaml")


# -- prompts ---------------------------------------------------------------------------


def test_gen_prompts_reproducible():
    a = gen_prompts(5, 10, (3, 9), 64)
    assert a == gen_prompts(5, 10, (3, 9), 64)
    assert a != gen_prompts(6, 10, (3, 9), 64)
    assert all(3 <= len(p) <= 9 and 0 not in p for p in a)


def test_gen_prompts_empty():
    assert gen_prompts(1, 0, (1, 4), 64) == []


def test_gen_prompts_bad_range():
    with pytest.raises(ConfigError):
        gen_prompts(1, 3, (0, 4), 64)


def test_prompt_file_round_trip(tmp_path):
    prompts = gen_prompts(3, 7, (1, 12), 64)
    write_prompts(tmp_path / "p.txt", prompts)
    assert read_prompts(tmp_path / "p.txt", 64) == prompts


def test_prompt_file_rejects_out_of_vocab(tmp_path):
    (tmp_path / "p.txt").write_text("1 2 3\n4 64\n")
    with pytest.raises(ConfigError, match=r"p.txt:2: token id 64"):
        read_prompts(tmp_path / "p.txt", 64)


def test_dataset_file_relative_to_config(tmp_path):
    write_prompts(tmp_path / "mine.txt", [[1, 2], [3, 4, 5]])
    spec = load_config(write(tmp_path, "datasets:\n  - {name: mine, file: mine.txt}\n"))
    assert spec.datasets[0].prompts == ((1, 2), (3, 4, 5))


# -- ablation ---------------------------------------------------------------------------


def eos_free_seed(bs, n):
    for seed in range(1000):
        lm = LMConfig(seed=seed, eos=0)
        if len(autoregressive_decode(lm, [1, 2, 3], n)) == n:
            return seed
    raise AssertionError("no eos-free seed")


def test_ablation_identical_models_analytic():
    bs, n = 4, 64
    seed = eos_free_seed(bs, n)
    raw = {
        "prompt": "1 2 3",
        "seed": seed,
        "epsilon": 0.0,
        "pipeline": {"bs": bs, "w": 1, "k_children": 1, "d": 2, "max_tokens": n},
    }
    report = run_ablation(build_spec(raw))
    assert {r["mode"] for r in report.rows} == {"serial", "parallel"}
    # each verify accepts the bs-1 drafted tokens plus the sampled one
    for r in report.rows:
        assert r["compression_ratio"] == bs
        assert r["target_inferences"] == n // bs


def small_spec(**extra):
    raw = {
        "datasets": [
            {"name": "alpha", "count": 2, "min_len": 3, "max_len": 6, "seed": 1},
            {"name": "beta", "count": 2, "min_len": 3, "max_len": 6, "seed": 2},
        ],
        "epsilon": 0.5,
        "pipeline": {"max_tokens": 24},
        "repetitions": 2,
    }
    raw.update(extra)
    return build_spec(raw)


def test_report_per_dataset_columns():
    report = run_ablation(small_spec(sweep={"bs": [4, 8]}))
    assert len(report.rows) == 2 * 2 * 2 * 2 * 2  # modes x bs x datasets x prompts x reps
    assert len(report.by_dataset) == 4
    for line in report.by_dataset:
        assert {"mode", "t_target", "t_draft", "alpha", "beta"} <= set(line)
        assert line["t_target"] == 10.48 and line["t_draft"] == 3.25
    assert check_report_invariants(report) == []


def test_ablation_over_allocation(tmp_path):
    spec = small_spec(
        sweep={"x": [2, 4]},
        allocation={"k": 6, "target": "llama3-70b", "draft": "llama3-3b"},
    )
    report = run_ablation(spec)
    pts = {(r["x"], r["t_target"], r["t_draft"]) for r in report.rows}
    assert pts == {(2, 15.90, 2.80), (4, 11.86, 2.61)}


def test_report_reproducible(tmp_path):
    a, b = run_ablation(small_spec()), run_ablation(small_spec())
    assert a.environment["config_hash"] == b.environment["config_hash"]
    assert json.dumps(a.rows, sort_keys=True) == json.dumps(b.rows, sort_keys=True)
    assert small_spec(epsilon=0.6).config_hash() != small_spec().config_hash()


def test_parallel_jobs_match_sequential():
    seq = run_ablation(small_spec())
    par = run_ablation(small_spec(jobs=2))
    assert par.rows == seq.rows


def test_report_files(tmp_path):
    report = run_ablation(small_spec())
    paths = report.write(tmp_path / "out")
    data = json.loads(paths["json"].read_text())
    assert data["environment"]["config_hash"] == report.environment["config_hash"]
    with open(paths["csv"]) as fh:
        assert len(list(csv.DictReader(fh))) == len(report.rows)
    with open(paths["table"]) as fh:
        assert len(list(csv.DictReader(fh))) == len(report.by_dataset)


def test_golden_mismatch_aborts(monkeypatch):
    real = harness.run

    def corrupt(cfg, target, draft, **kw):
        res = real(cfg, target, draft, **kw)
        if cfg.mode == "parallel":
            res.tokens[-1] = (res.tokens[-1] + 1) % target.vocab
        return res

    monkeypatch.setattr(harness, "run", corrupt)
    with pytest.raises(GoldenMismatch, match="parallel run diverged") as info:
        run_ablation(small_spec())
    assert "iterations" in info.value.trace


def test_invariant_check_flags_unpaired():
    report = run_ablation(small_spec(repetitions=1))
    report.rows.pop()
    assert any("unpaired" in p for p in check_report_invariants(report))


# -- CLI ----------------------------------------------------------------------------------


def test_cli_decode_ok(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    rc = cli.main(["decode", "--prompt", "5 6 7", "--max-tokens", "20", "--epsilon", "0.5", "--trace", str(trace)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["golden"] is True and len(out["tokens"]) <= 20
    lines = trace.read_text().splitlines()
    assert len(lines) == out["metrics"]["target_inferences"]


def test_cli_config_error(tmp_path, capsys):
    p = write(tmp_path, "prompt: 1\nbogus: 2\n")
    assert cli.main(["decode", "--config", str(p)]) == 2
    assert "unknown key 'bogus'" in capsys.readouterr().err


def test_cli_bad_flag_exits_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["decode", "--mode", "sideways"])
    assert info.value.code == 2


def test_cli_consistency_violation(monkeypatch, capsys):
    real = cli.run

    def corrupt(cfg, target, draft, **kw):
        res = real(cfg, target, draft, **kw)
        res.tokens.append(1)
        return res

    monkeypatch.setattr(cli, "run", corrupt)
    assert cli.main(["decode", "--prompt", "1 2", "--max-tokens", "8"]) == 3
    assert "consistency violation" in capsys.readouterr().err


def test_cli_ablate_writes_report(tmp_path, capsys):
    p = write(
        tmp_path,
        """
        datasets:
          - {name: synth, count: 2, min_len: 3, max_len: 5, seed: 4}
        epsilon: 0.5
        pipeline: {max_tokens: 16}
        """,
    )
    assert cli.main(["ablate", "--config", str(p), "--out", str(tmp_path / "rep")]) == 0
    assert {f.name for f in (tmp_path / "rep").iterdir()} == {"report.json", "rows.csv", "by_dataset.csv"}
    assert "synth" in json.loads(capsys.readouterr().out)["by_dataset"][0]


def test_cli_plan_and_profile(capsys):
    assert cli.main(["plan", "--k", "6", "--candidates", "2,4", "--max-tokens", "32"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["target_units"] in (2, 4)
    assert cli.main(["plan", "--k", "8", "--candidates", "4,6"]) == 2
    assert "units=6" in capsys.readouterr().err
    assert cli.main(["profile", "--target-units", "4", "--draft-units", "4"]) == 0
    prof = json.loads(capsys.readouterr().out)
    assert (prof["t_target"], prof["t_draft"]) == (11.86, 2.80)
