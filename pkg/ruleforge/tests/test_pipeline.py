import json
from pathlib import Path

import pytest

from ruleforge.main import build_overrides, run_subcommand
from ruleforge.services.errors import StageInputMissing
from ruleforge.services.pipeline_service import STAGES, Pipeline
from ruleforge.services.settings import load_config
from ruleforge.tests.conftest import BASE_YARA
from ruleforge.tests.corpus_builder import sdist_members, write_config, write_tar_gz, write_zip

FAST_BASELINE = ["baseline:", "  max_pairs: 6", "  n_estimators: 20"]


def _tree(root: Path):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p != root / "manifest.json"
    }


def test_record_then_replay_reproduces_the_run(tmp_path, fixture_corpus):
    fixtures = tmp_path / "fixtures" / "llm.jsonl"
    recorded_dir = tmp_path / "run-record"
    replayed_dir = tmp_path / "run-replay"
    record_cfg = write_config(tmp_path / "record.yaml", fixture_corpus, recorded_dir, fixtures,
                              backend="record", extra=FAST_BASELINE)
    replay_cfg = write_config(tmp_path / "replay.yaml", fixture_corpus, replayed_dir, fixtures,
                              backend="replay", extra=FAST_BASELINE)

    assert run_subcommand(["-q", "--config", str(record_cfg), "pipeline"]) == 0
    assert fixtures.is_file()
    assert run_subcommand(["-q", "--config", str(replay_cfg), "pipeline"]) == 0

    recorded = _tree(recorded_dir)
    assert recorded == _tree(replayed_dir)

    rules = json.loads(recorded["generate/rules.json"])
    assert len(rules) >= 6
    report = json.loads(recorded["validate/report.json"])
    assert report["passed"] == report["rules"] == len(rules)
    for name in ("eval/yara/metrics.json", "eval/yara/coverage_cdf.csv", "analyze/heatmap.csv",
                 "analyze/overlap.json", "baseline/rules.json"):
        assert name in recorded

    manifest = json.loads((replayed_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["stage_order"] == list(STAGES)
    assert manifest["backends"]["llm"] == "replay"
    assert manifest["seeds"] == {"cluster": 42, "baseline": 42}


def test_stages_need_their_inputs(tmp_path):
    pipeline = Pipeline(load_config(overrides={"output_dir": str(tmp_path / "run")}))
    with pytest.raises(StageInputMissing) as info:
        pipeline.run_stage("segment")
    assert info.value.missing == "ingest/packages.json"
    with pytest.raises(ValueError):
        pipeline.run_stage("deploy")


def test_ingest_drops_archives_over_the_size_cap(tmp_path):
    malicious = tmp_path / "corpus" / "malicious"
    write_tar_gz(malicious / "small-1.0.tar.gz", sdist_members("small", "1.0", "x = 1\n"))
    write_zip(malicious / "bloated-1.0.zip", {"bloated/big.py": b"#" * 20_000})
    pipeline = Pipeline(load_config(overrides={
        "output_dir": str(tmp_path / "run"),
        "corpus.malicious": [str(malicious)],
        "corpus.max_member_bytes": 10_000,
    }))

    survivors = pipeline.run_stage("ingest")
    assert [r.name for r in survivors] == ["small"]
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text(encoding="utf-8"))
    assert [(d["archive"], d["error"]) for d in manifest["stages"]["ingest"]["dropped"]] == [
        ("bloated-1.0.zip", "corrupt_archive"),
    ]


def test_cli_eval_without_scan(tmp_path, capsys):
    assert run_subcommand(["--output-dir", str(tmp_path / "run"), "eval"]) == 1
    payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert payload["error"] == "stage_input_missing"
    assert payload["stage"] == "eval"
    assert payload["missing"] == "scan/yara/verdicts.json"


def test_cli_validate_files(tmp_path, capsys):
    good = tmp_path / "good.yar"
    good.write_text(BASE_YARA, encoding="utf-8")
    broken = tmp_path / "broken.yar"
    broken.write_text(BASE_YARA.replace("$post)", "$gone)"), encoding="utf-8")

    assert run_subcommand(["validate", str(good)]) == 0
    ok = json.loads(capsys.readouterr().out)
    assert ok["ok"] is True
    assert ok["rule"] == "pypi_hostinfo_stealer"

    assert run_subcommand(["validate", str(good), str(broken)]) == 1
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert lines[0]["ok"] is True
    assert lines[1]["error"] == "compile_error"
    assert lines[1]["errors"][0]["code"] == "undefined_string"


def test_cli_rejects_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("cluster:\n  representatives: 9\n", encoding="utf-8")
    assert run_subcommand(["--config", str(path), "ingest"]) == 1
    assert json.loads(capsys.readouterr().out)["error"] == "config_error"


def test_build_overrides(tmp_path):
    overrides = build_overrides(seed=7, rule_format="yara", record_fixtures=tmp_path / "f.jsonl")
    assert overrides["cluster.seed"] == overrides["baseline.seed"] == 7
    assert overrides["generate.formats"] == ["yara"]
    assert overrides["llm.backend"] == "record"
    assert overrides["llm.fixtures"] == str((tmp_path / "f.jsonl").resolve())
    assert overrides["corpus.allow_network"] is None

    config = load_config(overrides=overrides)
    assert config.cluster.seed == 7
    assert config.llm.fixtures == (tmp_path / "f.jsonl").resolve()
