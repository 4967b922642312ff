import csv
import json

import pytest

from promptforge import config as cfg
from promptforge.cli import main, worker_count

TINY = [
    "--set", "encoder.embed_dim=16",
    "--set", "encoder.layers=2",
    "--set", "encoder.heads=2",
    "--set", "pipeline.iterations=2",
    "--set", "pipeline.cls_epochs=3",
    "--set", "pipeline.t_s=3",
    "--set", "pipeline.selection.c=6",
    "--set", "pipeline.selection.m=2",
    "--set", "dataset.n_classes=6",
    "--set", "dataset.images_per_class=20",
    "--episodes", "2",
]  # fmt: skip


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults_validate_without_any_input():
    doc = cfg.load_config()
    assert doc["pipeline"]["n_v"] == 4 and doc["episodes"]["count"] == 100
    assert cfg.pipeline_config(doc).variant == "full"


def test_presets_and_overrides():
    doc = cfg.load_config(preset="paper-1shot")
    assert (doc["pipeline"]["n_v"], doc["pipeline"]["iterations"], doc["pipeline"]["lr_prompts"]) == (24, 60, 1e-4)
    assert doc["pipeline"]["feature_budget"] == 25
    doc = cfg.load_config(preset="paper-5shot", overrides=["pipeline.lr_cls=0.01", "variant=b2"])
    assert doc["episodes"]["k_shot"] == 5 and doc["pipeline"]["lr_cls"] == 0.01 and doc["variant"] == "b2"


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"pipeline": {"n_v": 2}, "seed": 3}))
    doc = cfg.load_config(str(path))
    assert doc["pipeline"]["n_v"] == 2 and doc["seed"] == 3 and doc["pipeline"]["tau"] == 0.07


def test_validation_lists_every_problem():
    with pytest.raises(cfg.ConfigError) as info:
        cfg.load_config(overrides=["pipeline.n_v=0", "variant=b7", "bogus.key=1", "corpus_path=/missing/c.json"])
    text = " | ".join(info.value.problems)
    for needle in ("n_v", "variant", "bogus.key", "/missing/c.json"):
        assert needle in text


def test_budget_invariant_checked():
    with pytest.raises(cfg.ConfigError):
        cfg.load_config(overrides=["pipeline.feature_budget=25"])
    assert cfg.load_config(overrides=["pipeline.feature_budget=25", "pipeline.n_v=24"])


def test_fingerprint_ignores_output_location():
    a = cfg.load_config(overrides=["out=\"x\""])
    b = cfg.load_config(overrides=["out=\"y\"", "workers=3"])
    c = cfg.load_config(overrides=["seed=8"])
    assert cfg.fingerprint(a) == cfg.fingerprint(b) != cfg.fingerprint(c)


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("PROMPTFORGE_THREADS", "2")
    assert worker_count(8) == 2 and worker_count(1) == 1
    monkeypatch.delenv("PROMPTFORGE_THREADS")
    assert worker_count(4) == 4


def test_run_writes_reports_and_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--seed", "7", "--out", str(a), "--diagnostics", *TINY]) == 0
    assert main(["run", "--seed", "7", "--out", str(b), "--diagnostics", *TINY]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    report = json.loads((a / "report.json").read_text())
    assert report["schema_version"] == cfg.SCHEMA_VERSION
    assert len(report["config_fingerprint"]) == 16
    episodes = _rows(a / "episodes.csv")
    assert len(episodes) == 2 and {r["config_fingerprint"] for r in episodes} == {report["config_fingerprint"]}
    diag = _rows(a / "diagnostics.csv")
    assert len(diag) == 4 and set(diag[0]) == {"episode", "iter", "L_div", "L_se", "L_TSC"}


def test_parallel_workers_match_serial(tmp_path):
    assert main(["run", "--out", str(tmp_path / "s"), *TINY]) == 0
    assert main(["run", "--out", str(tmp_path / "p"), "--workers", "2", *TINY]) == 0
    assert (tmp_path / "s" / "report.json").read_bytes() == (tmp_path / "p" / "report.json").read_bytes()


def test_invalid_corpus_path_exits_2(tmp_path, capsys):
    code = main(["run", "--out", str(tmp_path), "--set", 'corpus_path="/no/such/corpus.json"', *TINY])
    assert code == 2
    assert "/no/such/corpus.json" in capsys.readouterr().err


def test_ablate_rows_share_episode_seeds(tmp_path):
    assert main(["ablate", "--out", str(tmp_path), *TINY]) == 0
    rows = _rows(tmp_path / "ablation.csv")
    assert [r["variant"] for r in rows] == ["clip_base", "b1", "b2", "b3", "b4", "one_step", "full"]
    assert len({r["episode_seeds"] for r in rows}) == 1
    assert set(rows[0]) >= {"variant", "N", "K", "n_v", "dataset", "mean", "ci95", "wall_time_s", "seed"}


def test_sweep_nv_rows(tmp_path):
    assert main(["sweep-nv", "--out", str(tmp_path), "--nv", "1,2,3,4,5,6,7", *TINY, "--episodes", "1"]) == 0
    rows = _rows(tmp_path / "sweep_nv.csv")
    assert [int(r["n_v"]) for r in rows] == list(range(1, 8))
    assert len({r["episode_seeds"] for r in rows}) == 1


def test_export_features_five_shot(tmp_path):
    args = ["export-features", "--out", str(tmp_path), *TINY, "--set", "episodes.k_shot=5"]
    assert main(args) == 0
    rows = _rows(tmp_path / "features.csv")
    assert {r["role"] for r in rows} == {"support", "generated", "query"}
    for label in range(5):
        mine = [r for r in rows if int(r["label"]) == label]
        assert sum(r["role"] != "query" for r in mine) == 25
        assert sum(r["role"] == "query" for r in mine) == 15
    assert main([*args[:2], str(tmp_path / "again"), *args[3:]]) == 0
    assert (tmp_path / "features.csv").read_bytes() == (tmp_path / "again" / "features.csv").read_bytes()


def test_grad_check_pass_and_injected_failure(tmp_path, capsys):
    assert main(["grad-check", "--configs", "3", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in ("L_div", "L_se", "L_TSC", "ArcFace"))
    assert main(["grad-check", "--configs", "3", "--inject-sign-flip", "L_div"]) != 0
    assert "L_div" in capsys.readouterr().err


def test_report_command(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path), *TINY, "--episodes", "1"]) == 0
    assert main(["report", str(tmp_path)]) == 0
    assert "full" in capsys.readouterr().out
    assert main(["report", str(tmp_path / "missing")]) == 2
