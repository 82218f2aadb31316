from __future__ import annotations

import csv
import json
from types import SimpleNamespace

import pytest

from gsnop import cli
from gsnop.config import RESOLVED_NAME


@pytest.fixture
def config_path(tiny_config, tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_config.to_dict()), encoding="utf-8")
    return str(path)


def rows(path):
    with open(path, newline="", encoding="utf-8") as file:
        return list(csv.DictReader(file))


def last_error(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    return json.loads(lines[-1])


def test_train_then_eval(config_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["train", "--config", config_path, "--out", str(out), "-y"]) == 0
    for name in (RESOLVED_NAME, "loss.csv", "checkpoint"):
        assert (out / name).exists(), name
    capsys.readouterr()

    assert cli.main(["eval", "--config", config_path, "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"ap", "mrr", "n_queries", "bucket_loss"}
    assert (out / "metrics.json").exists()
    assert len(rows(out / "results.csv")) == 1


def test_seed_override(config_path, tmp_path):
    out = tmp_path / "out"
    argv = ["train", "--config", config_path, "--out", str(out), "--seed", "9"]
    assert cli.main(argv) == 0
    resolved = json.loads((out / RESOLVED_NAME).read_text(encoding="utf-8"))
    assert resolved["seed"] == 9


def test_single_variant_ablation(config_path, tmp_path):
    out = tmp_path / "ablate"
    code = cli.main(
        ["ablate", "--config", config_path, "--out", str(out), "--variants", "np"]
    )
    assert code == 0
    (row,) = rows(out / "results.csv")
    assert row["variant"] == "np"
    assert (out / "np" / "checkpoint").exists()


def test_ablation_shares_data(config_path, tmp_path):
    out = tmp_path / "ablate"
    code = cli.main(
        ["ablate", "--config", config_path, "--out", str(out), "--variants", "np,cnp"]
    )
    assert code == 0
    results = rows(out / "results.csv")
    assert [r["variant"] for r in results] == ["np", "cnp"]
    assert len({r["data_hash"] for r in results}) == 1


def test_sparsity_sweep(config_path, tmp_path):
    out = tmp_path / "sparsity"
    code = cli.main(
        ["sparsity", "--config", config_path, "--out", str(out), "--ratios", "1,0.5"]
    )
    assert code == 0
    assert [float(r["sample_ratio"]) for r in rows(out / "results.csv")] == [1.0, 0.5]
    assert (out / "ratio-0.5" / "checkpoint").exists()


def test_stats(config_path, tmp_path, capsys):
    out = tmp_path / "stats"
    assert cli.main(["stats", "--config", config_path, "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text(encoding="utf-8"))
    assert stats["nodes"] == 12 and stats["links"] == 160
    assert set(stats["density"]) == {"0.1", "0.3"}
    assert json.loads(capsys.readouterr().out) == stats


def test_bench(config_path, tmp_path):
    out = tmp_path / "bench"
    code = cli.main(
        ["bench", "--config", config_path, "--out", str(out), "--sizes", "40,80"]
    )
    assert code == 0
    report = json.loads((out / "bench.json").read_text(encoding="utf-8"))
    assert report["sizes"] == [40, 80]
    assert all(s > 0 for s in report["seconds"])
    assert len(rows(out / "bench.csv")) == 2


def test_unknown_variant_is_reported(config_path, tmp_path, capsys):
    argv = ["ablate", "--config", config_path, "--out", str(tmp_path / "x")]
    assert cli.main(argv + ["--variants", "gru"]) == 1
    error = last_error(capsys)
    assert error["error"] == "ConfigError" and "gru" in error["message"]


def test_missing_config_is_reported(tmp_path, capsys):
    argv = ["train", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]
    assert cli.main(argv) == 1
    assert last_error(capsys)["error"] == "ConfigError"


def test_missing_checkpoint_is_reported(config_path, tmp_path, capsys):
    argv = ["eval", "--config", config_path, "--out", str(tmp_path / "empty")]
    assert cli.main(argv) == 1
    assert last_error(capsys)["error"] == "ConfigError"


def test_declining_a_non_empty_directory(config_path, tmp_path, monkeypatch, capsys):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "keep.txt").write_text("x", encoding="utf-8")
    monkeypatch.setattr("sys.stdin", SimpleNamespace(isatty=lambda: True))
    monkeypatch.setattr(
        cli.questionary, "confirm", lambda message: SimpleNamespace(ask=lambda: False)
    )
    assert cli.main(["train", "--config", config_path, "--out", str(out)]) == 1
    assert "aborted" in capsys.readouterr().out
    assert not (out / "checkpoint").exists()


def test_list_arguments_are_parsed():
    parser = cli.build_parser()
    assert parser.parse_args(["ablate", "--variants", "np, snp"]).variants == [
        "np",
        "snp",
    ]
    assert parser.parse_args(["sparsity", "--ratios", "1,0.1"]).ratios == [1.0, 0.1]
    assert parser.parse_args(["bench", "--sizes", "10,20"]).sizes == [10, 20]
    assert parser.parse_args(["ablate"]).variants is None


def resolved(out):
    return json.loads((out / RESOLVED_NAME).read_text(encoding="utf-8"))


def test_list_flags_are_recorded_in_the_resolved_config(config_path, tmp_path):
    out = tmp_path / "sweep"
    argv = ["sparsity", "--config", config_path, "--out", str(out), "--ratios", "1,0.5"]
    assert cli.main(argv) == 0
    assert resolved(out)["sparsity_ratios"] == [1.0, 0.5]
    assert resolved(out / "ratio-0.5")["out_dir"] == str(out / "ratio-0.5")
    assert resolved(out / "ratio-0.5")["sample_ratio"] == 0.5


def test_list_defaults_come_from_the_config(tiny_config, tmp_path):
    path = tmp_path / "run.json"
    path.write_text(
        json.dumps({**tiny_config.to_dict(), "variants": ["cnp"]}), encoding="utf-8"
    )
    out = tmp_path / "ablate"
    assert cli.main(["ablate", "--config", str(path), "--out", str(out)]) == 0
    assert [r["variant"] for r in rows(out / "results.csv")] == ["cnp"]


RERUNS = {
    "train": ["loss.csv"],
    "ablate": ["results.csv", "np/loss.csv", "np/metrics.json"],
    "sparsity": ["results.csv", "ratio-0.5/loss.csv", "ratio-0.5/metrics.json"],
    "stats": ["stats.json"],
}
LIST_FLAGS = {
    "ablate": ["--variants", "np"],
    "sparsity": ["--ratios", "0.5"],
    "stats": ["--ratios", "0.4"],
}


@pytest.mark.parametrize("command", sorted(RERUNS))
def test_rerun_from_resolved_config_is_identical(config_path, tmp_path, command):
    first, second = tmp_path / "a", tmp_path / "b"
    argv = [command, "--config", config_path, "--out", str(first), "--seed", "4"]
    assert cli.main(argv + LIST_FLAGS.get(command, [])) == 0
    rerun = [command, "--config", str(first / RESOLVED_NAME), "--out", str(second)]
    assert cli.main(rerun) == 0
    for name in RERUNS[command]:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_eval_rerun_from_resolved_config_is_identical(config_path, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", config_path, "--out", str(first)]) == 0
    assert cli.main(["eval", "--config", config_path, "--out", str(first)]) == 0
    assert resolved(first)["checkpoint"] == str(first / "checkpoint")
    rerun = ["eval", "--config", str(first / RESOLVED_NAME), "--out", str(second)]
    assert cli.main(rerun) == 0
    for name in ("metrics.json", "results.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_bench_rerun_keeps_the_sizes(config_path, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    argv = ["bench", "--config", config_path, "--out", str(first), "--sizes", "40,60"]
    assert cli.main(argv) == 0
    rerun = ["bench", "--config", str(first / RESOLVED_NAME), "--out", str(second)]
    assert cli.main(rerun) == 0
    report = json.loads((second / "bench.json").read_text(encoding="utf-8"))
    assert report["sizes"] == [40, 60]
