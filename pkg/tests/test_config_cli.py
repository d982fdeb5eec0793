import csv
import json

import numpy as np
import pytest

from annealprune.cli import EXIT_COLLAPSED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, RunManifest, main
from annealprune.config import ConfigError, build_config, load_config
from annealprune.data import make_synthetic_task, save_csv

TINY = {
    "seed": 0,
    "model": {"family": "resnet", "depth": 8, "widths": [4, 8, 8]},
    "dataset": {"kind": "synthetic", "num_classes": 4, "image_size": 8, "examples_per_class": 20,
                "test_examples_per_class": 10},
    "search": {"n_max": 3, "batch_size": 32, "a_lr": 0.05, "target_fraction": 0.6},
    "finetune": {"epochs": 1, "batch_size": 32, "warmup": 1},
    "space": {"num_instances": 3, "flops_band_fraction": [0.3, 0.95]},
}  # fmt: skip


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _with(**sections):
    cfg = json.loads(json.dumps(TINY))
    for sec, values in sections.items():
        cfg[sec].update(values)
    return cfg


# -- config ------------------------------------------------------------------


def test_defaults_and_seed_propagation():
    cfg = build_config({"seed": 7, "model": {}, "dataset": {}, "search": {"target_fraction": 0.5}})
    assert cfg.search.seed == cfg.finetune.seed == 7
    assert cfg.spec.input_shape == (3, 12, 12) and cfg.spec.num_classes == 10
    assert cfg.target_flops == pytest.approx(0.5 * cfg.unpruned_flops)
    assert cfg.resolved()["search"]["resolved_target_flops"] == cfg.target_flops


def test_missing_dataset_path_names_field():
    with pytest.raises(ConfigError) as exc:
        build_config({"model": {}, "dataset": {"kind": "csv"}, "search": {"target_fraction": 0.5}})
    assert any(e.startswith("dataset.path") for e in exc.value.errors)


def test_errors_are_listed_exhaustively():
    bad = {
        "model": {"depth": 9, "colour": "red"},
        "dataset": {"split_ratio": 1.5},
        "search": {"target_flops": 100, "target_fraction": 0.5, "schedule": "exp"},
        "bogus": {},
    }
    with pytest.raises(ConfigError) as exc:
        build_config(bad)
    text = "\n".join(exc.value.errors)
    for field in ("model.depth", "model.colour", "dataset.split_ratio", "search.target_flops", "search.schedule", "bogus"):
        assert field in text
    assert len(exc.value.errors) >= 6


def test_flops_regularizer_needs_a_target():
    with pytest.raises(ConfigError, match="target_fraction"):
        build_config({"model": {}, "dataset": {}, "search": {}})
    # the lasso variant does not
    build_config({"model": {}, "dataset": {}, "search": {"regularizer": "lasso", "lambda_lasso": 1e-3}})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    (tmp_path / "broken.json").write_text("{ nope")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(tmp_path / "broken.json")


def test_csv_dataset_config(tmp_path):
    save_csv(tmp_path / "d.csv", make_synthetic_task(3, 6, image_size=6, seed=0))
    cfg = build_config(
        {"model": {"widths": [4, 4, 4]}, "dataset": {"kind": "csv", "path": str(tmp_path / "d.csv"), "num_classes": 3},
         "search": {"target_fraction": 0.5}}
    )  # fmt: skip
    assert cfg.spec.input_shape == (3, 6, 6) and cfg.spec.num_classes == 3
    data, test = cfg.load_data()
    assert len(data.train) + len(data.val) == 18 and test is None
    with pytest.raises(ConfigError, match="num_classes"):
        build_config(
            {"model": {"num_classes": 5}, "dataset": {"kind": "csv", "path": str(tmp_path / "d.csv"), "num_classes": 3},
             "search": {"target_fraction": 0.5}}
        )  # fmt: skip


# -- commands ------------------------------------------------------------------


def test_dry_run_prints_resolved_target(tmp_path, capsys):
    assert main(["search", _write(tmp_path, TINY), "--dry-run"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["search"]["resolved_target_flops"] == pytest.approx(0.6 * out["search"]["unpruned_flops"])
    assert not any(tmp_path.glob("runs*"))


def test_config_error_exit_code(tmp_path, capsys):
    path = _write(tmp_path, {"model": {}, "dataset": {"kind": "idx"}, "search": {"target_fraction": 0.5}})
    assert main(["search", path]) == EXIT_CONFIG
    assert "dataset.path" in capsys.readouterr().err
    assert main(["derive", str(tmp_path)]) == EXIT_CONFIG


def test_ablation_flags_map_to_config(tmp_path, capsys):
    path = _write(tmp_path, TINY)
    assert main(["search", path, "--dry-run", "--no-annealing", "--no-bilevel", "--reg", "lasso", "--seed", "9"]) == 0
    out = json.loads(capsys.readouterr().out)
    s = out["search"]
    assert (s["annealing"], s["bilevel"], s["regularizer"], s["seed"]) == (False, False, "lasso", 9)
    assert out["finetune"]["seed"] == 9


def _run(tmp_path, name, cfg=TINY, *extra):
    run_dir = tmp_path / name
    assert main(["search", _write(tmp_path, cfg, f"{name}.json"), "--run-dir", str(run_dir), *extra]) == EXIT_OK
    return run_dir


def test_search_derive_finetune_eval_report(tmp_path, capsys):
    run = _run(tmp_path, "r1")
    for name in ("manifest.json", "metrics.ndjson", "trace.csv", "alphas.npz", "supernet.npz"):
        assert (run / name).exists()
    assert len((run / "metrics.ndjson").read_text().splitlines()) == 3
    assert main(["derive", str(run)]) == EXIT_OK
    assert (run / "derived" / "arch.txt").exists() and (run / "flops.txt").exists()
    assert main(["finetune", str(run)]) == EXIT_OK
    assert main(["eval", str(run), "--baseline-acc", "0.9"]) == EXIT_OK
    m = RunManifest.load(run)
    ev = m.data["results"]["eval"]
    assert ev["split"] == "test" and ev["model"] == "finetuned"
    assert ev["acc_drop"] == pytest.approx(0.9 - ev["pruned_accuracy"])
    assert m.data["results"]["derive"]["equivalence_max_abs"] < 1e-4
    assert [s["command"] for s in m.data["steps"]] == ["search", "derive", "finetune", "eval"]
    capsys.readouterr()
    assert main(["report", str(run)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Pruning Acc" in out and "Acc Drop" in out and "FLOPs (pruning ratio)" in out
    with open(run / "report.csv") as fh:
        row = next(csv.DictReader(fh))
    assert row["Acc Drop"] == f"{100 * ev['acc_drop']:.2f}%"


def test_eval_drop_sign_against_baseline_run(tmp_path):
    run = _run(tmp_path, "r2")
    assert main(["derive", str(run)]) == EXIT_OK
    assert main(["eval", str(run), "--baseline-acc", "0.0"]) == EXIT_OK
    # a pruned model that beats its baseline shows a negative drop
    assert RunManifest.load(run).data["results"]["eval"]["acc_drop"] <= 0.0
    other = _run(tmp_path, "r3")
    assert main(["derive", str(other)]) == EXIT_OK
    assert main(["eval", str(other), "--baseline", str(run)]) == EXIT_OK
    res = RunManifest.load(other).data["results"]["eval"]
    assert res["unpruned_accuracy"] == RunManifest.load(run).data["results"]["eval"]["pruned_accuracy"]


def test_eval_trains_and_caches_baseline(tmp_path):
    run = _run(tmp_path, "r4")
    assert main(["derive", str(run)]) == EXIT_OK
    assert main(["eval", str(run)]) == EXIT_OK
    first = RunManifest.load(run).data["results"]["baseline"]["accuracy"]
    assert main(["eval", str(run)]) == EXIT_OK
    m = RunManifest.load(run)
    assert [s["command"] for s in m.data["steps"]].count("baseline") == 1
    assert m.data["results"]["eval"]["unpruned_accuracy"] == first


def test_report_keep_all_shows_zero_ratio(tmp_path, capsys):
    run = _run(tmp_path, "keep", _with(search={"n_max": 0}))
    assert main(["derive", str(run)]) == EXIT_OK
    capsys.readouterr()
    assert main(["report", str(run), "--csv", str(tmp_path / "rep.csv")]) == EXIT_OK
    assert "(0.0%)" in capsys.readouterr().out
    with open(tmp_path / "rep.csv") as fh:
        assert next(csv.DictReader(fh))["FLOPs (pruning ratio)"].endswith("(0.0%)")


def test_collapse_exit_code(tmp_path, capsys):
    run = _run(tmp_path, "col", _with(search={"n_max": 0}))
    alphas = dict(np.load(run / "alphas.npz"))
    alphas["s2b1.a"][:] = -1.0
    np.savez(run / "alphas.npz", **alphas)
    assert main(["derive", str(run)]) == EXIT_COLLAPSED
    err = capsys.readouterr().err
    assert "layer collapsed" in err and "s2b1.a" in err
    assert RunManifest.load(run).data["steps"][-1]["status"] == "collapsed"


def test_divergence_exit_code(tmp_path):
    path = _write(tmp_path, _with(search={"w_lr": 1e12}))
    with np.errstate(all="ignore"):
        assert main(["search", path, "--run-dir", str(tmp_path / "div")]) == EXIT_DIVERGED
    assert (tmp_path / "div" / "diverged.json").exists()


def test_space_writes_requested_rows(tmp_path):
    cfg = _write(tmp_path, _with(space={"flops_band_fraction": None}))
    out = tmp_path / "sp"
    assert main(["space", cfg, "--kind", "constrained", "--n", "20", "--epochs", "0", "--run-dir", str(out)]) == EXIT_OK
    with open(out / "space_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20
    assert RunManifest.load(out).data["results"]["space"]["kind"] == "constrained"


def test_runs_root_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ANNEALPRUNE_RUNS", str(tmp_path / "root"))
    assert main(["search", _write(tmp_path, _with(search={"n_max": 1}))]) == EXIT_OK
    (made,) = (tmp_path / "root").iterdir()
    assert made.name.startswith("search-") and (made / "manifest.json").exists()


def test_repeat_from_manifest_is_identical(tmp_path):
    first = _run(tmp_path, "a")
    assert main(["derive", str(first)]) == EXIT_OK
    again = tmp_path / "b"
    assert main(["search", str(first / "manifest.json"), "--run-dir", str(again)]) == EXIT_OK
    assert main(["derive", str(again)]) == EXIT_OK
    a, b = np.load(first / "alphas.npz"), np.load(again / "alphas.npz")
    for s in a.files:
        np.testing.assert_array_equal(np.sign(a[s]), np.sign(b[s]))
    assert (first / "flops.txt").read_bytes() == (again / "flops.txt").read_bytes()
    assert (first / "derived" / "arch.txt").read_bytes() == (again / "derived" / "arch.txt").read_bytes()
