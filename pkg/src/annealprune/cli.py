"""Command-line pipeline: search -> derive -> finetune -> eval -> report, plus space.

Every command works on a run directory holding ``manifest.json``: the
resolved config, seed, artifact paths, timestamps and tool version. A
manifest can stand in for a config file, which reruns the same experiment.

Exit codes: 0 success, 2 config error, 3 divergence, 4 collapsed layer.

Environment: ``ANNEALPRUNE_RUNS`` sets the root for auto-named run
directories (default ``./runs``); ``ANNEALPRUNE_THREADS`` caps BLAS threads
(read at package import).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_config, load_config, to_jsonable
from .data import Dataset
from .derivation import DerivationError, PrunedModel, derive, network_from_arrays, verify_equivalence
from .design_space import evaluate_space, generate_instances
from .engine import Parameter
from .indicators import IndicatorSet, binarize, write_trace_csv
from .models import Network, build_network
from .search import FinetuneConfig, SearchDiverged, evaluate, finetune, run_search

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_COLLAPSED = 0, 2, 3, 4
MANIFEST = "manifest.json"

log = logging.getLogger("annealprune")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


class RunManifest:
    """``manifest.json`` of a run directory, rewritten after every change."""

    def __init__(self, run_dir: Path, data: Dict):
        self.dir = Path(run_dir)
        self.data = data

    @classmethod
    def create(cls, run_dir: Path, config: RunConfig, config_source: str) -> "RunManifest":
        run_dir.mkdir(parents=True, exist_ok=True)
        data = {
            "tool": "annealprune",
            "version": __version__,
            "created": _now(),
            "updated": _now(),
            "seed": config.seed,
            "config_source": config_source,
            "config": to_jsonable(config.raw),
            "resolved_target_flops": config.target_flops,
            "unpruned_flops": config.unpruned_flops,
            "artifacts": {},
            "results": {},
            "steps": [],
        }
        m = cls(run_dir, data)
        m.save()
        return m

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        run_dir = Path(run_dir)
        path = run_dir / MANIFEST
        if not path.is_file():
            raise CommandError(f"{run_dir}: no {MANIFEST} (not a run directory)", EXIT_CONFIG)
        return cls(run_dir, json.loads(path.read_text()))

    def config(self) -> RunConfig:
        return build_config(self.data["config"])

    def add_artifact(self, key: str, relpath: str) -> None:
        self.data["artifacts"][key] = relpath

    def artifact(self, key: str) -> Path:
        if key not in self.data["artifacts"]:
            raise CommandError(f"{self.dir}: missing artifact {key!r}; run the producing command first", EXIT_CONFIG)
        return self.dir / self.data["artifacts"][key]

    def record(self, command: str, started: str, status: str, **results) -> None:
        self.data["steps"].append({"command": command, "started": started, "finished": _now(), "status": status})
        if results:
            self.data["results"].setdefault(command, {}).update(to_jsonable(results))
        self.save()

    def save(self) -> None:
        self.data["updated"] = _now()
        tmp = self.dir / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        tmp.replace(self.dir / MANIFEST)


def _read_config(path: str) -> RunConfig:
    """A config file, or the config snapshot inside a run manifest."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    if p.is_file():
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError:
            data = None
        if isinstance(data, dict) and data.get("tool") == "annealprune" and "config" in data:
            return build_config(data["config"])
    return load_config(p)


def _runs_root() -> Path:
    return Path(os.environ.get("ANNEALPRUNE_RUNS", "runs"))


def _new_run_dir(explicit: Optional[str], command: str, seed: int) -> Path:
    if explicit:
        return Path(explicit)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = _runs_root() / f"{command}-{stamp}-seed{seed}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{i}")
        i += 1
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_search(args) -> int:
    config = _read_config(args.config)
    overrides = {}
    if args.no_annealing:
        overrides["annealing"] = False
    if args.no_bilevel:
        overrides["bilevel"] = False
    if args.reg:
        overrides["regularizer"] = args.reg
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        raw = json.loads(json.dumps(config.raw))
        raw["search"].update(overrides)
        if "seed" in overrides:
            raw["finetune"]["seed"] = overrides["seed"]
        config = build_config(raw)

    if args.dry_run:
        print(json.dumps(to_jsonable(config.resolved()), indent=1, sort_keys=True))
        return EXIT_OK

    data, _ = config.load_data()
    run_dir = _new_run_dir(args.run_dir, "search", config.seed)
    manifest = RunManifest.create(run_dir, config, str(args.config))
    manifest.data["data_checksum"] = data.train.checksum()
    started = _now()
    metrics_path = run_dir / "metrics.ndjson"
    manifest.add_artifact("search_log", metrics_path.name)

    with open(metrics_path, "w") as fh:

        def on_epoch(record):
            fh.write(json.dumps(to_jsonable(record), sort_keys=True) + "\n")
            fh.flush()

        try:
            result = run_search(config.spec, data, config.search, on_epoch=on_epoch)
        except SearchDiverged as exc:
            (run_dir / "diverged.json").write_text(json.dumps(to_jsonable(exc.snapshot), indent=1))
            manifest.add_artifact("divergence_snapshot", "diverged.json")
            manifest.record("search", started, "diverged", error=str(exc))
            raise CommandError(str(exc), EXIT_DIVERGED) from None

    sites = list(config.spec.site_widths())
    write_trace_csv(run_dir / "trace.csv", sites, result.trace)
    np.savez(run_dir / "alphas.npz", **result.indicators.snapshot())
    np.savez(run_dir / "supernet.npz", **result.network.state_arrays())
    for key, name in (("trace", "trace.csv"), ("alphas", "alphas.npz"), ("supernet", "supernet.npz")):
        manifest.add_artifact(key, name)
    last = result.log[-1] if result.log else {}
    manifest.record(
        "search",
        started,
        "ok",
        epochs=len(result.log),
        final_temperature=result.indicators.temperature,
        e_flops=last.get("e_flops"),
        frac_binarized=last.get("frac_binarized"),
    )
    print(run_dir)
    return EXIT_OK


def _load_indicators(manifest: RunManifest) -> IndicatorSet:
    alphas = dict(np.load(manifest.artifact("alphas")))
    temperature = manifest.data["results"]["search"]["final_temperature"]
    return IndicatorSet({s: Parameter(v, name=s) for s, v in alphas.items()}, temperature)


def _load_supernet(manifest: RunManifest, config: RunConfig) -> Network:
    return network_from_arrays(config.spec, dict(np.load(manifest.artifact("supernet"))))


def cmd_derive(args) -> int:
    manifest = RunManifest.load(args.run_dir)
    config = manifest.config()
    started = _now()
    indicators = _load_indicators(manifest)
    keep = binarize(indicators, config.search.binarize_threshold)
    supernet = _load_supernet(manifest, config)
    try:
        pruned = derive(supernet, keep)
    except DerivationError as exc:
        manifest.record("derive", started, "collapsed", error=str(exc), site=exc.site)
        raise CommandError(f"{exc}; rerun the search with a larger FLOPs target", EXIT_COLLAPSED) from None
    out = manifest.dir / "derived"
    pruned.save(out)
    report = pruned.flops()
    (manifest.dir / "flops.txt").write_text(report.to_text())
    data, _ = config.load_data()
    batch = data.val.images[: min(64, len(data.val))]
    deviation = verify_equivalence(pruned, supernet, keep, batch)
    soft_gap = verify_equivalence(pruned, supernet, keep, batch, soft_masks=indicators.relaxed_values())
    manifest.add_artifact("derived", "derived")
    manifest.add_artifact("flops_report", "flops.txt")
    manifest.record(
        "derive",
        started,
        "ok",
        flops=report.total,
        unpruned_flops=report.unpruned_total,
        pruning_ratio=report.pruning_ratio,
        widths=dict(pruned.spec.sites),
        equivalence_max_abs=deviation,
        soft_mask_gap=soft_gap,
    )
    print(report.to_text(), end="")
    print(f"supernet/pruned max |logit gap|: {deviation:.3g}")
    return EXIT_OK


def _finetune_config(config: RunConfig, args) -> FinetuneConfig:
    ft = config.finetune
    changes = {}
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "from_scratch", False):
        changes["from_scratch"] = True
    if changes:
        ft = FinetuneConfig(**{**ft.__dict__, **changes})
    return ft


def _write_history(path: Path, history) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(to_jsonable(rec), sort_keys=True) + "\n")


def cmd_finetune(args) -> int:
    manifest = RunManifest.load(args.run_dir)
    config = manifest.config()
    started = _now()
    pruned = PrunedModel.load(manifest.artifact("derived"))
    data, _ = config.load_data()
    ft = _finetune_config(config, args)
    try:
        best, acc, history = finetune(pruned.network, data.train, data.val, ft)
    except SearchDiverged as exc:
        manifest.record("finetune", started, "diverged", error=str(exc))
        raise CommandError(str(exc), EXIT_DIVERGED) from None
    PrunedModel(best, pruned.provenance, pruned.source_spec).save(manifest.dir / "finetuned")
    _write_history(manifest.dir / "finetune.ndjson", history)
    manifest.add_artifact("finetuned", "finetuned")
    manifest.add_artifact("finetune_log", "finetune.ndjson")
    manifest.record("finetune", started, "ok", best_val_accuracy=acc, epochs=ft.epochs)
    print(f"best validation accuracy: {acc:.4f}")
    return EXIT_OK


def _train_baseline(manifest: RunManifest, config: RunConfig, data, ft: FinetuneConfig, eval_set: Dataset) -> float:
    """Accuracy of the unpruned model trained with the fine-tuning recipe (cached)."""
    cached = manifest.data["results"].get("baseline", {}).get("accuracy")
    if cached is not None:
        return cached
    net = build_network(config.spec, np.random.default_rng(ft.seed))
    best, _, history = finetune(net, data.train, data.val, ft)
    acc = evaluate(best, eval_set)
    _write_history(manifest.dir / "baseline.ndjson", history)
    manifest.add_artifact("baseline_log", "baseline.ndjson")
    manifest.record("baseline", _now(), "ok", accuracy=acc)
    return acc


def cmd_eval(args) -> int:
    manifest = RunManifest.load(args.run_dir)
    config = manifest.config()
    started = _now()
    key = "finetuned" if "finetuned" in manifest.data["artifacts"] else "derived"
    pruned = PrunedModel.load(manifest.artifact(key))
    data, test = config.load_data()
    eval_set, split_name = (test, "test") if test is not None and len(test) else (data.val, "val")
    pruned_acc = evaluate(pruned.network, eval_set)
    if args.baseline_acc is not None:
        unpruned_acc = float(args.baseline_acc)
    elif args.baseline is not None:
        other = RunManifest.load(args.baseline)
        unpruned_acc = other.data["results"].get("eval", {}).get("pruned_accuracy")
        if unpruned_acc is None:
            raise CommandError(f"{args.baseline}: no evaluated accuracy to use as the baseline", EXIT_CONFIG)
    else:
        unpruned_acc = _train_baseline(manifest, config, data, _finetune_config(config, args), eval_set)
    drop = unpruned_acc - pruned_acc
    manifest.record(
        "eval",
        started,
        "ok",
        model=key,
        split=split_name,
        pruned_accuracy=pruned_acc,
        unpruned_accuracy=unpruned_acc,
        acc_drop=drop,
    )
    print(f"{split_name} accuracy pruned {100 * pruned_acc:.2f}%  unpruned {100 * unpruned_acc:.2f}%  drop {100 * drop:.2f}%")
    return EXIT_OK


def cmd_space(args) -> int:
    config = _read_config(args.config)
    if args.seed is not None:
        raw = json.loads(json.dumps(config.raw))
        raw["search"]["seed"] = raw["finetune"]["seed"] = args.seed
        config = build_config(raw)
    space = config.space_config(kind=args.kind, n=args.n)
    run_dir = _new_run_dir(args.run_dir, f"space-{space.kind}", config.seed)
    manifest = RunManifest.create(run_dir, config, str(args.config))
    started = _now()
    data, _ = config.load_data()
    instances = generate_instances(space, (data.train, data.val))
    ft = _finetune_config(config, args)
    workers = args.workers or config.space["workers"]
    summary = evaluate_space(instances, data.train, data.val, ft, kind=space.kind, workers=workers)
    summary.to_csv(run_dir / "space_summary.csv")
    manifest.add_artifact("space_summary", "space_summary.csv")
    best = summary.best
    manifest.record(
        "space",
        started,
        summary.status,
        kind=space.kind,
        requested=space.num_instances,
        instances=len(summary.results),
        diverged=sum(r.diverged for r in summary.results),
        best_accuracy=best.accuracy if best else None,
        best_instance=best.index if best else None,
        mean_accuracy=summary.mean,
        std_accuracy=summary.std,
    )
    print(f"{space.kind}: {len(summary.results)} instances ({summary.status})")
    if best is not None:
        print(f"best {100 * best.accuracy:.2f}% (instance {best.index})  mean {100 * summary.mean:.2f}%  std {100 * summary.std:.2f}%")
    print(run_dir)
    return EXIT_OK


REPORT_COLUMNS = ("run", "Pruning Acc", "Acc Drop", "FLOPs (pruning ratio)")


def report_row(manifest: RunManifest) -> Dict[str, str]:
    res = manifest.data["results"]
    derived = res.get("derive", {})
    ev = res.get("eval", {})
    flops = ""
    if "flops" in derived:
        flops = f"{derived['flops']:.2E} ({100 * derived['pruning_ratio']:.1f}%)"
    acc = f"{100 * ev['pruned_accuracy']:.2f}%" if "pruned_accuracy" in ev else ""
    drop = f"{100 * ev['acc_drop']:.2f}%" if "acc_drop" in ev else ""
    return {"run": manifest.dir.name, "Pruning Acc": acc, "Acc Drop": drop, "FLOPs (pruning ratio)": flops}


def format_table(rows: Sequence[Dict[str, str]]) -> str:
    widths = {c: max([len(c)] + [len(r[c]) for r in rows]) for c in REPORT_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in REPORT_COLUMNS))
    lines += ["  ".join(r[c].ljust(widths[c]) for c in REPORT_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = [report_row(RunManifest.load(d)) for d in args.run_dirs]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    else:
        for d in args.run_dirs:
            (Path(d) / "report.csv").write_text(buf.getvalue())
    print(format_table(rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="annealprune", description="Annealed-indicator channel pruning pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch details")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run the indicator search and write a run directory")
    s.add_argument("config", help="JSON config file, or a run directory / manifest to repeat")
    s.add_argument("--run-dir", help="output directory (default: auto-named under $ANNEALPRUNE_RUNS)")
    s.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    s.add_argument("--no-annealing", action="store_true", help="fixed T = 1, keep channels with relaxed value >= 0.55")
    s.add_argument("--no-bilevel", action="store_true", help="update weights and indicators jointly on merged data")
    s.add_argument("--reg", choices=("flops", "lasso"), help="budget regularizer (lasso replaces the FLOPs term)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_search)

    d = sub.add_parser("derive", help="binarize indicators and slice out the pruned model")
    d.add_argument("run_dir")
    d.set_defaults(func=cmd_derive)

    f = sub.add_parser("finetune", help="fine-tune the derived model")
    f.add_argument("run_dir")
    f.add_argument("--epochs", type=int)
    f.add_argument("--from-scratch", action="store_true", help="reinitialize instead of inheriting weights")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="accuracy of the pruned model against the unpruned baseline")
    e.add_argument("run_dir")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--baseline-acc", type=float, help="unpruned accuracy in [0, 1] instead of training a baseline")
    g.add_argument("--baseline", help="run directory whose evaluated accuracy is the baseline")
    e.add_argument("--epochs", type=int, help="baseline training epochs (default: finetune.epochs)")
    e.set_defaults(func=cmd_eval)

    sp = sub.add_parser("space", help="sample and train Random / Constrained / Slimming instances")
    sp.add_argument("config")
    sp.add_argument("--kind", choices=("random", "constrained", "slimming"))
    sp.add_argument("--n", type=int, help="number of instances")
    sp.add_argument("--epochs", type=int, help="training epochs per instance")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--run-dir")
    sp.set_defaults(func=cmd_space)

    r = sub.add_parser("report", help="Pruning Acc / Acc Drop / FLOPs table for run directories")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--csv", help="write the CSV here instead of report.csv in each run directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
