"""Run configuration: a single JSON file, validated field by field.

Layout (every section optional except ``model`` and ``dataset``)::

    {
      "seed": 0,
      "model":    {"family": "resnet", "depth": 8, "widths": [8, 16, 32], "num_classes": 10},
      "dataset":  {"kind": "synthetic", "image_size": 12, "noise": 0.5,
                   "examples_per_class": 100, "split_ratio": 0.7},
      "search":   {"n_max": 50, "batch_size": 64, "a_lr": 0.05, "target_fraction": 0.6},
      "finetune": {"epochs": 30, "batch_size": 64},
      "space":    {"kind": "constrained", "num_instances": 20, "flops_band_fraction": [0.5, 0.7]}
    }

``dataset.kind`` is ``synthetic``, ``csv`` or ``idx``; the last two need
``dataset.path``. The FLOPs target is given either as ``search.target_flops``
(absolute multiply-accumulates) or ``search.target_fraction`` (of the
unpruned model), never both. A top-level ``seed`` is copied into every
section that has no seed of its own.

Validation collects every problem before reporting, so one run of
``--dry-run`` shows all of them.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .data import Dataset, SplitDataset, load_small_image_corpus, make_synthetic_task, normalize, split
from .derivation import discrete_flops
from .design_space import KINDS as SPACE_KINDS
from .design_space import DesignSpaceConfig
from .indicators import SCHEDULE_KINDS
from .models import ArchitectureSpec, mobilenet_spec, resnet_spec
from .search import FinetuneConfig, SearchConfig


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))
        self.errors = list(errors)


MODEL_DEFAULTS = {
    "family": "resnet",
    "depth": 8,
    "widths": [8, 16, 32],
    "width_multiplier": 1.0,
    "num_classes": None,  # taken from the dataset when omitted
}
DATASET_DEFAULTS = {
    "kind": "synthetic",
    "path": None,
    "test_path": None,
    "shape": None,
    "num_classes": 10,
    "examples_per_class": 100,
    "test_examples_per_class": 50,
    "image_size": 12,
    "noise": 0.5,
    "seed": 0,
    "test_seed": 99,
    "split_ratio": 0.7,
    "split_seed": 0,
}
SPACE_DEFAULTS = {
    "kind": "random",
    "num_instances": 10,
    "flops_band": None,
    "flops_band_fraction": None,
    "u_range": [0.5, 1.0],
    "workers": 1,
    "slimming_epochs": 10,
    "slimming_penalty": 1e-4,
}


def _dataclass_defaults(cls) -> Dict[str, Any]:
    out = {}
    for f in fields(cls):
        value = f.default
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


SECTIONS = {
    "model": MODEL_DEFAULTS,
    "dataset": DATASET_DEFAULTS,
    "search": _dataclass_defaults(SearchConfig),
    "finetune": _dataclass_defaults(FinetuneConfig),
    "space": SPACE_DEFAULTS,
}


@dataclass
class RunConfig:
    raw: Dict[str, Dict[str, Any]]
    search: SearchConfig
    finetune: FinetuneConfig
    spec: ArchitectureSpec
    space: Dict[str, Any] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.search.seed

    @property
    def unpruned_flops(self) -> int:
        return discrete_flops(self.spec).total

    @property
    def target_flops(self) -> Optional[float]:
        return self.search.resolve_target(self.unpruned_flops)

    def resolved(self) -> Dict[str, Any]:
        """The full configuration with defaults filled in and F made absolute."""
        out = copy.deepcopy(self.raw)
        out["search"]["resolved_target_flops"] = self.target_flops
        out["search"]["unpruned_flops"] = self.unpruned_flops
        return out

    def load_data(self) -> Tuple[SplitDataset, Optional[Dataset]]:
        """(train/val split, optional normalized test set)."""
        d = self.raw["dataset"]
        test = None
        if d["kind"] == "synthetic":
            ds = make_synthetic_task(d["num_classes"], d["examples_per_class"], d["image_size"], d["seed"], d["noise"])
            test = make_synthetic_task(
                d["num_classes"], d["test_examples_per_class"], d["image_size"], d["test_seed"], d["noise"]
            )
        else:
            shape = tuple(d["shape"]) if d["shape"] else None
            ds = load_small_image_corpus(d["path"], d["kind"], shape, d["num_classes"])
            if d["test_path"]:
                test = load_small_image_corpus(d["test_path"], d["kind"], shape, d["num_classes"])
        parts = split(ds, d["split_ratio"], d["split_seed"])
        if test is not None:
            test = normalize(test, parts.train.mean, parts.train.std)
        return parts, test

    def space_config(self, kind: Optional[str] = None, n: Optional[int] = None) -> DesignSpaceConfig:
        s = self.space
        band = s["flops_band"]
        if s["flops_band_fraction"] is not None:
            lo, hi = s["flops_band_fraction"]
            band = (lo * self.unpruned_flops, hi * self.unpruned_flops)
        return DesignSpaceConfig(
            self.spec,
            kind=kind or s["kind"],
            num_instances=s["num_instances"] if n is None else n,
            flops_band=tuple(band) if band is not None else None,
            seed=self.seed,
            u_range=tuple(s["u_range"]),
            slimming_epochs=s["slimming_epochs"],
            slimming_penalty=s["slimming_penalty"],
            batch_size=self.finetune.batch_size,
        )


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


class _Checker:
    def __init__(self, section: str, values: Dict[str, Any], errors: List[str]):
        self.section, self.values, self.errors = section, values, errors

    def fail(self, key: str, msg: str) -> None:
        self.errors.append(f"{self.section}.{key}: {msg}")

    def int(self, key: str, low: Optional[int] = None, high: Optional[int] = None) -> None:
        v = self.values[key]
        if not _is_int(v):
            self.fail(key, f"expected an integer, got {v!r}")
        elif low is not None and v < low:
            self.fail(key, f"must be >= {low}, got {v}")
        elif high is not None and v > high:
            self.fail(key, f"must be <= {high}, got {v}")

    def num(self, key: str, low=None, high=None, low_open=False, high_open=False, optional=False) -> None:
        v = self.values[key]
        if v is None and optional:
            return
        if not _is_num(v):
            self.fail(key, f"expected a number, got {v!r}")
            return
        if low is not None and (v <= low if low_open else v < low):
            self.fail(key, f"must be {'>' if low_open else '>='} {low}, got {v}")
        if high is not None and (v >= high if high_open else v > high):
            self.fail(key, f"must be {'<' if high_open else '<='} {high}, got {v}")

    def bool(self, key: str) -> None:
        if not isinstance(self.values[key], bool):
            self.fail(key, f"expected true/false, got {self.values[key]!r}")

    def choice(self, key: str, options) -> None:
        if self.values[key] not in options:
            self.fail(key, f"must be one of {list(options)}, got {self.values[key]!r}")

    def pair(self, key: str, optional=True) -> bool:
        v = self.values[key]
        if v is None and optional:
            return False
        if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(_is_num(x) for x in v)):
            self.fail(key, f"expected a [low, high] pair of numbers, got {v!r}")
            return False
        return True


def _merge(data: Dict[str, Any], errors: List[str]) -> Dict[str, Dict[str, Any]]:
    allowed = set(SECTIONS) | {"seed"}
    for key in data:
        if key not in allowed:
            errors.append(f"{key}: unknown section (expected one of {sorted(allowed)})")
    merged = {}
    for name, defaults in SECTIONS.items():
        given = data.get(name, {})
        if not isinstance(given, dict):
            errors.append(f"{name}: expected an object, got {type(given).__name__}")
            given = {}
        for key in given:
            if key not in defaults:
                errors.append(f"{name}.{key}: unknown field")
        sec = copy.deepcopy(defaults)
        sec.update({k: v for k, v in given.items() if k in defaults})
        merged[name] = sec
    if "seed" in data:
        if not _is_int(data["seed"]):
            errors.append(f"seed: expected an integer, got {data['seed']!r}")
        else:
            for name in ("search", "finetune"):
                given = data.get(name)
                if not (isinstance(given, dict) and "seed" in given):
                    merged[name]["seed"] = data["seed"]
    if "model" not in data:
        errors.append("model: section is required")
    if "dataset" not in data:
        errors.append("dataset: section is required")
    return merged


def _check_model(m, errors):
    c = _Checker("model", m, errors)
    c.choice("family", ("resnet", "mobilenet"))
    if m["num_classes"] is not None:
        c.int("num_classes", 2)
    if m["family"] == "resnet":
        c.int("depth", 8)
        if _is_int(m["depth"]) and m["depth"] >= 8 and (m["depth"] - 2) % 6:
            c.fail("depth", f"must be 6n+2 (8, 14, 20, 56, 110, ...), got {m['depth']}")
        w = m["widths"]
        if not (isinstance(w, list) and len(w) == 3 and all(_is_int(x) and x >= 1 for x in w)):
            c.fail("widths", f"expected three positive integers, got {w!r}")
    else:
        c.num("width_multiplier", 0, 1, low_open=True)


def _check_dataset(d, errors):
    c = _Checker("dataset", d, errors)
    c.choice("kind", ("synthetic", "csv", "idx"))
    c.num("split_ratio", 0, 1, low_open=True, high_open=True)
    c.int("split_seed")
    if d["kind"] == "synthetic":
        c.int("num_classes", 2)
        c.int("examples_per_class", 2)
        c.int("test_examples_per_class", 0)
        c.int("image_size", 4)
        c.num("noise", 0)
        c.int("seed")
        c.int("test_seed")
    elif d["kind"] in ("csv", "idx"):
        if not d["path"]:
            c.fail("path", f"required for dataset.kind = {d['kind']!r}")
        elif not Path(d["path"]).is_file():
            c.fail("path", f"no such file: {d['path']}")
        if d["test_path"] and not Path(d["test_path"]).is_file():
            c.fail("test_path", f"no such file: {d['test_path']}")
        if d["shape"] is not None and not (
            isinstance(d["shape"], list) and len(d["shape"]) == 3 and all(_is_int(x) and x >= 1 for x in d["shape"])
        ):
            c.fail("shape", f"expected [C, H, W], got {d['shape']!r}")


def _check_search(s, errors):
    c = _Checker("search", s, errors)
    c.int("n_max", 0)
    c.choice("schedule", SCHEDULE_KINDS)
    c.num("t0", 0, low_open=True)
    c.int("batch_size", 1)
    for key in ("w_lr", "a_lr", "w_weight_decay", "a_weight_decay", "lambda_flops", "lambda_lasso"):
        c.num(key, 0)
    c.num("lambda_sym", 0, optional=True)
    c.num("w_momentum", 0, 1, high_open=True)
    c.num("epsilon", 0, 1, low_open=True, high_open=True)
    betas = s["a_betas"]
    if not (isinstance(betas, (list, tuple)) and len(betas) == 2 and all(_is_num(b) and 0 <= b < 1 for b in betas)):
        c.fail("a_betas", f"expected two numbers in [0, 1), got {betas!r}")
    c.num("target_flops", 0, low_open=True, optional=True)
    c.num("target_fraction", 0, 1, low_open=True, optional=True)
    if s["target_flops"] is not None and s["target_fraction"] is not None:
        c.fail("target_flops", "give either target_flops or target_fraction, not both")
    c.choice("regularizer", ("flops", "lasso"))
    if s["regularizer"] == "flops" and _is_num(s["lambda_flops"]) and s["lambda_flops"] > 0:
        if s["target_flops"] is None and s["target_fraction"] is None:
            c.fail("target_fraction", "the FLOPs regularizer needs target_flops or target_fraction")
    for key in ("annealing", "bilevel", "augment_flip", "a_decoupled_decay"):
        c.bool(key)
    c.int("seed")
    c.int("trace_every", 1)
    c.int("augment_pad", 0)


def _check_finetune(f, errors):
    c = _Checker("finetune", f, errors)
    c.int("epochs", 0)
    c.num("lr", 0)
    c.int("warmup", 0)
    c.num("momentum", 0, 1, high_open=True)
    c.num("weight_decay", 0)
    c.int("batch_size", 1)
    c.int("seed")
    c.int("augment_pad", 0)
    c.bool("augment_flip")
    c.bool("from_scratch")


def _check_space(s, errors):
    c = _Checker("space", s, errors)
    c.choice("kind", SPACE_KINDS)
    c.int("num_instances", 0)
    c.int("workers", 1)
    c.int("slimming_epochs", 0)
    c.num("slimming_penalty", 0)
    if c.pair("u_range", optional=False):
        lo, hi = s["u_range"]
        if not 0 < lo <= hi <= 1:
            c.fail("u_range", f"must satisfy 0 < low <= high <= 1, got {s['u_range']}")
    for key in ("flops_band", "flops_band_fraction"):
        if c.pair(key) and s[key][0] > s[key][1]:
            c.fail(key, f"low exceeds high in {s[key]}")
    if s["flops_band"] is not None and s["flops_band_fraction"] is not None:
        c.fail("flops_band", "give either flops_band or flops_band_fraction, not both")


def build_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a parsed config dict; raises :class:`ConfigError` listing every problem."""
    errors: List[str] = []
    if not isinstance(data, dict):
        raise ConfigError(["top level: expected a JSON object"])
    merged = _merge(data, errors)
    _check_model(merged["model"], errors)
    _check_dataset(merged["dataset"], errors)
    _check_search(merged["search"], errors)
    _check_finetune(merged["finetune"], errors)
    _check_space(merged["space"], errors)
    if errors:
        raise ConfigError(errors)

    m, d = merged["model"], merged["dataset"]
    if d["kind"] == "synthetic":
        input_shape = (3, d["image_size"], d["image_size"])
        num_classes = d["num_classes"]
    else:
        # the corpus is read here so the model matches its image shape
        ds = load_small_image_corpus(d["path"], d["kind"], tuple(d["shape"]) if d["shape"] else None)
        input_shape = ds.image_shape
        num_classes = max(ds.num_classes, d["num_classes"])
    if m["num_classes"] is None:
        m["num_classes"] = num_classes
    elif m["num_classes"] != num_classes:
        raise ConfigError([f"model.num_classes: {m['num_classes']} does not match the dataset's {num_classes} classes"])
    if m["family"] == "resnet":
        spec = resnet_spec(m["depth"], tuple(m["widths"]), num_classes, input_shape)
    else:
        spec = mobilenet_spec(m["width_multiplier"], num_classes, input_shape)

    s = dict(merged["search"])
    s["a_betas"] = tuple(s["a_betas"])
    search = SearchConfig(**s)
    finetune = FinetuneConfig(**merged["finetune"])
    return RunConfig(merged, search, finetune, spec, merged["space"])


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    return build_config(data)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
