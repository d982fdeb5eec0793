"""Bi-level indicator search, fine-tuning and evaluation loops.

Per training batch the search takes one Adam step on the auxiliary
parameters (validation batch, cross-entropy plus structural regularizers)
and then one SGD step on the weights (training batch, cross-entropy only).
The indicator gradient treats the current weights as the lower-level
optimum. The temperature is updated once per epoch.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import engine as E
from .data import Dataset, SplitDataset, batches
from .derivation import PrunedModel, derive, discrete_flops
from .indicators import (
    IndicatorSet,
    TemperatureSchedule,
    binarization_gap,
    binarize,
    temperature_at,
    trace_counts,
)
from .models import ArchitectureSpec, Network, build_network
from .regularizers import RegularizerConfig, regularization

logger = logging.getLogger(__name__)

NO_ANNEALING_THRESHOLD = 0.55
RESIDUAL_LAMBDA_SYM = 0.01
DESK_SCALE = {"n_max": 50, "batch_size": 64, "a_lr": 0.05}


class SearchDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: Dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class SearchConfig:
    n_max: int = 100
    schedule: str = "linear"
    t0: float = 1.0
    batch_size: int = 256
    w_lr: float = 0.1
    w_momentum: float = 0.9
    w_weight_decay: float = 5e-5
    a_lr: float = 1e-3
    a_betas: Tuple[float, float] = (0.5, 0.999)
    a_weight_decay: float = 1e-3
    a_decoupled_decay: bool = True
    lambda_flops: float = 2.0
    epsilon: float = 0.05
    lambda_sym: Optional[float] = None  # None: 0.01 for residual nets, 0 otherwise
    lambda_lasso: float = 0.0
    target_flops: Optional[float] = None
    target_fraction: Optional[float] = None
    regularizer: str = "flops"  # "flops" or "lasso" (the R_FLOPs -> R_lasso swap)
    annealing: bool = True
    bilevel: bool = True
    seed: int = 0
    trace_every: int = 20
    augment_pad: int = 0
    augment_flip: bool = False

    @classmethod
    def desk_scale(cls, **overrides) -> "SearchConfig":
        """Settings for the small CPU runs: 50 epochs, batch 64, faster indicator steps.

        A desk-scale run takes a few hundred indicator steps instead of tens of
        thousands, so the indicator learning rate is raised to let the
        indicators travel a comparable distance.
        """
        return cls(**{**DESK_SCALE, **overrides})

    def resolve_target(self, unpruned_flops: int) -> Optional[float]:
        if self.target_flops is not None:
            return float(self.target_flops)
        if self.target_fraction is not None:
            return float(self.target_fraction) * unpruned_flops
        return None

    def resolved_lambda_sym(self, family: str) -> float:
        if self.lambda_sym is not None:
            return float(self.lambda_sym)
        return RESIDUAL_LAMBDA_SYM if family == "resnet" else 0.0

    def regularizer_config(self, unpruned_flops: int, family: str = "resnet") -> RegularizerConfig:
        lam_flops, lam_lasso = self.lambda_flops, self.lambda_lasso
        if self.regularizer == "lasso":
            lam_flops = 0.0
        target = self.resolve_target(unpruned_flops)
        return RegularizerConfig(
            lambda_flops=lam_flops if target is not None else 0.0,
            epsilon=self.epsilon,
            lambda_sym=self.resolved_lambda_sym(family),
            lambda_lasso=lam_lasso,
            target_flops=target,
        )

    def temperature_schedule(self) -> TemperatureSchedule:
        kind = self.schedule if self.annealing else "constant"
        return TemperatureSchedule(kind, self.t0, self.n_max)

    @property
    def binarize_threshold(self) -> Optional[float]:
        return None if self.annealing else NO_ANNEALING_THRESHOLD


@dataclass
class SearchState:
    network: Network
    indicators: IndicatorSet
    w_optimizer: E.SGD
    a_optimizer: E.Adam
    schedule: TemperatureSchedule
    reg: RegularizerConfig
    config: SearchConfig
    rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def create(cls, spec: ArchitectureSpec, config: SearchConfig) -> "SearchState":
        rng = np.random.default_rng(config.seed)
        net = build_network(spec, rng)
        ind = IndicatorSet.initialize(spec.site_widths(), rng, site_map=spec.indicator_sites)
        schedule = config.temperature_schedule()
        ind.set_temperature(temperature_at(schedule, 0))
        w_opt = E.SGD(net.parameters(), config.w_lr, config.w_momentum, config.w_weight_decay)
        a_opt = E.Adam(
            ind.parameters(),
            config.a_lr,
            config.a_betas,
            weight_decay=config.a_weight_decay,
            decoupled=config.a_decoupled_decay,
        )
        reg = config.regularizer_config(discrete_flops(spec).total, spec.family)
        return cls(net, ind, w_opt, a_opt, schedule, reg, config, rng)


@dataclass
class SearchResult:
    network: Network
    indicators: IndicatorSet
    config: SearchConfig
    log: List[Dict] = field(default_factory=list)
    trace: List[Dict] = field(default_factory=list)

    @property
    def spec(self) -> ArchitectureSpec:
        return self.network.spec

    def keep_masks(self) -> Dict[str, np.ndarray]:
        return binarize(self.indicators, self.config.binarize_threshold)

    def derive(self) -> PrunedModel:
        return derive(self.network, self.keep_masks())


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def _finite_or_raise(value: float, state: SearchState, where: str) -> None:
    if not math.isfinite(value):
        alphas = np.concatenate([a.data.ravel() for a in state.indicators.parameters()])
        snapshot = {
            "epoch": state.epoch,
            "where": where,
            "temperature": state.indicators.temperature,
            "alpha_min": float(alphas.min()),
            "alpha_max": float(alphas.max()),
            "w_lr": state.w_optimizer.lr,
        }
        raise SearchDiverged(f"non-finite {where} loss at epoch {state.epoch}", snapshot)


def search_epoch(state: SearchState, data: SplitDataset) -> Dict:
    """Run one epoch of alternating updates, then anneal the temperature."""
    cfg = state.config
    if state.epoch >= state.schedule.n_max:
        raise ValueError(f"search already finished ({state.epoch} epochs)")
    net, ind = state.network, state.indicators
    w_params, a_params = net.parameters(), ind.parameters()
    temperature = temperature_at(state.schedule, state.epoch)
    ind.set_temperature(temperature)
    state.w_optimizer.lr = E.cosine_lr(cfg.w_lr, state.epoch, state.schedule.n_max)

    train = data.train if cfg.bilevel else data.merged()
    train_batches = batches(train, cfg.batch_size, state.rng, cfg.augment_pad, cfg.augment_flip)
    val_batches = itertools.cycle(list(batches(data.val, cfg.batch_size, state.rng))) if cfg.bilevel else None

    train_losses, val_losses, reg_values = [], [], {}
    for xb, yb in train_batches:
        if cfg.bilevel:
            xv, yv = next(val_batches)
            _set_requires_grad(w_params, False)
            _set_requires_grad(a_params, True)
            logits = net.forward(xv, ind.relaxed_all(), train=True)
            l_val = E.softmax_cross_entropy(logits, yv)
            reg_total, reg_values = regularization(ind, net.spec, state.reg)
            loss = reg_total + l_val.astype(np.float64)
            _finite_or_raise(float(loss.data), state, "validation")
            state.a_optimizer.zero_grad()
            loss.backward()
            state.a_optimizer.step()
            val_losses.append(float(l_val.data))

            _set_requires_grad(w_params, True)
            _set_requires_grad(a_params, False)
            logits = net.forward(xb, ind.relaxed_all(), train=True)
            l_train = E.softmax_cross_entropy(logits, yb)
            _finite_or_raise(float(l_train.data), state, "training")
            state.w_optimizer.zero_grad()
            l_train.backward()
            state.w_optimizer.step()
            train_losses.append(float(l_train.data))
        else:
            _set_requires_grad(w_params, True)
            _set_requires_grad(a_params, True)
            logits = net.forward(xb, ind.relaxed_all(), train=True)
            l_train = E.softmax_cross_entropy(logits, yb)
            reg_total, reg_values = regularization(ind, net.spec, state.reg)
            loss = reg_total + l_train.astype(np.float64)
            _finite_or_raise(float(loss.data), state, "training")
            state.a_optimizer.zero_grad()
            state.w_optimizer.zero_grad()
            loss.backward()
            state.a_optimizer.step()
            state.w_optimizer.step()
            train_losses.append(float(l_train.data))
    _set_requires_grad(w_params, True)
    _set_requires_grad(a_params, True)

    state.epoch += 1
    next_t = temperature_at(state.schedule, state.epoch)
    ind.set_temperature(next_t)
    _, end_values = regularization(ind, net.spec, state.reg)
    gap = binarization_gap(ind)
    record = {
        "epoch": state.epoch,
        "temperature": temperature,
        "next_temperature": next_t,
        "w_lr": state.w_optimizer.lr,
        "l_train": float(np.mean(train_losses)) if train_losses else float("nan"),
        "l_val": float(np.mean(val_losses)) if val_losses else float("nan"),
        "e_flops": end_values["e_flops"],
        "target_flops": state.reg.target_flops,
        "regularizers": {k: v for k, v in end_values.items() if k != "e_flops"},
        "gap_mean": float(gap.mean()) if gap.size else 0.0,
        "frac_binarized": float(np.mean(gap < 0.01)) if gap.size else 1.0,
        "trace_counts": trace_counts(ind),
    }
    logger.debug("epoch %d: %s", state.epoch, record)
    return record


def run_search(
    spec: ArchitectureSpec,
    data: SplitDataset,
    config: SearchConfig,
    on_epoch: Optional[Callable[[Dict], None]] = None,
) -> SearchResult:
    """Full search from a fresh, seeded initialization.

    The recoverability trace is recorded at epoch 0, every ``trace_every``
    epochs and at the final epoch.
    """
    state = SearchState.create(spec, config)
    result = SearchResult(state.network, state.indicators, config)
    result.trace.append(_trace_row(state))
    for _ in range(config.n_max):
        record = search_epoch(state, data)
        result.log.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if state.epoch % config.trace_every == 0 or state.epoch == config.n_max:
            result.trace.append(_trace_row(state))
    return result


def _trace_row(state: SearchState) -> Dict:
    return {
        "epoch": state.epoch,
        "temperature": state.indicators.temperature,
        "counts": trace_counts(state.indicators),
    }


# ---------------------------------------------------------------------------
# supervised training and evaluation
# ---------------------------------------------------------------------------


def evaluate(net: Network, dataset: Dataset, batch_size: int = 256, masks=None) -> float:
    """Top-1 accuracy in eval mode."""
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for xb, yb in batches(dataset, batch_size):
        logits = net.forward(xb, masks, train=False)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return correct / len(dataset)


@dataclass
class FinetuneConfig:
    epochs: int = 300
    lr: float = 0.1
    warmup: int = 5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256
    seed: int = 0
    augment_pad: int = 0
    augment_flip: bool = False
    from_scratch: bool = False


def finetune(
    net: Network,
    train: Dataset,
    val: Dataset,
    config: FinetuneConfig,
) -> Tuple[Network, float, List[Dict]]:
    """SGD with warmup + cosine schedule; returns the best-validation snapshot.

    With ``epochs == 0`` the network is returned untouched together with its
    current accuracy.
    """
    rng = np.random.default_rng(config.seed)
    if config.from_scratch:
        net = build_network(net.spec, rng)
    best_acc = evaluate(net, val)
    best = net.copy()
    history: List[Dict] = []
    opt = E.SGD(net.parameters(), config.lr, config.momentum, config.weight_decay)
    for epoch in range(config.epochs):
        opt.lr = E.warmup_cosine_lr(config.lr, epoch, config.epochs, config.warmup)
        losses = []
        for xb, yb in batches(train, config.batch_size, rng, config.augment_pad, config.augment_flip):
            loss = E.softmax_cross_entropy(net.forward(xb, train=True), yb)
            if not math.isfinite(float(loss.data)):
                raise SearchDiverged(f"non-finite fine-tuning loss at epoch {epoch}", {"epoch": epoch, "lr": opt.lr})
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        acc = evaluate(net, val)
        history.append({"epoch": epoch + 1, "lr": opt.lr, "loss": float(np.mean(losses)), "val_acc": acc})
        if acc > best_acc:
            best_acc, best = acc, net.copy()
    return best, best_acc, history


def config_dict(config) -> Dict:
    return asdict(config)
