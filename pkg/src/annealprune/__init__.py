"""Channel pruning by annealed, differentiable channel indicators.

A supernet carries one auxiliary parameter per prunable channel. Its
sigmoid, sharpened by a falling temperature, gates the channel. Weights and
indicators are trained in alternation under a FLOPs-budget penalty, and the
converged indicators are binarized into a smaller network.
"""

import os as _os

_threads = _os.environ.get("ANNEALPRUNE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .data import Dataset, SplitDataset, load_small_image_corpus, make_synthetic_task, split  # noqa: E402
from .derivation import (  # noqa: E402
    DerivationError,
    FlopsReport,
    PrunedModel,
    derive,
    discrete_flops,
    verify_equivalence,
)
from .design_space import DesignSpaceConfig, evaluate_space, generate_instances, sample_instance  # noqa: E402
from .indicators import IndicatorSet, TemperatureSchedule, binarize, relaxed_indicator, temperature_at  # noqa: E402
from .models import ArchitectureSpec, Network, build_mobilenet, build_resnet, mobilenet_spec, resnet_spec  # noqa: E402
from .regularizers import RegularizerConfig, flops_expectation, flops_regularizer, lasso, symmetry  # noqa: E402
from .search import (  # noqa: E402
    FinetuneConfig,
    SearchConfig,
    SearchDiverged,
    SearchResult,
    evaluate,
    finetune,
    run_search,
    search_epoch,
)

__all__ = [
    "ArchitectureSpec",
    "Dataset",
    "DerivationError",
    "DesignSpaceConfig",
    "FinetuneConfig",
    "FlopsReport",
    "IndicatorSet",
    "Network",
    "PrunedModel",
    "RegularizerConfig",
    "SearchConfig",
    "SearchDiverged",
    "SearchResult",
    "SplitDataset",
    "TemperatureSchedule",
    "binarize",
    "build_mobilenet",
    "build_resnet",
    "derive",
    "discrete_flops",
    "evaluate",
    "evaluate_space",
    "finetune",
    "flops_expectation",
    "flops_regularizer",
    "generate_instances",
    "lasso",
    "load_small_image_corpus",
    "make_synthetic_task",
    "mobilenet_spec",
    "relaxed_indicator",
    "resnet_spec",
    "run_search",
    "sample_instance",
    "search_epoch",
    "split",
    "symmetry",
    "temperature_at",
    "verify_equivalence",
]
