"""Compare Random and Constrained width sampling inside one FLOPs band.

Constrained instances share one width per stage across residual additions, so
their width asymmetry is always zero. Random instances usually are not.

Run: python demos/design_spaces.py   (a few minutes on one CPU core)
"""

import numpy as np

from annealprune.data import make_synthetic_task, split
from annealprune.derivation import discrete_flops
from annealprune.design_space import DesignSpaceConfig, evaluate_space, generate_instances, width_symmetry
from annealprune.models import resnet_spec
from annealprune.search import FinetuneConfig

data = split(make_synthetic_task(10, 60, 12, seed=0, noise=0.5), 0.7, 0)
base = resnet_spec(14, (8, 16, 32), 10, (3, 12, 12))
full = discrete_flops(base).total
band = (0.4 * full, 0.7 * full)
ft = FinetuneConfig(epochs=8, batch_size=64, warmup=1)

for kind in ("random", "constrained"):
    instances = generate_instances(DesignSpaceConfig(base, kind, num_instances=6, flops_band=band, seed=0))
    sym = [width_symmetry(inst.spec) for inst in instances]
    summary = evaluate_space(instances, data.train, data.val, ft, kind)
    print(f"{kind:12s} n={len(instances)}  asymmetry mean {np.mean(sym):.2f}  "
          f"best {summary.best.accuracy:.3f}  mean {summary.mean:.3f} +- {summary.std:.3f}")  # fmt: skip
