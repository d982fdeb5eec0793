"""Prune a small ResNet-8 on the synthetic bar task, then slice out the derived model.

Run: python demos/search_and_derive.py   (about a minute on one CPU core)
"""


from annealprune.data import make_synthetic_task, split
from annealprune.derivation import discrete_flops, verify_equivalence
from annealprune.indicators import binarization_gap
from annealprune.models import resnet_spec
from annealprune.search import FinetuneConfig, SearchConfig, evaluate, finetune, run_search

data = split(make_synthetic_task(10, 100, 12, seed=0, noise=0.5), 0.7, 0)
spec = resnet_spec(8, (8, 16, 32), 10, (3, 12, 12))
full = discrete_flops(spec).total
cfg = SearchConfig.desk_scale(target_fraction=0.6, seed=0)


def show(rec):
    if rec["epoch"] % 10 == 0 or rec["epoch"] == cfg.n_max:
        print(f"epoch {rec['epoch']:3d}  T={rec['temperature']:.3f}  E[FLOPs]/full={rec['e_flops'] / full:.3f}  "
              f"mean gap={rec['gap_mean']:.2e}  binarized={rec['frac_binarized']:.3f}")  # fmt: skip


print(f"unpruned FLOPs {full:,}, target {0.6 * full:,.0f}")
result = run_search(spec, data, cfg, on_epoch=show)
print(f"final gap max {binarization_gap(result.indicators).max():.2e}")

# channel counts per site at the traced epochs; a dip followed by a rise is a recovered channel
sites = list(result.trace[0]["counts"])
print("epoch " + " ".join(f"{s:>8}" for s in sites))
for row in result.trace:
    print(f"{row['epoch']:5d} " + " ".join(f"{row['counts'][s]:8d}" for s in sites))

pruned = result.derive()
print(pruned.flops().to_text())
gap = verify_equivalence(pruned, result.network, result.keep_masks(), data.val.images[:256])
print(f"pruned vs masked supernet: max logit gap {gap:.2e}")
print(pruned.spec.to_text())

best, acc, _ = finetune(pruned.network.copy(), data.train, data.val, FinetuneConfig(epochs=10, batch_size=64))
print(f"validation accuracy: derived {evaluate(pruned.network, data.val):.3f}, after 10 fine-tune epochs {acc:.3f}")
