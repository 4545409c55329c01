"""
Overfitting the pyramidal aggregator to a single pair
=====================================================

Training on one synthetic pair is the fastest end-to-end sanity check the
package has: the aggregated flow should drive AEPE from several grid cells
down below half a cell within a few dozen optimiser steps.
"""

import time

import numpy as np

from catagg import evaluate, generate_pair, make_optimizer, train
from catagg.config import RunConfig

# an 8x8 working grid keeps every step around a tenth of a second on CPU
cfg = RunConfig.load(None, sets=[
    "model=catspp", "mode=parallel", "grid.h=8", "grid.w=8", "seed=7",
    "train.steps=2000", "train.lr_aggregator=2e-3", "train.lr_backbone=2e-4",
])
model = cfg.build_model()
tcfg = cfg.train_config()
opt = make_optimizer(model, tcfg)
print(f"parameters: {sum(a.size for a in model.store.state_arrays().values()):,}")

pair = generate_pair(31)
before = evaluate(model, [pair], alphas=(0.1,)).rows[0]
print(f"before: aepe={before.aepe:.3f} cells, pck@0.1={before.pck[0.1]:.2f}")

# one pair, batch size 1, early stop once the loss dips under 0.4 cells
rng = np.random.default_rng(tcfg.seed)
t0 = time.time()
history = train(model, opt, [pair], tcfg, rng, stop_below=0.4,
                log=lambda msg: print("  " + msg))
wall = time.time() - t0

after = evaluate(model, [pair], alphas=(0.1,)).rows[0]
print(f"after {len(history)} steps ({wall:.1f}s): "
      f"aepe={after.aepe:.3f} cells, pck@0.1={after.pck[0.1]:.2f}")
print(f"loss path: {history[0]:.3f} -> {min(history):.3f}")
assert after.aepe < 0.5
