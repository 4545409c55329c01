"""
Why the efficient transformer block exists
==========================================

A standard transformer encoder sized for a flattened correlation volume is
enormous: its projections are square in the token feature extent. The
efficient block replaces them with stride-reduced 4D convolutions and a
single attention head, which shrinks both parameters and peak memory. This
script prints the comparison at matched token count and feature extent.
"""

from catagg.bench import (compare_blocks, matched_dims, param_table,
                          standard_block_params)
from catagg.config import RunConfig

cfg = RunConfig.load(None, sets=["model=catspp", "grid.h=8", "grid.w=8"])
model = cfg.build_model()

# where the parameters actually live
print("parameter table:")
for name, count in param_table(model.store).items():
    print(f"  {name:>10} {count:>10,}")

for q in cfg.layers():
    tokens, feat = matched_dims(model.agg, q)
    print(f"\npyramid layer {q}: {tokens} tokens x {feat} features")
    print(f"  standard block would need {standard_block_params(tokens, feat):,} "
          "parameters")
    row = compare_blocks(model, q)
    ratio = row["efficient.params"] / row["standard.params"]
    print(f"  efficient block carries   {row['efficient.params']:,} "
          f"({ratio:.1%} of standard)")
    print(f"  peak forward bytes: efficient {row['efficient.peak_bytes']:,} "
          f"vs standard {row['standard.peak_bytes']:,}")
    assert row["efficient.params"] <= 0.30 * row["standard.params"]
    assert row["efficient.peak_bytes"] <= row["standard.peak_bytes"]

print("\nboth budgets hold at every layer (limit: 30% of standard parameters)")
