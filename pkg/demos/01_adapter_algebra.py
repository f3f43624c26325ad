"""A walk through the adapter algebra: rank schedules, the rotary codec,
and the block-diagonal matrix a MoRA branch is secretly equal to.

Run from the repository root:  python3 demos/01_adapter_algebra.py
"""

import numpy as np

from molora.adapters import (
    MoraAdapter,
    RotaryCodec,
    materialize_delta_w,
    mora_compress,
    mora_forward,
    param_count,
    rope_angles,
    stepped_schedule,
)

# --- rank vectors ------------------------------------------------------------
# Larger ranks at early blocks, stepped down every couple of blocks. The
# published best configuration drops the matrix rank by 8 and the low rank by 4
# every two blocks.

mora_ranks = stepped_schedule(start=64, end=24, step=8, period=2, length=12)
lora_ranks = stepped_schedule(start=32, end=12, step=4, period=2, length=12)
print("matrix-rank vector:", list(mora_ranks))
print("low-rank vector:   ", list(lora_ranks))

budget = param_count(2304, 768, lora_ranks, mora_ranks)
print("\nper-block trainable parameters at GPT-2 widths (768 -> 2304):")
for i, (lo, mo) in enumerate(zip(budget.lora, budget.mora)):
    print(f"  block {i:2d}: low-rank {lo:7d}  matrix-rank {mo:6d}")
print(f"  total: {budget.total:,}")

# --- the rotary codec ----------------------------------------------------------
# Compression splits the input into chunks of length r_hat and rotates chunk j
# by block-diagonal 2x2 rotations with angles j * theta_t.

codec = RotaryCodec(r_hat=4, k=8, d=12)
print("\ncodec for r_hat=4, k=8, d=12:")
print("  chunks:", codec.n_in, " padded width:", codec.padded_k, " tile factor:", codec.tile)
print("  base angles:", rope_angles(4))

x = np.arange(1.0, 9.0)
for j, chunk in enumerate(mora_compress(x, codec)):
    print(f"  rotated chunk {j}:", np.round(chunk, 4))

# --- the equivalence that makes it trustworthy -----------------------------------
# The chunk-rotate-mix-concat-tile pipeline is linear, so it must equal one
# explicit matrix. materialize_delta_w builds that matrix independently; the
# two routes agreeing is the core self-check of the package.

rng = np.random.default_rng(0)
adapter = MoraAdapter.create(d=12, k=8, r_hat=4)
adapter.M.value[:] = rng.normal(size=(4, 4))
delta = materialize_delta_w(adapter)
worst = 0.0
for _ in range(200):
    probe = rng.normal(size=8)
    worst = max(worst, float(np.max(np.abs(mora_forward(adapter, probe) - delta @ probe))))
print(f"\nmax |chunked forward - DeltaW x| over 200 random inputs: {worst:.2e}")

zeroed = MoraAdapter.create(d=12, k=8, r_hat=4)
print("fresh adapter contributes exactly zero:",
      bool(np.all(mora_forward(zeroed, rng.normal(size=8)) == 0.0)))
