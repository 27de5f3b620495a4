"""Walk through the analytical GPU memory model.

Builds the reference 12-block transformer profile, prices a few allocation
maps, and shows why training the last u blocks is so much cheaper than
training the first u: frozen blocks below the earliest trainable one drop
their static activations from the bill.
"""

import numpy as np

from fedlorasim import (
    MB,
    VIT_CONTEXT_MB_BY_LEVEL,
    AllocationMap,
    naive_map,
    reference_vit_profile,
    total_memory,
)

batch = 496

# The profile that calibrates the model: 12 blocks, hidden 768, 197 tokens,
# rank-16 adapters, fp32. Context is the CUDA runtime overhead of the
# device tier the measurement came from.
profile_l4 = reference_vit_profile()
profile_l2 = reference_vit_profile(VIT_CONTEXT_MB_BY_LEVEL[2] * MB)

print("reference profile:", profile_l4.num_blocks, "blocks,",
      profile_l4.lora_param_count_per_block, "adapter elements per block")
print()

# Three operating points, each as a full cost breakdown.
points = [
    ("train all 12 blocks", profile_l4, naive_map(12, "full")),
    ("train first 6 blocks", profile_l2, naive_map(12, "mh", 6)),
    ("train last 6 blocks", profile_l2, naive_map(12, "ms", 6)),
]
for name, profile, amap in points:
    bd = total_memory(profile, amap, batch)
    print(f"{name}  [{amap.to_bitstring()}]")
    print(f"  params    {bd.params_bytes / 1e9:7.3f} GB")
    print(f"  optimizer {bd.optimizer_bytes / 1e9:7.3f} GB")
    print(f"  dynamic   {bd.activation_dynamic_bytes / 1e9:7.3f} GB")
    print(f"  static    {bd.activation_static_bytes / 1e9:7.3f} GB")
    print(f"  context   {bd.context_bytes / 1e9:7.3f} GB")
    print(f"  total     {bd.total_gb:7.3f} GB")
print()

# Same block count, wildly different bills. The gap between first-u and
# last-u is exactly the static activations of the frozen prefix.
print("u   first-u GB   last-u GB   gap GB")
eta = profile_l2.bytes_per_elem
for u in range(1, 13):
    first_u = total_memory(profile_l2, naive_map(12, "mh", u), batch).total_bytes
    last_u = total_memory(profile_l2, naive_map(12, "ms", u), batch).total_bytes
    predicted = batch * eta * sum(profile_l2.static_act_per_sample[: 12 - u])
    assert first_u - last_u == predicted
    print(f"{u:2d}  {first_u / 1e9:10.3f}  {last_u / 1e9:10.3f}  {(first_u - last_u) / 1e9:7.3f}")
print()

# Batch size scales only the activation terms, so the curve is affine.
print("batch   total GB (last 6 blocks)")
for b in (16, 64, 128, 256, 496):
    print(f"{b:5d}   {total_memory(profile_l2, naive_map(12, 'ms', 6), b).total_gb:8.3f}")
print()

# A sparse hand-picked map: deep blocks are cheap, one shallow block drags
# the whole static tail back in.
for bits in ("000000000111", "100000000111"):
    amap = AllocationMap.from_bitstring(bits)
    bd = total_memory(profile_l2, amap, batch)
    print(f"map {bits}: {bd.total_gb:6.3f} GB "
          f"(static {bd.activation_static_bytes / 1e9:.3f} GB)")
