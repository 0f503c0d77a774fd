"""
Where every tensor goes
=======================

Runs the full encoder-decoder once with shape tracing switched on, then
compares parameter counts across the block-toggle grid and the two
alternative token mixers.
"""

import torch

from skinmamba.blocks import BlockConfig
from skinmamba.network import NetworkConfig, build_model, parameter_count

cfg = NetworkConfig()            # 16 base channels, 224x224, five stages
model = build_model(cfg, seed=0)
print("parameters:", f"{parameter_count(model):,}")

trace = []
with torch.no_grad():
    y = model(torch.randn(1, 3, 224, 224), trace=trace)
print("output:", tuple(y.shape))
for tag, shape in trace:
    print(f"  {tag:<24} {shape}")

# the ablation grid: which pieces buy how many parameters
grid = (
    ("plain U-shape",        dict(use_srssb=False, use_fbgm=False)),
    ("+ state-space blocks", dict(use_srssb=True, use_fbgm=False)),
    ("+ bottleneck gate",    dict(use_srssb=False, use_fbgm=True)),
    ("full model",           dict(use_srssb=True, use_fbgm=True)),
    ("conv mixer",           dict(variant="CONV3x3")),
    ("attention mixer",      dict(variant="SELF_ATTENTION")),
)
print()
for label, toggles in grid:
    model = build_model(NetworkConfig(block=BlockConfig(**toggles)), seed=0)
    print(f"{label:<22} {parameter_count(model):>12,}")
