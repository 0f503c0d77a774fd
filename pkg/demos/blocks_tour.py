"""
The building blocks, one invariant each
=======================================

Every composite block keeps a residual path that can be isolated by
zeroing its final projection; the frequency block is a strict gate.
These are the properties the test suite pins down — shown here by hand.
"""

import torch

from skinmamba.blocks import CSFFL, FBGM, FFGML, SMFFL, SRSSB, BlockConfig

torch.manual_seed(0)
x = torch.randn(1, 8, 10, 10)

# the two-branch multi-scale feed-forward: zero its output projection and
# only the residual connection remains
smffl = SMFFL(8)
with torch.no_grad():
    smffl.out_proj.weight.zero_()
    smffl.out_proj.bias.zero_()
print("smffl identity after zeroing out_proj:", torch.equal(smffl(x), x))

# the state-space residual block stacks mixer + feed-forward residuals
srssb = SRSSB(BlockConfig(channels=8, ssm_state_dim=4))
with torch.no_grad():
    for proj in (srssb.mixer.out_proj, srssb.smffl.out_proj):
        proj.weight.zero_()
        proj.bias.zero_()
print("srssb identity after zeroing both projections:", torch.equal(srssb(x), x))

# the frequency-domain gate: sigmoid keeps it strictly inside (0, 1),
# and an all-zero filter bank multiplies the input by exactly one half
ffgml = FFGML(8)
with torch.no_grad():
    ratio = ffgml(x) / x
print("gate range:", round(float(ratio.min()), 4), "..", round(float(ratio.max()), 4))

with torch.no_grad():
    for p in ffgml.parameters():
        p.zero_()
print("zero-weight gate halves the input:", torch.equal(ffgml(x), 0.5 * x))

# the channel expansion used inside the bottleneck block widens 4x
csffl = CSFFL(8)
print("csffl expanded channels:", csffl.expanded_channels)

# the whole bottleneck block at its production width
fbgm = FBGM(512)
k = torch.randn(1, 512, 7, 7)
print("bottleneck keeps shape:", tuple(fbgm(k).shape))
