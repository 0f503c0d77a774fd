"""
A walking tour of the selective scan
====================================

Builds the input-dependent state-space recurrence step by step: the
discretization of the continuous parameters, the chunked linear recurrence
that evaluates it, and the slow per-step loop used to cross-check both.
"""

import torch

from skinmamba.scan_core import (
    SelectiveScan,
    discretize,
    linear_recurrence,
    selective_scan,
    selective_scan_sequential,
)

torch.manual_seed(0)

# one scalar state, one channel: delta=1, A=-1, B=1 discretizes to the
# classic leaky integrator with decay exp(-1)
delta = torch.ones(1, 1, 1)
A = torch.full((1, 1), -1.0)
B = torch.ones(1, 1, 1)
A_bar, B_bar = discretize(delta, A, B)
print("decay per step:", float(A_bar.squeeze()))       # exp(-1) = 0.3679
print("input weight:  ", float(B_bar.squeeze()))       # delta * B = 1.0

# the recurrence h_t = a_t h_{t-1} + b_t over (batch, length, channel, state)
a = torch.full((1, 6, 1, 1), 0.5)
b = torch.ones(1, 6, 1, 1)
h = linear_recurrence(a, b)
print("geometric ramp:", [round(v, 4) for v in h[0, :, 0, 0].tolist()])
# converges toward 1 / (1 - 0.5) = 2

# a full selective scan layer: projections produce per-step delta, B, C
layer = SelectiveScan(channels=4, state_dim=8)
x = torch.randn(2, 50, 4)
with torch.no_grad():
    fast = selective_scan(x, layer)
slow = selective_scan_sequential(x, layer)        # float64 reference loop
gap = (fast - slow.to(fast.dtype)).abs().max()
print("fast vs sequential max-abs gap:", float(gap))

# gradients flow through the custom backward pass
x.requires_grad_(True)
selective_scan(x, layer).square().sum().backward()
print("input gradient norm:", round(float(x.grad.norm()), 4))
