"""
Reverse-mode gradients and AdamW
================================

Build a small two-layer network from pixforge tensors, check its gradient
against central differences, then take a few optimizer steps.
"""

import numpy as np

from pixforge import autodiff as ad

rng = np.random.default_rng(0)
x = ad.Tensor(rng.uniform(-2, 2, (8, 3)))
w1 = ad.Tensor(rng.normal(0, 0.5, (3, 16)), requires_grad=True)
w2 = ad.Tensor(rng.normal(0, 0.5, (16, 1)), requires_grad=True)
target = np.sin(x.data.sum(axis=1, keepdims=True))


def loss():
    h = ad.silu(x @ w1)
    return ((h @ w2 - target) ** 2).mean()


# backward fills .grad on every leaf that asked for it
ad.backward(loss())
analytic = w1.grad[0, :4].copy()

# central differences on the same coordinates
h = 1e-4
numeric = []
for j in range(4):
    w1.data[0, j] += h
    up = loss().item()
    w1.data[0, j] -= 2 * h
    down = loss().item()
    w1.data[0, j] += h
    numeric.append((up - down) / (2 * h))
print("analytic ", np.round(analytic, 6))
print("numeric  ", np.round(numeric, 6))

# a softmax row is a distribution
print("softmax([1, 2, 3]) =", np.round(ad.softmax(ad.Tensor([1.0, 2.0, 3.0])).data, 5))

# AdamW with decoupled weight decay and global-norm clipping
opt = ad.AdamW([w1, w2], lr=1e-2)
for step in range(200):
    opt.zero_grad()
    value = loss()
    ad.backward(value)
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d} loss {value.item():.4f} grad norm {opt.last_grad_norm:.3f}")
print(f"final loss {loss().item():.4f}")
