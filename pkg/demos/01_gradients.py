"""Reverse-mode gradients on a tiny graph, checked against central differences."""

import numpy as np

from survfuse import autograd as ag

rng = np.random.default_rng(0)
W = ag.parameter(rng.normal(size=(3, 4)), name="W")
b = ag.parameter(np.zeros(4), name="b")
x = rng.normal(size=(5, 3))


def loss():
    h = ag.gelu(ag.linear(x, W, b))
    return ag.sum(ag.softmax(h, axis=-1) * np.arange(4.0))


with ag.Tape() as tape:
    L = loss()
ag.backward(tape, L)
print("loss", L.item())
print("nodes on tape", len(tape.nodes))

# same gradient, one coordinate at a time
fd = ag.fd_gradient(lambda: loss().item(), [W, b], step=1e-4)
for p, g in zip((W, b), fd):
    err = np.max(np.abs(p.grad - g) / np.maximum(np.abs(p.grad), 1e-12))
    print(f"{p.name}: max relative error {err:.2e}")

# one Adam step with the default settings (lr 1e-4, L2 weight decay 5e-4)
opt = ag.AdamState()
before = W.data.copy()
ag.adam_step(opt, [W, b], [W.grad, b.grad])
print("largest parameter move", np.max(np.abs(W.data - before)))
