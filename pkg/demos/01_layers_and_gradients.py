"""
Layers, backpropagation and a finite-difference check
=====================================================

Build a tiny convolutional block by hand, push a batch through it, and
compare the analytic gradients against central differences.
"""

import numpy as np

from ifl.nn import Block, Conv2d, Dense, Flatten, MaxPool2d, ReLU, init_params, softmax_cross_entropy

rng = np.random.default_rng(0)

# conv 3x3 (pad 1) keeps 6x6, the 2x2 pool halves it to 3x3
block = Block([init_params(Conv2d(1, 4), rng), ReLU(), MaxPool2d(), Flatten(),
               init_params(Dense(4 * 3 * 3, 10), rng)])
x = rng.random((5, 1, 6, 6), dtype=np.float32)
labels = rng.integers(0, 10, 5)

logits = block.forward(x)
loss, grad = softmax_cross_entropy(logits, labels)
print("logits", logits.shape, "loss %.4f (ln 10 = %.4f)" % (loss, np.log(10)))

# Gradient checks run in float64 so the differences are not swamped by rounding.
block.astype(np.float64)
x64 = x.astype(np.float64)
loss, grad = softmax_cross_entropy(block.forward(x64), labels)
_, layer_grads = block.backward(grad)
analytic = block.flat_grads(layer_grads)[0]   # conv weights

W = block.params()[0]
numeric = np.zeros_like(W)
# A small step keeps the perturbation from pushing an activation across a
# ReLU kink or switching a pooling window's maximum.
eps = 1e-6
for i in np.ndindex(W.shape):
    orig = W[i]
    W[i] = orig + eps
    up = softmax_cross_entropy(block.forward(x64), labels)[0]
    W[i] = orig - eps
    down = softmax_cross_entropy(block.forward(x64), labels)[0]
    W[i] = orig
    numeric[i] = (up - down) / (2 * eps)

rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
print("conv weight gradient: max relative error %.2e" % rel.max())
