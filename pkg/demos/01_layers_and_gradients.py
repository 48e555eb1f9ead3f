"""Layers by hand: forward a tiny batch through each kernel, then check its
backward pass against central finite differences."""

import numpy as np

from matforge.nn import LRN, Conv2D, ConvParams, MaxPool, ReLU, SoftmaxLoss, gradient_check

rng = np.random.default_rng(0)
x = rng.standard_normal((2, 3, 9, 9))

# a 4-filter 3x3 convolution with stride 2 and one pixel of padding
conv = Conv2D(rng.standard_normal((4, 3, 3, 3)) * 0.1, np.zeros(4), ConvParams(4, 3, 3, stride=2, pad=1))
y = conv.forward(x)
print("conv out", y.shape)  # (2, 4, 5, 5)

pool = MaxPool(3, 2)
print("pool out", pool.forward(ReLU().forward(y)).shape)  # (2, 4, 2, 2)

# every layer's analytic gradient should agree with finite differences
for name, layer, inp in [
    ("conv", conv, x),
    ("relu", ReLU(), x + np.sign(x) * 0.05),
    ("maxpool", MaxPool(3, 2), x),
    ("lrn", LRN(5, 1e-2, 0.75, 1.0), rng.standard_normal((1, 6, 4, 4)) * 10),
]:
    print(f"{name:8s} max relative error {gradient_check(layer, inp):.2e}")

logits = rng.standard_normal((4, 10))
labels = np.array([0, 3, 3, 9])
print(f"{'loss':8s} max relative error {gradient_check(SoftmaxLoss(), logits, labels=labels):.2e}")
