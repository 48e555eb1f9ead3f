"""Shading and reflectance inputs.

An image is factored as shading (one channel) times reflectance (three
channels). The product reproduces the image wherever the shading was not
clamped at its floor.
"""

import numpy as np

from matforge.intrinsics import decompose, reconstruction_error, select_input
from matforge.synthetic import toy_image

rng = np.random.default_rng(1)
img = toy_image(7, 96, rng).astype(np.float64)

# darken the left half to give the shading something to explain
img[:, :, :48] *= 0.4
pair = decompose(img, sigma=6)
print("shading", pair.shading.shape, "reflectance", pair.reflectance.shape)
print("reconstruction error", reconstruction_error(img, pair))

# the shading map picks up most of the brightness step
left, right = pair.shading[0, :, :20].mean(), pair.shading[0, :, -20:].mean()
print(f"mean shading left {left:.3f}, right {right:.3f}")

# what the networks actually see
for mode in ("rgb", "reflectance", "shading", "branched"):
    print(mode, select_input(img, mode).shape)

# scaling the image only rescales the shading
dim = decompose(0.5 * img, sigma=6)
print("reflectance unchanged under scaling:", np.allclose(dim.reflectance, pair.reflectance))
