"""Subpixel rearrangement and the learnable downsampler, step by step.

Run: python3 demos/01_subpixel_rearrangement.py
"""

import numpy as np

from spinseg import ModelConfig, SpinModel, Tensor, depth_to_space, forward_full, no_grad, space_to_depth

# A 4-channel 2x2 map turns into a 1-channel 4x4 map. Channel 2*di + dj of
# pixel (i, j) lands at (2i + di, 2j + dj).
x = np.arange(16, dtype=np.float64).reshape(1, 4, 2, 2)
y = depth_to_space(Tensor(x)).data
print("depth_to_space of channels 0..3 over a 2x2 grid:")
print(y[0, 0])

# The inverse gathers each 2x2 block back into four channels. Nothing is
# interpolated, so the round trip is exact.
back = space_to_depth(Tensor(y)).data
print("round trip exact:", np.array_equal(back, x))

# In the network the prediction f0 lives at twice the input resolution. The
# downsampler picks per-pixel weights h over the four subpixels of each block,
# and the output f is their convex combination.
model = SpinModel(ModelConfig(encoder_channels=(8, 16)), seed=0)
img = np.random.default_rng(0).random((1, 5, 8, 8)).astype(np.float32)
with no_grad():
    out = forward_full(model, img)
print("shapes: x", img.shape, "f0", out.f0.shape, "h", out.h.shape, "f", out.f.shape)
print("h sums to one per pixel:", np.allclose(out.h.data.sum(axis=1), 1.0, atol=1e-6))
blocks = space_to_depth(out.f0).data
inside = (out.f.data >= blocks.min(1, keepdims=True)) & (out.f.data <= blocks.max(1, keepdims=True))
print("f inside its 2x2 block range everywhere:", bool(inside.all()))
