"""Checking the hand-written backward passes and counting parameters.

Every layer's gradient comes from code in this package, so we compare it with
central differences in float64. Parameter counts are reported per submodule.

Run: python3 demos/02_gradients_and_parameters.py
"""

import numpy as np

from spinseg import ModelConfig, SpinModel, Tensor, bce_loss, forward_full
from spinseg.gradcheck import gradcheck

rng = np.random.default_rng(0)
model = SpinModel(ModelConfig(encoder_channels=(8, 16)), seed=0, dtype=np.float64)
# Nonzero biases keep ReLUs away from exact kinks.
for name, p in model.params.items():
    if name.endswith(".bias"):
        p.data[:] = rng.normal(0, 0.1, size=p.shape)

x = Tensor(rng.random((1, 5, 8, 8)))
target = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
report = gradcheck(lambda: bce_loss(forward_full(model, x).f, target), model.params, max_checks=4, rng=rng)
print(report.format())

print()
for variant in ("spg", "none"):
    counts = SpinModel(ModelConfig(guidance_mode=variant), seed=0).count_parameters()
    print(f"guidance={variant}:", ", ".join(f"{k}={v}" for k, v in counts.items()))
