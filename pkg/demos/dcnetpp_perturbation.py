"""Nudge each dimension of a DCNet++ class capsule and see the reconstruction move."""
import numpy as np

from capsdense import TrainConfig, build, build_preset, fit, no_grad, synth_shapes
from capsdense.models import perturb_sweep

spec = build_preset("synth-dcnetpp")
model = build(spec, seed=0)
train = synth_shapes(256, seed=0)
fit(model, train, TrainConfig(epochs=2, batch_size=32))

x, label = train.images[:1], int(train.labels[0])
with no_grad():
    out = model(x)
print(f"heads: {len(out.heads)}, class capsule: {out.v.shape[-1]}D, predicted {out.predictions[0]}, "
      f"true {label}")

grid = perturb_sweep(model, out.v.data[0], label, delta=-0.2)
shift = np.abs(grid[1:] - grid[0]).reshape(len(grid) - 1, -1).mean(axis=1)
for d in np.argsort(shift)[::-1][:5]:
    print(f"dimension {d:2d}: mean pixel change {shift[d]:.4f}")
