"""How a dense block grows its channels and what each layer costs."""
import numpy as np

from capsdense import DenseBlockSpec, Tensor, dense_block_forward, dense_block_param_count
from capsdense.dense import dense_block_param_shapes

spec = DenseBlockSpec(num_layers=4, growth=6)
shapes = dense_block_param_shapes(spec, in_channels=1)
for name, shape in shapes.items():
    if name.endswith("kernel"):
        print(f"{name:16s} reads {shape[1]:2d} maps, writes {shape[0]}")

rng = np.random.default_rng(0)
params = {k: Tensor(rng.standard_normal(s) * 0.1) for k, s in shapes.items()}
out = dense_block_forward(Tensor(rng.uniform(size=(1, 1, 12, 12))), spec, params)
print("output maps:", out.shape[1], "=", f"1 + {spec.num_layers} * {spec.growth}")
print("parameters:", dense_block_param_count(spec, 1))

# the same stack without skip connections
plain = DenseBlockSpec(num_layers=4, growth=6, concat=False)
print("plain stack parameters:", dense_block_param_count(plain, 1))
