"""Squash, routing and margin loss on hand-sized inputs."""
import numpy as np

from capsdense import margin_loss, route, squash

rng = np.random.default_rng(0)

# squash keeps direction and maps length n to n^2 / (1 + n^2)
for n in (0.1, 1.0, 3.0, 10.0):
    s = np.array([n, 0.0, 0.0])
    print(f"|s| = {n:5.1f}  ->  |v| = {np.linalg.norm(squash(s).data):.4f}")

# eight children: six agree on one pose for parent 0, all send noise to parent 1
agreed = rng.standard_normal(4)
u_hat = np.zeros((1, 8, 2, 4))
u_hat[0, :, 0] = agreed + 0.05 * rng.standard_normal((8, 4))
u_hat[0, :, 1] = rng.standard_normal((8, 4))
u_hat[0, 6:, 0] = rng.standard_normal((2, 4))

v, state = route(u_hat, iters=3, keep_history=True)
for it, c in enumerate(state.history, 1):
    print(f"iteration {it}: mean coupling to parent 0 = {c[0, :, 0].mean():.3f}")
print("parent lengths:", np.round(np.linalg.norm(v.data[0], axis=-1), 3))

targets = np.array([[1, 0]])
print("margin loss at those lengths:", float(margin_loss(np.linalg.norm(v.data, axis=-1), targets).data))
