"""Train the small DCNet on the synthetic shapes task and watch the metrics."""
import sys
import tempfile
from pathlib import Path

from capsdense import TrainConfig, build, build_preset, fit, synth_shapes

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
train, test = synth_shapes(1024, seed=0), synth_shapes(256, seed=10_000)
model = build(build_preset("synth-dcnet"), seed=0)
print(f"synth-dcnet: {model.params.count():,d} parameters")

out = Path(tempfile.mkdtemp(prefix="capsdense-"))
for row in fit(model, train, TrainConfig(epochs=epochs, batch_size=32), test, out_dir=out):
    print(f"epoch {row['epoch']}  loss {row['total_loss']:.4f}  train {row['train_acc']:.3f}  "
          f"test {row['test_acc']:.3f}  ({row['seconds']:.1f}s)")
print("metrics and checkpoint in", out)
