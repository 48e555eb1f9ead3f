"""Transfer learning with frozen filter stages.

A "reference" deep net is saved to disk and its filter stages are loaded
into a fresh net, whose classifier head is re-drawn. Training with the
first k stages frozen leaves exactly those tensors untouched.

The nets here use the full layer widths on 67-pixel inputs, the smallest
size the five-stage layout accepts, so the demo runs in seconds.
"""

import tempfile
from pathlib import Path

import numpy as np

from matforge.architectures import build_deep, freeze_stages
from matforge.network import Network
from matforge.optim import TrainingConfig, train
from matforge.synthetic import toy_samples
from matforge.weights_io import filter_stage_name_map, load_pretrained, save_weights

spec = build_deep(input_size=67, fc_width=256)
reference = Network(spec, seed=123)

tmp = Path(tempfile.mkdtemp())
save_weights(reference.parameters(), tmp / "reference")

net = Network(spec, seed=0)
load_pretrained(tmp / "reference", filter_stage_name_map(net), net, seed=0)
print("conv1 copied:", np.array_equal(net.parameters()["conv1.weight"], reference.parameters()["conv1.weight"]))
print("fc8 copied:", np.array_equal(net.parameters()["fc8.weight"], reference.parameters()["fc8.weight"]))

samples = toy_samples(per_class=2, size=72, seed=0)
before = {n: a.copy() for n, a in net.parameters().items()}
cfg = TrainingConfig(base_lr=1e-3, lr_step=10**6, max_iterations=100, crop_size=67, normalize_mean=True)
result = train(net, freeze_stages(spec, 3), samples, cfg)

stages = net.parameter_stages()
for name, arr in net.parameters().items():
    if name.endswith(".weight"):
        moved = not np.array_equal(arr, before[name])
        print(f"stage {stages[name]} {name:14s} {'updated' if moved else 'frozen'}")

# random "reference" filters pass very little signal through five stages,
# so the loss barely moves; with real pretrained weights this is where
# the head would learn the materials
losses = result.log.losses
print(f"loss {losses[:20].mean():.3f} -> {losses[-20:].mean():.3f}")
