"""
IMLE on the unit circle
=======================

The "latent codes" are 100 points on a circle. A small mapper network turns
Gaussian noise into 2-d points; each epoch every target is matched to its
nearest mapped noise sample and the mapper is pulled toward its matches.
Because every target gets a match, no part of the circle is dropped.
"""

import sys
from math import pi
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from glann.glo import LatentTable
from glann.imle import ImleTrainConfig, apply_inference, build_mapper, train_mapper

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

theta = torch.arange(100) * 2 * pi / 100
table = LatentTable(torch.stack([theta.cos(), theta.sin()], 1))

mapper = build_mapper(noise_dim=2, latent_dim=2, seed=0)
noise = torch.randn(500, 2, generator=torch.Generator().manual_seed(1))
before = apply_inference(mapper, noise)

history = train_mapper(mapper, table, ImleTrainConfig(epochs=200))
after = apply_inference(mapper, noise)
d = [h.extra["matched_distance"] for h in history]
print(f"mean matched distance: epoch 1 {d[0]:.3f}, epoch 200 {d[-1]:.3f}")

fig, axes = plt.subplots(1, 3, figsize=(12, 4))
for ax, pts, title in [(axes[0], before, "mapped noise, untrained"), (axes[1], after, "after 200 epochs")]:
    ax.scatter(*pts.T, s=3, alpha=0.5, label="T(e)")
    ax.scatter(*table.codes.T, s=6, c="r", label="targets")
    ax.set(aspect="equal", title=title)
axes[0].legend(loc="upper right")
axes[2].plot(range(1, len(d) + 1), d)
axes[2].set(xlabel="epoch", ylabel="mean matched distance", yscale="log")
fig.tight_layout()
fig.savefig(out / "imle_circle.png", dpi=100)
print(out / "imle_circle.png")
