"""
Latent optimization on a handful of images
==========================================

Every training image owns a unit-norm latent code. Generator weights and codes
are optimized together under a reconstruction loss; there is no encoder.
Here 12 synthetic bar images are memorized by a small generator.
"""

import sys
from pathlib import Path

import torch

from glann.datasets import DatasetHandle
from glann.glo import GloTrainConfig, build_generator, glo_reconstruct, init_latent_table, train_glo
from glann.losses import LossSpec
from glann.synthesis import save_image_grid

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# twelve 16x16 images: one bright bar each, at different rows and columns
pixels = -torch.ones(12, 1, 16, 16)
for i in range(6):
    pixels[i, 0, 2 * i + 2: 2 * i + 4, :] = 1.0
    pixels[6 + i, 0, :, 2 * i + 2: 2 * i + 4] = 1.0
data = DatasetHandle("bars", pixels)

# codes start as normal draws projected to the sphere
gen = build_generator("infogan-small", 8, data.shape, seed=0)
table = init_latent_table(data.count, 8, seed=0)

# the Laplacian pyramid loss weights coarse structure and fine edges separately
cfg = GloTrainConfig(epochs=300, batch_size=12, latent_lr=0.05, decay_every=100,
                     loss=LossSpec(kind="lap_pyramid", pyramid_levels=3))
history = train_glo(gen, table, data, cfg)
print(f"loss {history[0].mean_loss:.4f} -> {history[-1].mean_loss:.4f}")
print(f"largest deviation of a code norm from 1: {table.max_norm_error():.2e}")

# top row: targets; bottom row: G(z_i)
rec = glo_reconstruct(gen, table, range(data.count)).pixels
print(save_image_grid(torch.cat([data.pixels, rec]), out / "glo_bars.png", nrow=12))

# walking between two codes on the sphere gives intermediate images
z0, z1 = table.codes[0], table.codes[6]
steps = torch.linspace(0, 1, 8)[:, None]
path = (1 - steps) * z0 + steps * z1
path = path / path.norm(dim=1, keepdim=True)
gen.eval()
with torch.no_grad():
    print(save_image_grid(gen(path), out / "glo_walk.png", nrow=8))
