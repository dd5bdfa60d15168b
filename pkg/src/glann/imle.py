"""IMLE stage: fit a mapper from Gaussian noise onto the learned latent codes.

Each epoch draws a fresh pool of noise vectors, maps them through the mapper
and, minibatch by minibatch, matches every latent code to its nearest mapped
noise vector, then regresses the mapper output for the matched noise onto the
code. ``pixel_imle_epoch`` runs the same loop directly in image space with a
generator in place of the mapper (the plain IMLE baseline).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .datasets import DatasetHandle, epoch_permutation
from .errors import NumericError, StalePoolError
from .glo import EpochStats, LatentTable

log = logging.getLogger(__name__)

REFRESH_POLICIES = ("per-minibatch", "per-epoch")


class MapperNetwork(nn.Module):
    """Noise-to-latent map: dense -> BatchNorm -> ReLU -> dense.

    ``hidden=0`` gives a single linear layer (handy for convex toy checks).
    """

    def __init__(self, noise_dim: int, latent_dim: int, hidden: int = 128, batchnorm: bool = True):
        super().__init__()
        self.noise_dim = noise_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.batchnorm = batchnorm
        if hidden:
            layers = [nn.Linear(noise_dim, hidden)]
            if batchnorm:
                layers.append(nn.BatchNorm1d(hidden))
            layers += [nn.ReLU(), nn.Linear(hidden, latent_dim)]
        else:
            layers = [nn.Linear(noise_dim, latent_dim)]
        self.net = nn.Sequential(*layers)

    def forward(self, e):
        return self.net(e)

    @property
    def has_batchnorm(self) -> bool:
        return any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in self.modules())

    def arch_config(self):
        return {"noise_dim": self.noise_dim, "latent_dim": self.latent_dim,
                "hidden": self.hidden, "batchnorm": self.batchnorm}


def build_mapper(noise_dim: int, latent_dim: int, hidden: int = 128, batchnorm: bool = True,
                 seed: int | None = None) -> MapperNetwork:
    if seed is None:
        return MapperNetwork(noise_dim, latent_dim, hidden, batchnorm)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MapperNetwork(noise_dim, latent_dim, hidden, batchnorm)


@dataclass(frozen=True)
class NoisePool:
    """Noise draws and (once mapped) their images under the mapper.

    ``mapped`` equals mapper(noise) row for row while ``fresh`` is set.
    """

    noise: torch.Tensor
    mapped: torch.Tensor | None = None
    epoch: int = 0
    fresh: bool = False

    def __len__(self):
        return len(self.noise)

    def stale(self) -> "NoisePool":
        return replace(self, fresh=False)


def sample_noise_pool(size: int, noise_dim: int, seed: int = 0, epoch: int = 0) -> NoisePool:
    """``size`` standard-normal rows; a pure function of (seed, epoch)."""
    if size < 1 or noise_dim < 1:
        raise ValueError(f"noise pool needs size >= 1 and dim >= 1, got ({size}, {noise_dim})")
    # fold the epoch into the seed through numpy's SeedSequence to avoid collisions
    key = int(np.random.SeedSequence([seed, epoch]).generate_state(1, np.uint64)[0] >> 1)
    gen = torch.Generator().manual_seed(key)
    return NoisePool(torch.randn(size, noise_dim, generator=gen), epoch=epoch)


@torch.no_grad()
def apply_inference(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Evaluate ``net`` in eval mode (running BatchNorm stats), restoring its mode."""
    was_training = net.training
    net.eval()
    try:
        return net(x)
    finally:
        net.train(was_training)


def map_pool(mapper: nn.Module, pool: NoisePool) -> NoisePool:
    """Fill ``pool.mapped`` with mapper(noise) and mark the pool fresh."""
    dim = getattr(mapper, "noise_dim", None)
    if dim is not None and pool.noise.shape[1] != dim:
        raise ValueError(f"pool noise has dim {pool.noise.shape[1]}, mapper expects {dim}")
    return replace(pool, mapped=apply_inference(mapper, pool.noise), fresh=True)


def squared_distances(queries: torch.Tensor, points: torch.Tensor, chunk: int = 64) -> torch.Tensor:
    """Exact ``||q - p||^2`` for every pair, from explicit differences.

    The difference form keeps exact matches at exactly zero and equal
    distances exactly equal, which the lowest-index tie rule relies on.
    """
    out = torch.empty(len(queries), len(points), dtype=torch.promote_types(queries.dtype, points.dtype))
    # bound the (chunk, M, d) intermediate to about 32M elements
    step = max(1, min(chunk, (1 << 25) // max(1, points.numel())))
    for lo in range(0, len(queries), step):
        diff = queries[lo:lo + step, None, :] - points[None, :, :]
        out[lo:lo + step] = (diff * diff).sum(-1)
    return out


def nearest_mapped_noise(z: torch.Tensor, pool: NoisePool, allow_stale: bool = False):
    """Index of the nearest mapped row for every query row, plus its squared distance.

    Ties go to the lowest index.
    """
    if pool.mapped is None or not (pool.fresh or allow_stale):
        raise StalePoolError("noise pool must be mapped by the current mapper before matching")
    z = z.flatten(1)
    mapped = pool.mapped.flatten(1)
    if z.shape[1] != mapped.shape[1]:
        raise ValueError(f"query dim {z.shape[1]} does not match mapped dim {mapped.shape[1]}")
    if len(z) == 0:
        return torch.zeros(0, dtype=torch.long), z.new_zeros(0)
    d2 = squared_distances(z, mapped)
    # torch.min returns the first occurrence of the minimum
    dist, idx = d2.min(dim=1)
    return idx, dist


@dataclass
class ImleTrainConfig:
    epochs: int = 50
    pool_size: int | None = None
    batch_size: int = 64
    learning_rate: float = 0.001
    refresh: str = "per-minibatch"
    seed: int = 0

    def __post_init__(self):
        if self.refresh not in REFRESH_POLICIES:
            raise ValueError(f"refresh must be one of {REFRESH_POLICIES}, got {self.refresh!r}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.pool_size is not None and self.pool_size < self.batch_size:
            raise ValueError("pool_size must be at least batch_size")

    @property
    def pool(self) -> int:
        return self.pool_size if self.pool_size is not None else max(10 * self.batch_size, 1024)

    def to_dict(self):
        return asdict(self)


def make_optimizer(net: nn.Module, cfg: ImleTrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)


def _can_fit(net: nn.Module, batch: int) -> bool:
    # BatchNorm cannot compute batch statistics from a single row
    return batch > 1 or not any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in net.modules())


def imle_epoch(mapper: MapperNetwork, table: LatentTable, cfg: ImleTrainConfig, epoch: int,
               optimizer: torch.optim.Optimizer | None = None) -> EpochStats:
    """One IMLE epoch over the latent table.

    Returns stats whose ``mean_loss`` is the mean pre-step fit loss and whose
    ``extra["matched_distance"]`` is the mean Euclidean distance between each
    code and its matched mapped noise.
    """
    if table.count == 0:
        raise ValueError("latent table is empty")
    if mapper.latent_dim != table.dim:
        raise ValueError(f"mapper emits dim {mapper.latent_dim}, latent table has dim {table.dim}")
    optimizer = optimizer or make_optimizer(mapper, cfg)
    for group in optimizer.param_groups:
        group["lr"] = cfg.learning_rate
    base = sample_noise_pool(cfg.pool, mapper.noise_dim, cfg.seed, epoch)
    pool = map_pool(mapper, base)

    order = epoch_permutation(table.count, cfg.seed, epoch)
    batch = min(cfg.batch_size, table.count)
    losses, dists, sizes = [], [], []
    for b, start in enumerate(range(0, table.count, batch)):
        ids = torch.from_numpy(order[start:start + batch])
        z = table.codes[ids]
        if cfg.refresh == "per-minibatch" and not pool.fresh:
            pool = map_pool(mapper, base)
        idx, d2 = nearest_mapped_noise(z, pool, allow_stale=cfg.refresh == "per-epoch")
        dists.append(d2.sqrt())

        mapper.train()
        optimizer.zero_grad(set_to_none=True)
        # Forward the whole pool so batch statistics describe the noise distribution.
        # Matched rows repeat heavily, and normalizing over them alone collapses the
        # hidden layer and drives the running statistics away from the pool's.
        loss = ((mapper(pool.noise)[idx] - z) ** 2).mean() if _can_fit(mapper, len(pool)) else None
        value = float(d2.mean()) / table.dim if loss is None else float(loss.detach())
        if not np.isfinite(value):
            raise NumericError(f"non-finite IMLE fit loss {value} at epoch {epoch}, batch {b}")
        if loss is not None:
            loss.backward()
            optimizer.step()
            pool = pool.stale()
        losses.append(value)
        sizes.append(len(ids))

    matched = float(torch.cat(dists).mean())
    mean = float(np.average(losses, weights=sizes))
    return EpochStats(epoch, mean, losses, {"matched_distance": matched})


def train_mapper(mapper: MapperNetwork, table: LatentTable, cfg: ImleTrainConfig, start_epoch: int = 0,
                 callback: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    optimizer = make_optimizer(mapper, cfg)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        stats = imle_epoch(mapper, table, cfg, epoch, optimizer)
        history.append(stats)
        log.info("imle epoch %d fit %.5f matched %.5f", epoch, stats.mean_loss,
                 stats.extra["matched_distance"])
        if callback is not None:
            callback(stats)
    return history


def pixel_imle_epoch(gen: nn.Module, data: DatasetHandle, cfg: ImleTrainConfig, epoch: int = 0,
                     optimizer: torch.optim.Optimizer | None = None) -> EpochStats:
    """Plain IMLE in pixel space: match each training image to its nearest generated image.

    The generator plays the mapper's role and its input is the noise itself.
    ``extra["matched_distance"]`` is the mean per-pixel RMS distance of the matches.
    """
    if tuple(gen.image_shape) != tuple(data.shape):
        raise ValueError(f"generator emits {gen.image_shape}, dataset images are {data.shape}")
    optimizer = optimizer or make_optimizer(gen, cfg)
    for group in optimizer.param_groups:
        group["lr"] = cfg.learning_rate
    base = sample_noise_pool(cfg.pool, gen.latent_dim, cfg.seed, epoch)

    def mapped_pool():
        return replace(base, mapped=apply_inference(gen, base.noise).flatten(1), fresh=True)

    pool = mapped_pool()
    order = epoch_permutation(data.count, data.seed, epoch)
    batch = min(cfg.batch_size, data.count)
    n_pix = int(np.prod(data.shape))
    losses, dists, sizes = [], [], []
    for b, start in enumerate(range(0, data.count, batch)):
        mb = data.batch(order[start:start + batch])
        if cfg.refresh == "per-minibatch" and not pool.fresh:
            pool = mapped_pool()
        idx, d2 = nearest_mapped_noise(mb.pixels.flatten(1), pool, allow_stale=cfg.refresh == "per-epoch")
        dists.append((d2 / n_pix).sqrt())

        gen.train()
        optimizer.zero_grad(set_to_none=True)
        loss = ((gen(pool.noise[idx]) - mb.pixels) ** 2).mean() if _can_fit(gen, len(mb)) else None
        value = float(d2.mean()) / n_pix if loss is None else float(loss.detach())
        if not np.isfinite(value):
            raise NumericError(f"non-finite pixel-IMLE loss {value} at epoch {epoch}, batch {b}")
        if loss is not None:
            loss.backward()
            optimizer.step()
            pool = pool.stale()
        losses.append(value)
        sizes.append(len(mb))

    matched = float(torch.cat(dists).mean())
    return EpochStats(epoch, float(np.average(losses, weights=sizes)), losses, {"matched_distance": matched})


def train_pixel_imle(gen: nn.Module, data: DatasetHandle, cfg: ImleTrainConfig,
                     callback: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    optimizer = make_optimizer(gen, cfg)
    history = []
    for epoch in range(cfg.epochs):
        stats = pixel_imle_epoch(gen, data, cfg, epoch, optimizer)
        history.append(stats)
        log.info("pixel-imle epoch %d loss %.5f", epoch, stats.mean_loss)
        if callback is not None:
            callback(stats)
    return history
