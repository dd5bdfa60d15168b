"""Generative latent optimization: a generator plus one unit-norm code per image.

Each minibatch takes one ADAM step on the
generator and one projected step on the touched latent rows, which are
renormalized to the unit sphere right after the update.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .datasets import DatasetHandle, ImageBatch, minibatches
from .errors import NumericError
from .losses import LossSpec, build_loss

log = logging.getLogger(__name__)


# -- generators ---------------------------------------------------------------

class DeconvGenerator(nn.Module):
    """InfoGAN-style decoder: two dense layers, then two stride-2 transposed convs.

    ``width`` scales every layer; width 64 gives the 1024-unit / 128-channel
    layout used for 28x28 and 32x32 images.
    """

    def __init__(self, latent_dim: int, image_shape, width: int = 64, batchnorm: bool = True):
        super().__init__()
        c, h, w = image_shape
        if h % 4 or w % 4:
            raise ValueError(f"image sides must be multiples of 4, got {h}x{w}")
        self.latent_dim = latent_dim
        self.image_shape = (c, h, w)
        self.width = width
        self.batchnorm = batchnorm
        fc, ch = 16 * width, 2 * width
        self._start = (ch, h // 4, w // 4)
        norm1d = nn.BatchNorm1d if batchnorm else (lambda n: nn.Identity())
        norm2d = nn.BatchNorm2d if batchnorm else (lambda n: nn.Identity())
        self.dense = nn.Sequential(
            nn.Linear(latent_dim, fc), norm1d(fc), nn.ReLU(),
            nn.Linear(fc, ch * (h // 4) * (w // 4)), norm1d(ch * (h // 4) * (w // 4)), nn.ReLU(),
        )
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1), norm2d(ch // 2), nn.ReLU(),
            nn.ConvTranspose2d(ch // 2, c, 4, 2, 1), nn.Tanh(),
        )

    def forward(self, z):
        return self.deconv(self.dense(z).view(-1, *self._start))

    def arch_config(self):
        return {"arch": "infogan", "width": self.width, "batchnorm": self.batchnorm}


class MLPGenerator(nn.Module):
    """Fully-connected decoder for tiny images and tests."""

    def __init__(self, latent_dim: int, image_shape, hidden: int = 128):
        super().__init__()
        self.latent_dim = latent_dim
        self.image_shape = tuple(image_shape)
        self.hidden = hidden
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, int(np.prod(image_shape))), nn.Tanh(),
        )

    def forward(self, z):
        return self.net(z).view(-1, *self.image_shape)

    def arch_config(self):
        return {"arch": "mlp", "hidden": self.hidden}


GENERATOR_ARCHS: dict[str, Callable[..., nn.Module]] = {
    "infogan": lambda d, shape, **kw: DeconvGenerator(d, shape, **{"width": 64, **kw}),
    "infogan-small": lambda d, shape, **kw: DeconvGenerator(d, shape, **{"width": 16, **kw}),
    "mlp": lambda d, shape, **kw: MLPGenerator(d, shape, **kw),
}


def build_generator(arch: str, latent_dim: int, image_shape, seed: int | None = None, **kwargs) -> nn.Module:
    """Instantiate a registered architecture; ``seed`` fixes the initial weights."""
    if arch not in GENERATOR_ARCHS:
        raise ValueError(f"unknown generator architecture {arch!r}; known: {sorted(GENERATOR_ARCHS)}")
    if seed is None:
        return GENERATOR_ARCHS[arch](latent_dim, tuple(image_shape), **kwargs)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GENERATOR_ARCHS[arch](latent_dim, tuple(image_shape), **kwargs)


def generator_from_config(cfg: dict, latent_dim: int, image_shape) -> nn.Module:
    cfg = dict(cfg)
    arch = cfg.pop("arch")
    return build_generator(arch, latent_dim, image_shape, **cfg)


# -- latent table -------------------------------------------------------------

def project_to_sphere(z: torch.Tensor) -> torch.Tensor:
    """Divide each row (or a single vector) by its Euclidean norm."""
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericError("cannot project a zero-norm latent vector onto the unit sphere")
    return z / norms


@dataclass
class LatentTable:
    """One latent code per training image; row ``i`` belongs to dataset id ``i``.

    ``updates`` counts optimizer steps per row. ``adam_m``/``adam_v`` are
    only populated when the rows are trained with the per-row ADAM option.
    """

    codes: torch.Tensor
    updates: torch.Tensor = None
    adam_m: torch.Tensor | None = None
    adam_v: torch.Tensor | None = None

    def __post_init__(self):
        if self.updates is None:
            self.updates = torch.zeros(len(self.codes), dtype=torch.long)

    @property
    def count(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def max_norm_error(self) -> float:
        return float((self.codes.double().norm(dim=1) - 1).abs().max())


def init_latent_table(count: int, dim: int, seed: int = 0) -> LatentTable:
    """Standard-normal rows projected onto the unit sphere."""
    if count < 1 or dim < 1:
        raise ValueError(f"latent table needs count >= 1 and dim >= 1, got ({count}, {dim})")
    gen = torch.Generator().manual_seed(seed)
    codes = torch.randn(count, dim, generator=gen)
    return LatentTable(project_to_sphere(codes))


def pca_latent_table(data: DatasetHandle, dim: int) -> LatentTable:
    """Rows are the images' top-``dim`` principal-component scores, projected to the sphere."""
    if dim < 1 or dim > min(data.count, int(np.prod(data.shape))):
        raise ValueError(f"cannot take {dim} principal components of {data.count} images")
    x = data.pixels.flatten(1).double()
    x = x - x.mean(dim=0)
    u, s, _ = torch.linalg.svd(x, full_matrices=False)
    scores = u[:, :dim] * s[:dim]
    # fix the SVD sign ambiguity: largest-magnitude score of each component is positive
    pivot = scores.gather(0, scores.abs().argmax(dim=0, keepdim=True))
    return LatentTable(project_to_sphere((scores * pivot.sign()).float()))


# -- training -----------------------------------------------------------------

@dataclass
class GloTrainConfig:
    epochs: int = 500
    batch_size: int = 64
    latent_lr: float = 0.01
    generator_lr_ratio: float = 0.1
    decay: float = 0.5
    decay_every: int = 50
    latent_optimizer: str = "adam"
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)
        if self.latent_lr < 0 or self.generator_lr_ratio < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.decay_every < 1 or self.batch_size < 1:
            raise ValueError("decay_every and batch_size must be positive")
        if self.latent_optimizer not in ("sgd", "adam"):
            raise ValueError(f"latent_optimizer must be 'sgd' or 'adam', got {self.latent_optimizer!r}")

    def latent_rate(self, epoch: int) -> float:
        return self.latent_lr * self.decay ** (epoch // self.decay_every)

    def generator_rate(self, epoch: int) -> float:
        return self.latent_rate(epoch) * self.generator_lr_ratio

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    batch_losses: list[float]
    extra: dict = field(default_factory=dict)


def make_generator_optimizer(gen: nn.Module, cfg: GloTrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(gen.parameters(), lr=cfg.generator_rate(0))


def _latent_step(table: LatentTable, ids: torch.Tensor, z: torch.Tensor, grad: torch.Tensor,
                 lr: float, kind: str, betas=(0.9, 0.999), eps=1e-8) -> None:
    if kind == "sgd":
        new = z - lr * grad
    else:
        if table.adam_m is None:
            table.adam_m = torch.zeros_like(table.codes)
            table.adam_v = torch.zeros_like(table.codes)
        b1, b2 = betas
        m = b1 * table.adam_m[ids] + (1 - b1) * grad
        v = b2 * table.adam_v[ids] + (1 - b2) * grad * grad
        table.adam_m[ids], table.adam_v[ids] = m, v
        t = (table.updates[ids] + 1).to(grad.dtype).unsqueeze(1)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new = z - lr * m_hat / (v_hat.sqrt() + eps)
    table.codes[ids] = project_to_sphere(new)
    table.updates[ids] += 1


def glo_train_epoch(gen: nn.Module, table: LatentTable, data: DatasetHandle, cfg: GloTrainConfig,
                    epoch: int, optimizer: torch.optim.Optimizer | None = None,
                    loss_fn: Callable | None = None) -> EpochStats:
    """One pass over every training image.

    The generator steps on the batch-mean loss; each latent row steps on the
    gradient of its own image's loss (the batch-mean gradient times the batch
    size), so latent step sizes do not shrink as batches grow.
    """
    if table.count != data.count:
        raise ValueError(f"latent table has {table.count} rows but dataset has {data.count} images")
    if tuple(gen.image_shape) != tuple(data.shape):
        raise ValueError(f"generator emits {gen.image_shape}, dataset images are {data.shape}")
    optimizer = optimizer or make_generator_optimizer(gen, cfg)
    loss_fn = loss_fn or build_loss(cfg.loss, in_channels=data.shape[0])
    z_lr = cfg.latent_rate(epoch)
    for group in optimizer.param_groups:
        group["lr"] = cfg.generator_rate(epoch)

    gen.train()
    losses, sizes = [], []
    batch = min(cfg.batch_size, data.count)
    for b, mb in enumerate(minibatches(data, batch, epoch)):
        z = table.codes[mb.ids].clone().requires_grad_(True)
        optimizer.zero_grad(set_to_none=True)
        loss = loss_fn(gen(z), mb.pixels)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NumericError(f"non-finite GLO loss {value} at epoch {epoch}, batch {b}")
        loss.backward()
        optimizer.step()
        if z_lr > 0:
            with torch.no_grad():
                _latent_step(table, mb.ids, z.detach(), z.grad * len(mb), z_lr, cfg.latent_optimizer)
        losses.append(value)
        sizes.append(len(mb))
    mean = float(np.average(losses, weights=sizes))
    return EpochStats(epoch, mean, losses, {"latent_lr": z_lr, "generator_lr": cfg.generator_rate(epoch)})


def train_glo(gen: nn.Module, table: LatentTable, data: DatasetHandle, cfg: GloTrainConfig,
              start_epoch: int = 0, callback: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    """Run ``cfg.epochs`` epochs with a persistent generator optimizer."""
    optimizer = make_generator_optimizer(gen, cfg)
    loss_fn = build_loss(cfg.loss, in_channels=data.shape[0])
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        stats = glo_train_epoch(gen, table, data, cfg, epoch, optimizer, loss_fn)
        history.append(stats)
        log.info("glo epoch %d loss %.5f", epoch, stats.mean_loss)
        if callback is not None:
            callback(stats)
    return history


@torch.no_grad()
def decode(gen: nn.Module, z: torch.Tensor) -> torch.Tensor:
    """Run the generator in inference mode, restoring its previous mode."""
    was_training = gen.training
    gen.eval()
    try:
        if len(z) == 0:
            return z.new_zeros((0, *gen.image_shape))
        return gen(z)
    finally:
        gen.train(was_training)


def glo_reconstruct(gen: nn.Module, table: LatentTable, ids) -> ImageBatch:
    """Decode the latent rows ``ids`` into images, in the given order."""
    ids = torch.as_tensor(np.asarray(ids, dtype=np.int64).reshape(-1))
    if len(ids) and (int(ids.min()) < 0 or int(ids.max()) >= table.count):
        raise ValueError(f"latent ids must lie in 0..{table.count - 1}")
    return ImageBatch(decode(gen, table.codes[ids]), ids)
