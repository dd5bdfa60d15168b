"""Sampling, inversion and interpolation with a trained generator + mapper."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .datasets import DatasetHandle, ImageBatch
from .errors import LengthMismatchError, NumericError
from .glo import LatentTable, decode, project_to_sphere
from .imle import apply_inference
from .losses import LossSpec, build_loss

log = logging.getLogger(__name__)

SHRINKAGE = 1e-4
JITTERS = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)


def _noise(n: int, dim: int, seed: int) -> torch.Tensor:
    if n < 0:
        raise ValueError(f"sample count must be >= 0, got {n}")
    return torch.randn(n, dim, generator=torch.Generator().manual_seed(seed))


@dataclass
class TrainedModel:
    """A GLO generator and the IMLE mapper feeding it.

    With ``project_latents`` (the default) mapper outputs are normalized onto
    the unit sphere before decoding, the same treatment Gaussian-fit draws
    get: the generator was only trained on unit-norm codes, and nearest
    neighbour matching against a finite pool pulls mapper outputs toward
    the inside of the sphere.
    """

    generator: nn.Module
    mapper: nn.Module
    metadata: dict = field(default_factory=dict)
    name: str = "glann"
    project_latents: bool = True

    @property
    def latent_dim(self) -> int:
        return self.generator.latent_dim

    @property
    def noise_dim(self) -> int:
        return self.mapper.noise_dim

    @property
    def image_shape(self):
        return tuple(self.generator.image_shape)

    def latents(self, e: torch.Tensor) -> torch.Tensor:
        """T(e) in inference mode, projected to the sphere if enabled."""
        z = apply_inference(self.mapper, e)
        return project_to_sphere(z) if self.project_latents and len(z) else z

    def decode_noise(self, e: torch.Tensor) -> torch.Tensor:
        """G(T(e)) with both networks in inference mode."""
        if len(e) == 0:
            return e.new_zeros((0, *self.image_shape))
        return decode(self.generator, self.latents(e))

    def sample(self, n: int, seed: int = 0) -> ImageBatch:
        return sample_images(self, n, seed)


def sample_noise(model: TrainedModel, n: int, seed: int = 0) -> torch.Tensor:
    return _noise(n, model.noise_dim, seed)


def sample_images(model: TrainedModel, n: int, seed: int = 0) -> ImageBatch:
    """Decode ``n`` seeded standard-normal noise vectors."""
    e = sample_noise(model, n, seed)
    return ImageBatch(model.decode_noise(e), torch.arange(n))


# -- Gaussian-fit baseline ------------------------------------------------------

@dataclass
class GaussianLatentPrior:
    mean: np.ndarray
    cov: np.ndarray
    factor: np.ndarray
    jitter: float = 0.0
    shrunk: bool = False

    @property
    def dim(self) -> int:
        return len(self.mean)

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        eps = np.random.default_rng(seed).standard_normal((n, self.dim))
        return self.mean + eps @ self.factor.T


def _shrink(cov: np.ndarray, lam: float) -> np.ndarray:
    d = len(cov)
    return (1 - lam) * cov + lam * (np.trace(cov) / d) * np.eye(d)


def fit_gaussian_prior(table: LatentTable | np.ndarray | torch.Tensor) -> GaussianLatentPrior:
    """Mean and unbiased covariance of the latent rows with a Cholesky factor.

    Covariance is shrunk toward a scaled identity when there are fewer than
    d + 1 rows or the factorization fails; diagonal jitter is added only if
    needed to factorize.
    """
    codes = table.codes if isinstance(table, LatentTable) else table
    rows = np.asarray(codes.detach().cpu().numpy() if isinstance(codes, torch.Tensor) else codes,
                      dtype=np.float64)
    n, d = rows.shape
    if n < 1:
        raise ValueError("cannot fit a Gaussian to an empty table")
    if not np.isfinite(rows).all():
        raise NumericError("latent table holds non-finite values")
    # shifting by the first row keeps identical rows at exactly zero covariance
    dev = rows - rows[0]
    mean = rows[0] + dev.mean(axis=0)
    cov = np.cov(dev, rowvar=False, ddof=1).reshape(d, d) if n > 1 else np.zeros((d, d))
    cov = (cov + cov.T) / 2
    shrunk = n < d + 1
    if shrunk:
        cov = _shrink(cov, SHRINKAGE)
    for attempt in range(2):
        for jitter in JITTERS:
            try:
                factor = np.linalg.cholesky(cov + jitter * np.eye(d))
            except np.linalg.LinAlgError:
                continue
            return GaussianLatentPrior(mean, cov, factor, jitter, shrunk)
        if attempt == 0 and not shrunk:
            cov, shrunk = _shrink(cov, SHRINKAGE), True
    raise NumericError("latent covariance is not factorizable even after shrinkage and jitter")


@dataclass
class GaussianFitSampler:
    """GLO baseline: decode Gaussian draws projected back onto the unit sphere."""

    generator: nn.Module
    prior: GaussianLatentPrior
    name: str = "gaussian-fit"

    def sample(self, n: int, seed: int = 0) -> ImageBatch:
        return gaussian_fit_sample(self.generator, self.prior, n, seed)


def gaussian_fit_sample(gen: nn.Module, prior: GaussianLatentPrior, n: int, seed: int = 0) -> ImageBatch:
    if n < 0:
        raise ValueError(f"sample count must be >= 0, got {n}")
    z = torch.from_numpy(prior.sample(n, seed)).float()
    if n:
        z = project_to_sphere(z)
    return ImageBatch(decode(gen, z), torch.arange(n))


@dataclass
class NoiseGeneratorSampler:
    """Sampler for a generator fed noise directly (the pixel-IMLE baseline)."""

    generator: nn.Module
    name: str = "pixel-imle"

    def sample(self, n: int, seed: int = 0) -> ImageBatch:
        e = _noise(n, self.generator.latent_dim, seed)
        return ImageBatch(decode(self.generator, e), torch.arange(n))


@dataclass
class DatasetSampler:
    """Returns real images; evaluating it against the same data is a sanity check."""

    data: DatasetHandle
    name: str = "data"

    def sample(self, n: int, seed: int = 0) -> ImageBatch:
        ids = np.random.default_rng(seed).permutation(self.data.count)[:n]
        return self.data.batch(ids)


# -- inversion and interpolation -----------------------------------------------

@dataclass
class InversionResult:
    noise: torch.Tensor
    loss: float
    initial_loss: float
    best_step: int
    diverged: bool = False
    history: list[float] = field(default_factory=list)


def invert_image(model: TrainedModel, image, loss: LossSpec | object = None, steps: int = 500,
                 init_seed: int = 0, init: torch.Tensor | None = None, lr: float = 0.05) -> InversionResult:
    """Find noise ``e`` minimizing loss(G(T(e)), image) with ADAM.

    T(e) is projected to the sphere when the model does so for sampling.
    Starts from ``init`` if given, else a seeded normal draw. Returns the
    lowest-loss iterate seen. A non-finite loss stops the search and sets
    ``diverged``.
    """
    target = image.pixels if hasattr(image, "pixels") else image
    if target.ndim == 3:
        target = target.unsqueeze(0)
    if tuple(target.shape[1:]) != model.image_shape:
        raise ValueError(f"image shape {tuple(target.shape[1:])} does not match model {model.image_shape}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if loss is None:
        loss = LossSpec(kind="l2")
    loss_fn = build_loss(loss, in_channels=target.shape[1]) if isinstance(loss, LossSpec) else loss

    e0 = _noise(len(target), model.noise_dim, init_seed) if init is None else init.reshape(len(target), -1)
    e = e0.clone().detach().requires_grad_(True)
    opt = torch.optim.Adam([e], lr=lr)
    gen, mapper = model.generator, model.mapper
    modes = gen.training, mapper.training
    gen.eval()
    mapper.eval()
    best_e, best_loss, best_step, initial = e0.clone(), float("inf"), 0, None
    history, diverged = [], False
    try:
        for step in range(steps + 1):
            opt.zero_grad(set_to_none=True)
            z = mapper(e)
            if model.project_latents:
                z = project_to_sphere(z)
            value_t = loss_fn(gen(z), target)
            value = float(value_t.detach())
            if initial is None:
                initial = value
            if not np.isfinite(value):
                diverged = True
                warnings.warn(f"inversion diverged at step {step}; returning best iterate", RuntimeWarning)
                break
            history.append(value)
            if value < best_loss:
                best_loss, best_e, best_step = value, e.detach().clone(), step
            if step == steps:
                break
            # grad w.r.t. e only; leaves the networks' .grad untouched
            (e.grad,) = torch.autograd.grad(value_t, e)
            opt.step()
    finally:
        gen.train(modes[0])
        mapper.train(modes[1])
    if not np.isfinite(best_loss):
        raise NumericError("inversion loss was non-finite from the first step")
    return InversionResult(best_e, best_loss, initial, best_step, diverged, history)


def lerp_noise(e1: torch.Tensor, e2: torch.Tensor, t: float) -> torch.Tensor:
    """e1 + t (e2 - e1), returning the endpoints themselves at t = 0 and t = 1."""
    if t == 0:
        return e1.clone()
    if t == 1:
        return e2.clone()
    return e1 + t * (e2 - e1)


def interpolate(model: TrainedModel, e1: torch.Tensor, e2: torch.Tensor, steps: int) -> ImageBatch:
    """Decode the straight line from e1 to e2 at ``steps`` evenly spaced t in [0, 1].

    Frames are decoded one at a time so each equals an independent decode of
    its own noise vector bit for bit.
    """
    if steps < 2:
        raise ValueError(f"interpolation needs at least 2 steps, got {steps}")
    e1, e2 = e1.reshape(1, -1), e2.reshape(1, -1)
    frames = [model.decode_noise(lerp_noise(e1, e2, i / (steps - 1))) for i in range(steps)]
    return ImageBatch(torch.cat(frames), torch.arange(steps))


# -- file output ------------------------------------------------------------------

def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """Map [-1, 1] to [0, 255] via round(255 (x + 1) / 2)."""
    x = pixels.detach().cpu().double().clamp(-1, 1).numpy()
    return np.rint(255.0 * (x + 1.0) / 2.0).astype(np.uint8)


def save_image_grid(images, path, nrow: int | None = None) -> Path:
    """Write images row-major into a lossless PNG grid."""
    pixels = images.pixels if hasattr(images, "pixels") else images
    n, c, h, w = pixels.shape
    if n == 0:
        raise ValueError("cannot write an empty image grid")
    nrow = nrow or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / nrow))
    canvas = np.zeros((rows * h, nrow * w, c), dtype=np.uint8)
    tiles = to_uint8(pixels).transpose(0, 2, 3, 1)
    for i, tile in enumerate(tiles):
        r, col = divmod(i, nrow)
        canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = tile
    img = Image.fromarray(canvas[..., 0] if c == 1 else canvas, mode="L" if c == 1 else "RGB")
    path = Path(path)
    img.save(path, format="PNG")
    return path


def save_noise(path, noise: torch.Tensor, seed: int | None = None) -> Path:
    """Raw little-endian float32 rows plus a one-line ``<path>.txt`` manifest."""
    path = Path(path)
    arr = np.ascontiguousarray(noise.detach().cpu().numpy(), dtype="<f4").reshape(len(noise), -1)
    path.write_bytes(arr.tobytes())
    Path(str(path) + ".txt").write_text(f"dim={arr.shape[1]} count={arr.shape[0]} seed={seed}\n")
    return path


def load_noise(path) -> tuple[torch.Tensor, int | None]:
    path = Path(path)
    fields = dict(kv.split("=", 1) for kv in Path(str(path) + ".txt").read_text().split())
    dim, count = int(fields["dim"]), int(fields["count"])
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    if arr.size != dim * count:
        raise LengthMismatchError(f"{path}: manifest says {count}x{dim} floats, file holds {arr.size}")
    seed = None if fields.get("seed") in (None, "None") else int(fields["seed"])
    return torch.from_numpy(arr.reshape(count, dim).astype(np.float32)), seed
