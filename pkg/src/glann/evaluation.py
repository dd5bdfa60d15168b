"""Sample-quality metrics: Frechet distance (FID) and PRD precision/recall curves.

Images are embedded by an ``Embedder``; absolute scores depend on the
embedder, so every report carries its identifier.
"""

from __future__ import annotations

import hashlib
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import DatasetHandle, ImageBatch
from .errors import NumericError

log = logging.getLogger(__name__)

DEFAULT_BINS = 20
DEFAULT_ANGLES = 1001
NEG_EIG_TOL = 1e-6


# -- embedders -------------------------------------------------------------------

class Embedder(Protocol):
    identifier: str

    def embed(self, images) -> np.ndarray: ...


class TorchEmbedder:
    """Wraps a frozen module mapping (N, C, H, W) images to (N, D) features."""

    def __init__(self, net: nn.Module, identifier: str, in_channels: int | None = None, batch: int = 512):
        self.net = net.eval().requires_grad_(False)
        self.identifier = identifier
        self.in_channels = in_channels
        self.batch = batch

    @torch.no_grad()
    def embed(self, images) -> np.ndarray:
        x = images.pixels if hasattr(images, "pixels") else images
        if self.in_channels and x.shape[1] == 1 and self.in_channels != 1:
            x = x.expand(-1, self.in_channels, -1, -1)
        chunks = [self.net(x[i:i + self.batch].float()) for i in range(0, len(x), self.batch)]
        return torch.cat(chunks).double().numpy() if chunks else np.zeros((0, 0))


class _ConvFeatures(nn.Module):
    def __init__(self, in_channels: int, widths: Sequence[int], dim: int):
        super().__init__()
        layers, cin = [], in_channels
        for k, w in enumerate(widths):
            layers += [nn.Conv2d(cin, w, 3, stride=1 if k == 0 else 2, padding=1), nn.ReLU()]
            cin = w
        self.conv = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.proj = nn.Linear(4 * cin, dim)

    def forward(self, x):
        return self.proj(self.pool(self.conv(x)).flatten(1))


def random_conv_embedder(in_channels: int = 1, dim: int = 64, widths: Sequence[int] = (16, 32, 64),
                         seed: int = 0) -> TorchEmbedder:
    """Fixed random-weight convolutional projector (no training, no labels)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _ConvFeatures(in_channels, widths, dim)
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
    ident = f"random-conv(c={in_channels},w={'-'.join(map(str, widths))},d={dim},seed={seed})"
    return TorchEmbedder(net, ident, in_channels)


class ConvClassifier(nn.Module):
    """Small CNN classifier; its penultimate layer is the embedding."""

    def __init__(self, in_channels: int, num_classes: int, dim: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(3), nn.Flatten(), nn.Linear(64 * 9, dim), nn.ReLU(),
        )
        self.head = nn.Linear(dim, num_classes)

    def forward(self, x):
        return self.head(self.features(x))


def train_classifier_embedder(data: DatasetHandle, labels: np.ndarray, epochs: int = 5, dim: int = 64,
                              batch: int = 128, lr: float = 1e-3, seed: int = 0):
    """Train ConvClassifier on (data, labels) and return (embedder, train accuracy)."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(labels) != data.count:
        raise ValueError(f"{len(labels)} labels for {data.count} images")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ConvClassifier(data.shape[0], int(labels.max()) + 1, dim)
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        rng = np.random.default_rng(seed)
        for _ in range(epochs):
            order = torch.from_numpy(rng.permutation(data.count))
            for i in range(0, data.count, batch):
                ids = order[i:i + batch]
                opt.zero_grad()
                F.cross_entropy(net(data.pixels[ids]), labels[ids]).backward()
                opt.step()
    net.eval()
    with torch.no_grad():
        acc = float((net(data.pixels).argmax(1) == labels).float().mean())
    digest = hashlib.sha256(b"".join(p.detach().numpy().tobytes() for p in net.parameters())).hexdigest()[:10]
    return TorchEmbedder(net.features, f"classifier(d={dim},seed={seed},sha={digest})", data.shape[0]), acc


def pixel_embedder() -> TorchEmbedder:
    """Flattened pixels; only sensible for tiny images and tests."""
    return TorchEmbedder(nn.Flatten(), "pixels")


# -- Gaussian statistics and FID ------------------------------------------------

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return len(self.mean)


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased (n - 1) covariance, symmetrized."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError(f"need a (count >= 2, D) feature matrix, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(x) - 1)
    return GaussianStats(mean, (cov + cov.T) / 2, len(x))


def _sym_sqrt(s: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((s + s.T) / 2)
    if vals.min() < -NEG_EIG_TOL:
        raise NumericError(f"{what} has eigenvalue {vals.min():.3g} < -{NEG_EIG_TOL}")
    vals = np.clip(vals, 0.0, None)
    return vals, vecs, (vecs * np.sqrt(vals)) @ vecs.T


def matrix_sqrt_product(s1, s2) -> np.ndarray:
    """Principal square root of ``s1 @ s2`` for symmetric PSD ``s1``, ``s2``.

    With A = s1^(1/2), the product is similar to the symmetric matrix
    M = A s2 A, so (s1 s2)^(1/2) = A M^(1/2) A^+ where A^+ is the
    pseudo-inverse. Eigenvalues of M in (-1e-6, 0) are clamped to zero.
    """
    s1, s2 = np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape or s1.ndim != 2 or s1.shape[0] != s1.shape[1]:
        raise ValueError(f"need two square matrices of equal size, got {s1.shape} and {s2.shape}")
    vals1, vecs1, a = _sym_sqrt(s1, "first matrix")
    _, _, m_sqrt = _sym_sqrt(a @ s2 @ a, "product")
    cutoff = vals1.max(initial=0.0) * len(vals1) * np.finfo(float).eps
    inv_root = np.where(vals1 > cutoff, 1.0 / np.sqrt(np.where(vals1 > cutoff, vals1, 1.0)), 0.0)
    a_pinv = (vecs1 * inv_root) @ vecs1.T
    return a @ m_sqrt @ a_pinv


def trace_sqrt_product(s1, s2) -> float:
    """tr((s1 s2)^(1/2)) as the sum of square roots of the eigenvalues of A s2 A."""
    _, _, a = _sym_sqrt(np.asarray(s1, dtype=np.float64), "first matrix")
    m = a @ np.asarray(s2, dtype=np.float64) @ a
    vals = np.linalg.eigvalsh((m + m.T) / 2)
    if vals.min() < -NEG_EIG_TOL:
        raise NumericError(f"product has eigenvalue {vals.min():.3g} < -{NEG_EIG_TOL}")
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def fid(real: GaussianStats, gen: GaussianStats) -> float:
    """||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^(1/2))."""
    if real.dim != gen.dim:
        raise ValueError(f"dimension mismatch: {real.dim} vs {gen.dim}")
    if np.array_equal(real.mean, gen.mean) and np.array_equal(real.cov, gen.cov):
        return 0.0  # exact; the generic route leaves rounding residue of order 1e-13
    diff = real.mean - gen.mean
    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov)
                  - 2.0 * trace_sqrt_product(real.cov, gen.cov))
    if value < 0:
        if value > -NEG_EIG_TOL:
            return 0.0
        raise NumericError(f"FID evaluated to {value:.3g} < 0")
    return value


# -- PRD ----------------------------------------------------------------------------

def prd_histograms(feat_real, feat_gen, num_bins: int = DEFAULT_BINS, seed: int = 0):
    """Cluster both sets jointly with k-means and histogram each set over the clusters."""
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    real = np.asarray(feat_real, dtype=np.float64)
    gen = np.asarray(feat_gen, dtype=np.float64)
    if len(real) != len(gen):
        raise ValueError(f"need equal sample counts, got {len(real)} real and {len(gen)} generated")
    if num_bins < 2:
        raise ValueError("num_bins must be >= 2")
    data = np.concatenate([real, gen])
    km = KMeans(n_clusters=num_bins, init="k-means++", n_init=1, max_iter=100, tol=1e-6, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        labels = km.fit_predict(data)
    p = np.bincount(labels[: len(real)], minlength=num_bins) / len(real)
    q = np.bincount(labels[len(real):], minlength=num_bins) / len(gen)
    return p, q


@dataclass
class PrdCurve:
    lambdas: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    num_bins: int = DEFAULT_BINS
    seed: int = 0

    def __len__(self):
        return len(self.lambdas)


def angle_grid(num_angles: int = DEFAULT_ANGLES) -> np.ndarray:
    """lambda = tan(theta) for theta equally spaced strictly inside (0, pi/2).

    With an odd count the middle slope is exactly 1.
    """
    if num_angles < 2:
        raise ValueError("num_angles must be >= 2")
    theta = np.arange(1, num_angles + 1) * (np.pi / 2) / (num_angles + 1)
    lambdas = np.tan(theta)
    if num_angles % 2:
        lambdas[num_angles // 2] = 1.0
    return lambdas


def prd_curve(p, q, num_angles: int = DEFAULT_ANGLES, num_bins: int | None = None, seed: int = 0) -> PrdCurve:
    """alpha(l) = sum min(l P, Q) and beta(l) = sum min(P, Q / l) over the slope grid."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("histograms must be 1-D and the same length")
    for name, h in (("P", p), ("Q", q)):
        if abs(h.sum() - 1) > 1e-6 or (h < 0).any():
            raise ValueError(f"histogram {name} is not a probability vector (sum {h.sum()})")
    lambdas = angle_grid(num_angles)
    alpha = np.minimum(lambdas[:, None] * p[None, :], q[None, :]).sum(axis=1)
    beta = np.minimum(p[None, :], q[None, :] / lambdas[:, None]).sum(axis=1)
    return PrdCurve(lambdas, np.clip(alpha, 0, 1), np.clip(beta, 0, 1),
                    len(p) if num_bins is None else num_bins, seed)


def f_beta(precision, recall, beta: float) -> np.ndarray:
    precision, recall = np.asarray(precision, float), np.asarray(recall, float)
    denom = beta ** 2 * precision + recall
    num = (1 + beta ** 2) * precision * recall
    return np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)


def f_beta_summary(curve: PrdCurve, beta: float = 8.0) -> tuple[float, float]:
    """(F_beta, F_1/beta) maximized over the curve; (F8, F1/8) by default."""
    if len(curve) == 0:
        raise ValueError("empty PRD curve")
    return (float(f_beta(curve.precision, curve.recall, beta).max()),
            float(f_beta(curve.precision, curve.recall, 1.0 / beta).max()))


# -- reports -------------------------------------------------------------------------

@dataclass
class EvalReport:
    sampler: str
    fid: float
    curve: PrdCurve
    f8: float
    f1_8: float
    embedder: str
    n_real: int
    n_gen: int
    seed: int
    config_hash: str = ""
    real_ids: list[int] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_text(self) -> str:
        out = io.StringIO()
        scalars = {
            "sampler": self.sampler, "fid": repr(self.fid), "f8": repr(self.f8), "f1_8": repr(self.f1_8),
            "embedder": self.embedder, "n_real": self.n_real, "n_gen": self.n_gen, "seed": self.seed,
            "config_hash": self.config_hash, "prd_bins": self.curve.num_bins,
            "prd_seed": self.curve.seed, "prd_angles": len(self.curve),
            "real_ids": ",".join(map(str, self.real_ids)),
        }
        for k, v in {**scalars, **{f"note.{k}": v for k, v in self.notes.items()}}.items():
            out.write(f"{k} = {v}\n")
        out.write("[prd]\nlambda alpha beta\n")
        for row in zip(self.curve.lambdas, self.curve.precision, self.curve.recall):
            out.write(" ".join(repr(float(x)) for x in row) + "\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        head, _, table = text.partition("[prd]\n")
        kv = dict(line.split(" = ", 1) for line in head.splitlines() if line.strip())
        rows = np.array([[float(x) for x in line.split()] for line in table.splitlines()[1:] if line.strip()])
        rows = rows.reshape(-1, 3)
        curve = PrdCurve(rows[:, 0], rows[:, 1], rows[:, 2], int(kv["prd_bins"]), int(kv["prd_seed"]))
        notes = {k[5:]: v for k, v in kv.items() if k.startswith("note.")}
        ids = [int(x) for x in kv.get("real_ids", "").split(",") if x]
        return cls(kv["sampler"], float(kv["fid"]), curve, float(kv["f8"]), float(kv["f1_8"]),
                   kv["embedder"], int(kv["n_real"]), int(kv["n_gen"]), int(kv["seed"]),
                   kv.get("config_hash", ""), ids, notes)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        rows = np.column_stack([self.curve.lambdas, self.curve.precision, self.curve.recall])
        np.savetxt(path, rows, delimiter=",", header="lambda,alpha,beta", comments="", fmt="%.17g")
        return path


def plot_prd(reports: Sequence[EvalReport], path) -> Path:
    """Precision-recall curves with each sampler's (F8, F1/8) point overlaid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_curve, ax_f) = plt.subplots(1, 2, figsize=(9, 4))
    for r in reports:
        ax_curve.plot(r.curve.recall, r.curve.precision, label=r.sampler)
        ax_f.scatter([r.f8], [r.f1_8], label=r.sampler, marker="*", s=120)
    ax_curve.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1), title="PRD")
    ax_f.set(xlabel="F8 (recall)", ylabel="F1/8 (precision)", xlim=(0, 1), ylim=(0, 1), title="(F8, F1/8)")
    ax_curve.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def evaluate_samples(real: ImageBatch, gen: ImageBatch, emb: Embedder, num_bins: int = DEFAULT_BINS,
                     num_angles: int = DEFAULT_ANGLES, seed: int = 0, sampler: str = "model",
                     config_hash: str = "") -> EvalReport:
    """FID and PRD between two equally sized image batches."""
    if len(real) != len(gen):
        raise ValueError(f"need equal sample counts, got {len(real)} real and {len(gen)} generated")
    fr, fg = emb.embed(real), emb.embed(gen)
    score = fid(gaussian_stats(fr), gaussian_stats(fg))
    p, q = prd_histograms(fr, fg, num_bins, seed)
    curve = prd_curve(p, q, num_angles, num_bins, seed)
    f8, f1_8 = f_beta_summary(curve)
    return EvalReport(sampler, score, curve, f8, f1_8, emb.identifier, len(real), len(gen), seed,
                      config_hash, [int(i) for i in real.ids])


def evaluate_model(model, data: DatasetHandle, emb: Embedder, n: int = 10000, seed: int = 0,
                   num_bins: int = DEFAULT_BINS, num_angles: int = DEFAULT_ANGLES,
                   config_hash: str = "") -> EvalReport:
    """Compare ``n`` samples from ``model`` with ``n`` real images.

    ``model`` is anything with ``sample(n, seed) -> ImageBatch``. Real images
    are the first ``n`` ids of a ``seed``-driven permutation of the dataset.
    """
    if n > data.count:
        raise ValueError(f"requested {n} samples but the dataset holds {data.count} images")
    if n < 2:
        raise ValueError("need at least 2 samples")
    real = data.batch(np.random.default_rng(seed).permutation(data.count)[:n])
    gen = model.sample(n, seed)
    name = getattr(model, "name", type(model).__name__)
    return evaluate_samples(real, gen, emb, num_bins, num_angles, seed, name, config_hash)
