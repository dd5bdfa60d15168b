"""Acceptance criteria; each test records a one-line verdict printed at the end of the session."""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from glann.checkpoint import FORMAT_VERSION, decode_checkpoint, encode_checkpoint
from glann.cli import main
from glann.config import PipelineConfig, apply_overrides
from glann.datasets import DatasetHandle, write_idx
from glann.errors import ChecksumError, VersionError
from glann.evaluation import GaussianStats, angle_grid, evaluate_model, fid, prd_curve, random_conv_embedder
from glann.glo import GloTrainConfig, build_generator, init_latent_table, project_to_sphere, train_glo
from glann.imle import ImleTrainConfig, NoisePool, build_mapper, map_pool, nearest_mapped_noise, train_mapper
from glann.losses import LossSpec
from glann.pipeline import GLO_CKPT, load_pipeline_dataset, run_pipeline
from glann.synthesis import (DatasetSampler, TrainedModel, interpolate, invert_image, sample_images, sample_noise)

from conftest import ACCEPTANCE_RESULTS
from oracles import fid_eig, prd_sum, random_spd

ROOT = Path(__file__).resolve().parents[1]


def record(k, ok, detail):
    ACCEPTANCE_RESULTS[k] = (bool(ok), detail)
    assert ok, f"criterion {k}: {detail}"


# -- criteria 1 and 2: MNIST-4096 directional comparison --------------------------------------

@pytest.fixture(scope="module")
def mnist_run(mnist_dir, tmp_path_factory):
    cfg = PipelineConfig.load(ROOT / "configs" / "mnist_4096.json")
    cfg = apply_overrides(cfg, [f"dataset.path={mnist_dir / 'train-images-idx3-ubyte'}"])
    t = time.perf_counter()
    result = run_pipeline(cfg, tmp_path_factory.mktemp("mnist4096") / "run")
    return result, time.perf_counter() - t


def test_criterion_1_fid_ordering(mnist_run):
    result, seconds = mnist_run
    r = result.reports
    g, gf, px = r["glann"].fid, r["gaussian-fit"].fid, r["pixel-imle"].fid
    detail = (f"FID glann {g:.4f} < gaussian-fit {gf:.4f} (margin {gf - g:.4f}) and < pixel-imle {px:.4f} "
              f"(margin {px - g:.4f}); n={r['glann'].n_real}, {seconds / 60:.1f} min on CPU")
    record(1, g < gf and g < px and seconds < 3 * 3600, detail)


def test_criterion_2_prd_ordering(mnist_run):
    result, _ = mnist_run
    g, gf = result.reports["glann"], result.reports["gaussian-fit"]
    detail = f"(F8, F1/8) glann ({g.f8:.3f}, {g.f1_8:.3f}) vs gaussian-fit ({gf.f8:.3f}, {gf.f1_8:.3f})"
    record(2, g.f8 > gf.f8 and g.f1_8 > gf.f1_8, detail)


# -- criterion 3: FID oracle ---------------------------------------------------------------

def test_criterion_3_fid_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        mu1, mu2, s1, s2 = rng.normal(size=4), rng.normal(size=4), random_spd(rng, 4), random_spd(rng, 4)
        got = fid(GaussianStats(mu1, s1, 10), GaussianStats(mu2, s2, 10))
        worst = max(worst, abs(got - fid_eig(mu1, s1, mu2, s2)))
    s = GaussianStats(rng.normal(size=4), random_spd(rng, 4), 10)
    self_fid = fid(s, s)
    d = rng.normal(size=6)
    shift = fid(GaussianStats(np.zeros(6), np.eye(6), 10), GaussianStats(d, np.eye(6), 10))
    shift_err = abs(shift - d @ d)
    record(3, worst < 1e-8 and self_fid == 0.0 and shift_err < 1e-10,
           f"max |FID - eig oracle| {worst:.2e} over 20 pairs; FID(s,s) {self_fid}; mean-shift error {shift_err:.1e}")


# -- criterion 4: PRD oracle -----------------------------------------------------------------

def test_criterion_4_prd_oracle():
    rng = np.random.default_rng(7)
    lam = angle_grid()
    worst, monotone = 0.0, True
    for _ in range(100):
        k = int(rng.integers(2, 30))
        p, q = rng.random(k) * (rng.random(k) < 0.8) + 1e-3, rng.random(k)
        p, q = p / p.sum(), q / q.sum()
        curve = prd_curve(p, q)
        alpha, beta = prd_sum(p, q, lam)
        worst = max(worst, np.abs(curve.precision - alpha).max(), np.abs(curve.recall - beta).max())
        monotone &= bool(np.all(np.diff(curve.precision) >= 0) and np.all(np.diff(curve.recall) <= 0))
    same = prd_curve([0.2, 0.8], [0.2, 0.8])
    # the example curves hold up to summation rounding, checked at the oracle tolerance
    same_ok = (np.abs(same.precision - np.minimum(same.lambdas, 1)).max() < 1e-12
               and np.abs(same.recall - np.minimum(1, 1 / same.lambdas)).max() < 1e-12
               and same.precision[len(same) // 2] == same.recall[len(same) // 2] == 1.0)
    disjoint = prd_curve([1.0, 0.0], [0.0, 1.0])
    disjoint_ok = not disjoint.precision.any() and not disjoint.recall.any()
    half = prd_curve([0.5, 0.5, 0.0], [0.0, 0.5, 0.5])
    half_ok = (half.precision[len(half) // 2], half.recall[len(half) // 2]) == (0.5, 0.5)
    record(4, worst < 1e-12 and monotone and same_ok and disjoint_ok and half_ok,
           f"max |prd - direct sum| {worst:.1e} on 100 pairs; monotone {monotone}; identical {same_ok}; "
           f"disjoint {disjoint_ok}; half-overlap {half_ok}")


# -- criterion 5: nearest-neighbour oracle --------------------------------------------------------

def _argmin_oracle(z, pts):
    """Per-query exhaustive scan in float64; np.argmin returns the first minimum."""
    return [int(np.argmin(((pts - q) ** 2).sum(axis=1))) for q in z]


def test_criterion_5_nearest_neighbour_oracle():
    rng = np.random.default_rng(5)
    mismatches, planted_exact, planted_ties = 0, 0, 0
    for t in range(1000):
        m, d, b = int(rng.integers(1, 1001)), int(rng.integers(1, 65)), int(rng.integers(1, 9))
        pts = rng.normal(size=(m, d))
        z = rng.normal(size=(b, d))
        if t % 3 == 0:  # exact match
            j = int(rng.integers(m))
            z[0] = pts[j]
            planted_exact += 1
        if t % 3 == 1 and m >= 2:  # two candidates at exactly the same distance, closer than the rest
            # a dyadic grid keeps z +- v and every squared difference exact in floating point
            pts, z = np.round(pts * 32) / 32, np.round(z * 32) / 32
            i, j = sorted(rng.choice(m, 2, replace=False))
            v = rng.integers(-4, 5, size=d) / 1024
            v[0] = 1 / 1024
            pts[i], pts[j] = z[0] + v, z[0] - v
            planted_ties += 1
        if t % 3 == 2 and m >= 3:  # duplicated rows
            j = int(rng.integers(1, m))
            pts[j] = pts[int(rng.integers(j))]
            z[0] = pts[j] + 1e-4
            planted_ties += 1
        pool = NoisePool(torch.zeros(m, 1), torch.from_numpy(pts), fresh=True)
        idx, _ = nearest_mapped_noise(torch.from_numpy(z), pool)
        mismatches += idx.tolist() != _argmin_oracle(z, pts)
    record(5, mismatches == 0,
           f"{mismatches} mismatches on 1000 instances ({planted_exact} planted exact matches, "
           f"{planted_ties} planted ties)")


# -- criterion 6: GLO invariants --------------------------------------------------------------

def _fd(f, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            hi = f()
            flat[i] = old - eps
            lo = f()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
    return g


def test_criterion_6_glo_invariants():
    g = torch.Generator().manual_seed(0)
    data = DatasetHandle("toy", torch.rand(8, 1, 8, 8, generator=g) * 1.6 - 0.8)
    gen = build_generator("infogan-small", 8, data.shape, seed=0)
    table = init_latent_table(8, 8, 0)
    hist = train_glo(gen, table, data, GloTrainConfig(epochs=200, batch_size=8, latent_lr=0.05, decay_every=100,
                                                       loss=LossSpec(kind="l2")))
    norm_err = table.max_norm_error()
    ratio = hist[-1].mean_loss / hist[0].mean_loss

    small = build_generator("mlp", 3, (1, 4, 4), seed=1, hidden=6).double()
    z = project_to_sphere(torch.randn(2, 3, dtype=torch.float64, generator=g))
    target = torch.rand(2, 1, 4, 4, dtype=torch.float64, generator=g) * 2 - 1
    zz = z.clone().requires_grad_(True)
    params = list(small.parameters())
    grads = torch.autograd.grad(((small(zz) - target) ** 2).mean(), [zz, *params])

    def loss():
        return float(((small(z) - target) ** 2).mean())

    rel = [float((a - b).norm() / b.norm()) for a, b in
           zip(grads, [_fd(loss, z)] + [_fd(loss, p.data) for p in params])]
    record(6, norm_err < 1e-5 and ratio < 0.1 and max(rel) < 1e-3,
           f"max | |z| - 1 | {norm_err:.1e}; final/initial loss {ratio:.4f}; max gradient rel err {max(rel):.1e}")


# -- criterion 7: IMLE circle toy -------------------------------------------------------------------

def test_criterion_7_imle_circle():
    th = torch.arange(100) * 2 * np.pi / 100
    from glann.glo import LatentTable
    table = LatentTable(torch.stack([th.cos(), th.sin()], 1).float())
    hist = train_mapper(build_mapper(2, 2, seed=0), table, ImleTrainConfig(epochs=200))
    first, last = hist[0].extra["matched_distance"], hist[-1].extra["matched_distance"]
    record(7, last < 0.2 * first, f"matched distance epoch 200 / epoch 1 = {last:.4f} / {first:.4f} "
                                  f"= {last / first:.3f}")


# -- criterion 8: synthesis contracts ------------------------------------------------------------

def test_criterion_8_synthesis_contracts():
    g = torch.Generator().manual_seed(1)
    data = DatasetHandle("toy", torch.rand(16, 1, 8, 8, generator=g) * 1.6 - 0.8)
    gen = build_generator("infogan-small", 4, data.shape, seed=0)
    table = init_latent_table(16, 4, 0)
    train_glo(gen, table, data, GloTrainConfig(epochs=10, batch_size=8, latent_lr=0.05, loss=LossSpec(kind="l2")))
    mapper = build_mapper(3, 4, hidden=16, seed=0)
    train_mapper(mapper, table, ImleTrainConfig(epochs=5, batch_size=8, pool_size=64))
    model = TrainedModel(gen, mapper)

    e = sample_noise(model, 12, seed=4)
    z = project_to_sphere(map_pool(mapper, NoisePool(e)).mapped)
    gen.eval()
    with torch.no_grad():
        manual = gen(z)
    gen.train()
    composition = torch.equal(sample_images(model, 12, seed=4).pixels, manual)
    frames = interpolate(model, e[0], e[1], 6).pixels
    endpoints = (torch.equal(frames[0:1], model.decode_noise(e[0:1]))
                 and torch.equal(frames[5:6], model.decode_noise(e[1:2])))
    inv = invert_image(model, model.decode_noise(e[2:3]), steps=50, init=e[2:3])
    seeded = torch.equal(sample_images(model, 20, seed=9).pixels, sample_images(model, 20, seed=9).pixels)
    record(8, composition and endpoints and inv.loss < 1e-6 and seeded,
           f"composition bit-exact {composition}; endpoints bit-exact {endpoints}; "
           f"inversion loss {inv.loss:.1e}; seeded sampling reproducible {seeded}")


# -- criterion 9: determinism and checkpoint errors --------------------------------------------------

def test_criterion_9_determinism_and_checkpoints(tmp_path, monkeypatch):
    pix = np.random.default_rng(0).integers(0, 256, size=(32, 8, 8), dtype=np.uint8)
    write_idx(tmp_path / "imgs", pix)
    cfg = {"dataset": {"path": str(tmp_path / "imgs")}, "latent_dim": 4, "noise_dim": 4,
           "generator_arch": "infogan-small", "mapper_hidden": 16, "grid_size": 8,
           "glo": {"epochs": 4, "batch_size": 8}, "imle": {"epochs": 4, "batch_size": 8, "pool_size": 64},
           "pixel_imle": {"epochs": 2, "batch_size": 8, "pool_size": 64}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    monkeypatch.setenv("GLANN_DETERMINISTIC", "1")
    try:
        codes = [main(["run-all", "--config", str(tmp_path / "c.json"), "--seed", "3", "--no-eval",
                       "--out", str(tmp_path / f"run{i}")]) for i in range(2)]
    finally:
        torch.use_deterministic_algorithms(False)
    names = [GLO_CKPT, "mapper.ckpt", "pixel_imle.ckpt"]
    identical = all((tmp_path / "run0" / n).read_bytes() == (tmp_path / "run1" / n).read_bytes() for n in names)

    raw = bytearray((tmp_path / "run0" / GLO_CKPT).read_bytes())
    raw[len(raw) // 2] ^= 0x10
    try:
        decode_checkpoint(bytes(raw))
        corrupt = "no error"
    except ChecksumError:
        corrupt = "ChecksumError"
    try:
        decode_checkpoint(encode_checkpoint({"x": np.zeros(2)}, version=FORMAT_VERSION + 1))
        version = "no error"
    except VersionError as exc:
        version = f"VersionError({exc.file_version} vs {exc.reader_version})"
    record(9, codes == [0, 0] and identical and corrupt == "ChecksumError" and version.startswith("VersionError"),
           f"exit codes {codes}; checkpoints identical {identical}; corrupt byte -> {corrupt}; "
           f"version 2 -> {version}")


# -- criterion 10: self-evaluation ------------------------------------------------------------------

def test_criterion_10_self_evaluation(mnist_dir):
    cfg = PipelineConfig.load(ROOT / "configs" / "mnist_4096.json")
    cfg = apply_overrides(cfg, [f"dataset.path={mnist_dir / 'train-images-idx3-ubyte'}"])
    data = load_pipeline_dataset(cfg)
    emb = random_conv_embedder(data.shape[0], cfg.evaluation.embedder_dim, seed=cfg.evaluation.embedder_seed)
    rep = evaluate_model(DatasetSampler(data), data, emb, n=data.count, seed=0)
    record(10, rep.fid < 1e-3 and rep.f8 > 0.99 and rep.f1_8 > 0.99,
           f"real vs real: FID {rep.fid:.2e}, F8 {rep.f8:.4f}, F1/8 {rep.f1_8:.4f} (n={rep.n_real})")
