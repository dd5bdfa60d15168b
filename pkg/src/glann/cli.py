"""Command-line entry points.

Every subcommand reads an optional JSON config (``--config``) and dotted
overrides (``--set glo.epochs=20``); explicit flags win over both.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error
(unreadable dataset, bad checkpoint), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import pipeline as pl
from .config import PipelineConfig, apply_overrides, configure_determinism
from .errors import ConfigurationError, FormatError, NumericError, PipelineError
from .evaluation import evaluate_model
from .synthesis import (GaussianFitSampler, NoiseGeneratorSampler, fit_gaussian_prior, interpolate,
                        invert_image, load_noise, sample_noise, save_image_grid, save_noise)

log = logging.getLogger("glann")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # raise instead of exiting so main() owns the exit code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides)


def _run_dir(args, cfg: PipelineConfig) -> Path:
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return pl.new_run_dir(cfg)


def _load_image(path, shape) -> torch.Tensor:
    c, h, w = shape
    img = Image.open(path).convert("L" if c == 1 else "RGB")
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64).reshape(h, w, c).transpose(2, 0, 1)
    return torch.from_numpy(arr / 127.5 - 1.0).float().unsqueeze(0)


# -- subcommands ----------------------------------------------------------------------

def cmd_train_glo(args):
    cfg = _config(args)
    data = pl.load_pipeline_dataset(cfg)
    out = _run_dir(args, cfg)
    cfg.save(out / "config.json")
    gen, table, hist = pl.train_glo_stage(cfg, data)
    path = pl.save_glo(out / pl.GLO_CKPT, gen, table, cfg, cfg.glo.epochs,
                       {"config_hash": cfg.hash(), "dataset": data.source, "count": data.count})
    print(f"final loss {hist[-1].mean_loss:.6f}" if hist else "no epochs run")
    print(path)


def cmd_train_mapper(args):
    cfg = _config(args)
    _, table, _ = pl.load_glo(args.glo)
    out = Path(args.out) if args.out else Path(args.glo).parent
    out.mkdir(parents=True, exist_ok=True)
    mapper, hist = pl.train_mapper_stage(cfg, table)
    path = pl.save_mapper(out / pl.MAPPER_CKPT, mapper, cfg, cfg.imle.epochs)
    if hist:
        print(f"final matched distance {hist[-1].extra['matched_distance']:.6f}")
    print(path)


def cmd_sample(args):
    model = pl.load_trained_model(args.glo, args.mapper)
    images = model.sample(args.n, args.seed)
    print(save_image_grid(images, args.out, args.nrow))
    if args.noise_out:
        print(save_noise(args.noise_out, sample_noise(model, args.n, args.seed), args.seed))


def cmd_sample_gaussian(args):
    gen, table, _ = pl.load_glo(args.glo)
    images = GaussianFitSampler(gen, fit_gaussian_prior(table)).sample(args.n, args.seed)
    print(save_image_grid(images, args.out, args.nrow))


def cmd_invert(args):
    model = pl.load_trained_model(args.glo, args.mapper)
    if (args.image is None) == (args.index is None):
        raise UsageError("invert: give exactly one of --image or --index")
    if args.image is not None:
        target = _load_image(args.image, model.image_shape)
    else:
        target = pl.load_pipeline_dataset(_config(args)).batch([args.index]).pixels
    seed = 0 if args.seed is None else args.seed
    res = invert_image(model, target, steps=args.steps, init_seed=seed, lr=args.lr)
    print(f"loss {res.initial_loss:.6f} -> {res.loss:.6f} (best step {res.best_step})")
    print(save_noise(args.out, res.noise, seed))
    if args.recon:
        recon = model.decode_noise(res.noise)
        print(save_image_grid(torch.cat([target, recon]), args.recon, 2))


def cmd_interpolate(args):
    model = pl.load_trained_model(args.glo, args.mapper)
    if args.noise:
        e, _ = load_noise(args.noise)
        if len(e) < 2:
            raise UsageError("interpolate: the noise file must hold at least two rows")
        e1, e2 = e[0], e[1]
    else:
        e1, e2 = sample_noise(model, 2, args.seed)
    frames = interpolate(model, e1, e2, args.steps)
    print(save_image_grid(frames, args.out, args.steps))


def cmd_evaluate(args):
    cfg = _config(args)
    data = pl.load_pipeline_dataset(cfg)
    if args.embedder:
        emb = pl.load_embedder(args.embedder)
    else:
        emb, _ = pl.build_embedder(cfg, data)
    if args.sampler == "glann":
        if not args.mapper:
            raise UsageError("evaluate: --mapper is required for the glann sampler")
        sampler = pl.load_trained_model(args.glo, args.mapper)
    elif args.sampler == "gaussian-fit":
        gen, table, _ = pl.load_glo(args.glo)
        sampler = GaussianFitSampler(gen, fit_gaussian_prior(table))
    else:
        if not args.pixel_imle:
            raise UsageError("evaluate: --pixel-imle is required for the pixel-imle sampler")
        sampler = NoiseGeneratorSampler(pl.load_noise_generator(args.pixel_imle))
    e = cfg.evaluation
    report = evaluate_model(sampler, data, emb, min(e.n, data.count), e.seed, e.num_bins, e.num_angles,
                            cfg.hash())
    if args.sampler == "gaussian-fit" or getattr(sampler, "project_latents", False):
        report.notes["latent_postprocess"] = "projected-to-unit-sphere"
    sys.stdout.write(report.to_text() if not args.out else "")
    if args.out:
        print(report.write(args.out))
        print(report.write_csv(Path(args.out).with_suffix(".csv")))


def cmd_run_all(args):
    cfg = _config(args)
    run_dir = Path(args.out) if args.out else None
    result = pl.run_pipeline(cfg, run_dir, resume_from=args.resume, evaluate=not args.no_eval)
    for name, report in result.reports.items():
        print(f"{name}: FID {report.fid:.6f}  F8 {report.f8:.4f}  F1/8 {report.f1_8:.4f}")
    if result.skipped:
        print("resumed stages:", ", ".join(result.skipped))
    print(result.run_dir)


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glann", description="GLO + IMLE mapper image generation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        return p

    def with_model(p, mapper=True):
        p.add_argument("--glo", required=True, help="GLO checkpoint")
        if mapper:
            p.add_argument("--mapper", required=True, help="mapper checkpoint")
        return p

    p = with_config(sub.add_parser("train-glo", help="stage 1: generator and latent codes"))
    p.add_argument("--out", help="output directory (default: new run directory)")
    p.set_defaults(func=cmd_train_glo)

    p = with_config(sub.add_parser("train-mapper", help="stage 2: noise-to-latent mapper"))
    p.add_argument("--glo", required=True, help="GLO checkpoint")
    p.add_argument("--out", help="output directory (default: next to the GLO checkpoint)")
    p.set_defaults(func=cmd_train_mapper)

    for name, func, mapper in (("sample", cmd_sample, True), ("sample-gaussian", cmd_sample_gaussian, False)):
        p = with_model(sub.add_parser(name, help=f"write a grid of {'GLANN' if mapper else 'Gaussian-fit'} samples"),
                       mapper)
        p.add_argument("-n", type=int, default=64)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--nrow", type=int)
        p.add_argument("--out", required=True, help="PNG path")
        if mapper:
            p.add_argument("--noise-out", help="also write the noise vectors")
        p.set_defaults(func=func)

    p = with_config(with_model(sub.add_parser("invert", help="recover noise for an image")))
    p.add_argument("--image", help="image file")
    p.add_argument("--index", type=int, help="index into the configured dataset")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--out", required=True, help="noise output path")
    p.add_argument("--recon", help="PNG with target and reconstruction")
    p.set_defaults(func=cmd_invert)

    p = with_model(sub.add_parser("interpolate", help="decode a straight line between two noise vectors"))
    p.add_argument("--noise", help="noise file whose first two rows are the endpoints")
    p.add_argument("--seed", type=int, default=0, help="draw endpoints from this seed instead")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(func=cmd_interpolate)

    p = with_config(with_model(sub.add_parser("evaluate", help="FID and PRD of a sampler"), mapper=False))
    p.add_argument("--mapper", help="mapper checkpoint (glann sampler)")
    p.add_argument("--pixel-imle", help="pixel-IMLE generator checkpoint")
    p.add_argument("--sampler", choices=("glann", "gaussian-fit", "pixel-imle"), default="glann")
    p.add_argument("--embedder", help="embedder checkpoint (default: build from config)")
    p.add_argument("--out", help="report path (default: print)")
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("run-all", help="train, sample and evaluate"))
    p.add_argument("--out", help="run directory (default: new timestamped directory)")
    p.add_argument("--resume", help="previous run directory whose checkpoints are reused")
    p.add_argument("--no-eval", action="store_true", help="skip evaluation")
    p.set_defaults(func=cmd_run_all)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, PipelineError) and exc.__cause__ is not None:
        exc = exc.__cause__
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, FileNotFoundError, IsADirectoryError, OSError)):
        return EXIT_DATA
    return EXIT_USAGE


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_determinism()
    try:
        args.func(args)
    except (UsageError, ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # mapped to the documented exit codes
        code = exit_code_for(exc)
        if code == EXIT_USAGE and not isinstance(exc, PipelineError):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
