"""End-to-end GLANN run: GLO -> IMLE mapper -> samples -> evaluation.

Each stage writes a checkpoint into the run directory; a later run can
resume from a directory holding ``glo.ckpt`` (and optionally
``mapper.ckpt``) and skip those stages.
"""

from __future__ import annotations

import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import PipelineConfig, configure_determinism
from .datasets import DatasetHandle, load_dataset, load_idx_labels
from .errors import ConfigurationError, PipelineError
from .evaluation import (EvalReport, TorchEmbedder, evaluate_model, pixel_embedder, plot_prd,
                         random_conv_embedder, train_classifier_embedder)
from .glo import (LatentTable, build_generator, generator_from_config, init_latent_table,
                  pca_latent_table, train_glo)
from .imle import MapperNetwork, build_mapper, train_mapper, train_pixel_imle
from .synthesis import (GaussianFitSampler, NoiseGeneratorSampler, TrainedModel, fit_gaussian_prior,
                        sample_noise, save_image_grid, save_noise)

log = logging.getLogger(__name__)

GLO_CKPT = "glo.ckpt"
MAPPER_CKPT = "mapper.ckpt"
PIXEL_IMLE_CKPT = "pixel_imle.ckpt"
EMBEDDER_CKPT = "embedder.ckpt"


# -- checkpoint helpers -------------------------------------------------------------

def save_glo(path, gen, table: LatentTable, cfg: PipelineConfig | None = None, epoch: int = 0,
             meta: dict | None = None) -> Path:
    tensors = ckpt.module_tensors("generator", gen)
    tensors["latent/codes"] = table.codes
    tensors["latent/updates"] = table.updates
    if table.adam_m is not None:
        tensors["latent/adam_m"] = table.adam_m
        tensors["latent/adam_v"] = table.adam_v
    info = {"stage": "glo", "generator": gen.arch_config(), "latent_dim": gen.latent_dim,
            "image_shape": list(gen.image_shape), **(meta or {})}
    return ckpt.save_checkpoint(path, tensors, cfg.to_dict() if cfg else {}, epoch, info)


def load_glo(path):
    """Return (generator, latent table, checkpoint)."""
    c = ckpt.load_checkpoint(path)
    gen = generator_from_config(c.meta["generator"], c.meta["latent_dim"], c.meta["image_shape"])
    gen.load_state_dict(c.state_dict("generator"))
    table = LatentTable(c.torch("latent/codes"), c.torch("latent/updates"))
    if "latent/adam_m" in c.tensors:
        table.adam_m, table.adam_v = c.torch("latent/adam_m"), c.torch("latent/adam_v")
    return gen, table, c


def save_mapper(path, mapper: MapperNetwork, cfg: PipelineConfig | None = None, epoch: int = 0) -> Path:
    return ckpt.save_checkpoint(path, ckpt.module_tensors("mapper", mapper), cfg.to_dict() if cfg else {},
                                epoch, {"stage": "mapper", "mapper": mapper.arch_config()})


def load_mapper(path) -> MapperNetwork:
    c = ckpt.load_checkpoint(path)
    mapper = MapperNetwork(**c.meta["mapper"])
    mapper.load_state_dict(c.state_dict("mapper"))
    return mapper


def save_noise_generator(path, gen, cfg: PipelineConfig | None = None, epoch: int = 0) -> Path:
    meta = {"stage": "pixel-imle", "generator": gen.arch_config(), "latent_dim": gen.latent_dim,
            "image_shape": list(gen.image_shape)}
    return ckpt.save_checkpoint(path, ckpt.module_tensors("generator", gen), cfg.to_dict() if cfg else {},
                                epoch, meta)


def load_noise_generator(path):
    c = ckpt.load_checkpoint(path)
    gen = generator_from_config(c.meta["generator"], c.meta["latent_dim"], c.meta["image_shape"])
    gen.load_state_dict(c.state_dict("generator"))
    return gen


def load_trained_model(glo_path, mapper_path, project_latents: bool | None = None) -> TrainedModel:
    """Rebuild a sampler; the projection flag defaults to what the run was configured with."""
    gen, _, c = load_glo(glo_path)
    if project_latents is None:
        project_latents = c.config.get("project_mapper_outputs", True)
    meta = {"glo": str(glo_path), "mapper": str(mapper_path), "config_hash": c.meta.get("config_hash", "")}
    return TrainedModel(gen, load_mapper(mapper_path), meta, project_latents=project_latents)


def save_embedder(path, emb: TorchEmbedder, meta: dict) -> Path:
    return ckpt.save_checkpoint(path, ckpt.module_tensors("embedder", emb.net), {},
                                0, dict(meta, identifier=emb.identifier))


def load_embedder(path) -> TorchEmbedder:
    from .evaluation import ConvClassifier, _ConvFeatures

    c = ckpt.load_checkpoint(path)
    m = c.meta
    if m["kind"] == "random-conv":
        net = _ConvFeatures(m["in_channels"], m["widths"], m["dim"])
    elif m["kind"] == "classifier":
        net = ConvClassifier(m["in_channels"], m["num_classes"], m["dim"]).features
    elif m["kind"] == "pixels":
        return pixel_embedder()
    else:
        raise ckpt.CheckpointError(f"{path}: unknown embedder kind {m['kind']!r}")
    net.load_state_dict(c.state_dict("embedder"))
    return TorchEmbedder(net, m["identifier"], m["in_channels"])


# -- stages -----------------------------------------------------------------------------

def load_pipeline_dataset(cfg: PipelineConfig) -> DatasetHandle:
    d = cfg.dataset
    if d.reference != "train":
        raise ValueError(f"unsupported reference set {d.reference!r}; only 'train' is built in")
    return load_dataset(d.kind, d.path, d.size, cfg.seed, d.limit, d.subset_seed)


def _labels_for(cfg: PipelineConfig, data: DatasetHandle) -> np.ndarray:
    if not cfg.dataset.labels_path:
        raise ValueError("the classifier embedder needs dataset.labels_path")
    labels = load_idx_labels(cfg.dataset.labels_path)
    if "subset_of" in data.meta:
        order = np.random.default_rng(data.meta["subset_seed"]).permutation(data.meta["subset_of"])
        labels = labels[np.sort(order[: data.count])]
    return labels


def build_embedder(cfg: PipelineConfig, data: DatasetHandle):
    """Return (embedder, checkpoint meta) for ``cfg.evaluation.embedder``."""
    e = cfg.evaluation
    c = data.shape[0]
    if e.embedder == "random-conv":
        widths = [16, 32, 64]
        emb = random_conv_embedder(c, e.embedder_dim, widths, e.embedder_seed)
        return emb, {"kind": "random-conv", "in_channels": c, "widths": widths, "dim": e.embedder_dim}
    if e.embedder == "classifier":
        labels = _labels_for(cfg, data)
        emb, acc = train_classifier_embedder(data, labels, e.classifier_epochs, e.embedder_dim,
                                             seed=e.embedder_seed)
        log.info("classifier embedder train accuracy %.4f", acc)
        return emb, {"kind": "classifier", "in_channels": c, "num_classes": int(labels.max()) + 1,
                     "dim": e.embedder_dim, "train_accuracy": acc}
    if e.embedder == "pixels":
        return pixel_embedder(), {"kind": "pixels"}
    raise ValueError(f"unknown embedder {e.embedder!r}")


def new_run_dir(cfg: PipelineConfig) -> Path:
    """``<output_dir>/<timestamp>-<config hash>``, suffixed so existing runs are never reused."""
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    base = f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg.hash()}"
    path, k = root / base, 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            k += 1
            path = root / f"{base}-{k}"


def _write_history(path: Path, history, key: str | None = None):
    with open(path, "w") as f:
        f.write("epoch,mean_loss" + (f",{key}" if key else "") + "\n")
        for s in history:
            extra = f",{s.extra[key]!r}" if key else ""
            f.write(f"{s.epoch},{s.mean_loss!r}{extra}\n")


@dataclass
class PipelineResult:
    run_dir: Path
    reports: dict[str, EvalReport] = field(default_factory=dict)
    paths: dict[str, Path] = field(default_factory=dict)
    history: dict[str, list] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)


def train_glo_stage(cfg: PipelineConfig, data: DatasetHandle):
    gen = build_generator(cfg.generator_arch, cfg.latent_dim, data.shape, seed=cfg.seed)
    if cfg.latent_init == "pca":
        table = pca_latent_table(data, cfg.latent_dim)
    else:
        table = init_latent_table(data.count, cfg.latent_dim, cfg.seed)
    history = train_glo(gen, table, data, cfg.glo)
    return gen, table, history


def train_mapper_stage(cfg: PipelineConfig, table: LatentTable):
    mapper = build_mapper(cfg.noise_dim, table.dim, cfg.mapper_hidden, seed=cfg.seed + 1)
    history = train_mapper(mapper, table, cfg.imle)
    return mapper, history


def train_pixel_imle_stage(cfg: PipelineConfig, data: DatasetHandle):
    gen = build_generator(cfg.generator_arch, cfg.noise_dim, data.shape, seed=cfg.seed + 2)
    history = train_pixel_imle(gen, data, cfg.pixel_imle)
    return gen, history


def run_pipeline(cfg: PipelineConfig, run_dir=None, resume_from=None, evaluate: bool = True) -> PipelineResult:
    """Run every stage, writing checkpoints, grids and reports into ``run_dir``.

    ``resume_from`` is a previous run directory, whose existing stage
    checkpoints are loaded instead of trained, or a single checkpoint path,
    in which case only that stage is reused.
    """
    configure_determinism()
    run_dir = Path(run_dir) if run_dir is not None else new_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    result = PipelineResult(run_dir)
    paths = result.paths
    paths["config"] = cfg.save(run_dir / "config.json")
    chash = cfg.hash()
    resume = None if resume_from is None else Path(resume_from)
    only = None
    if resume is not None and resume.is_file():
        resume, only = resume.parent, resume.name

    def reusable(name):
        return resume is not None and (only is None or only == name) and (resume / name).exists()

    last = None
    stage = "data"
    try:
        data = load_pipeline_dataset(cfg)

        stage = "glo"
        if reusable(GLO_CKPT):
            gen, table, _ = load_glo(resume / GLO_CKPT)
            if table.dim != cfg.latent_dim or table.count != data.count:
                raise ConfigurationError(f"{resume / GLO_CKPT} holds {table.count} codes of dim {table.dim}; "
                                         f"config expects {data.count} of dim {cfg.latent_dim}")
            if (resume / GLO_CKPT).resolve() != (run_dir / GLO_CKPT).resolve():
                shutil.copyfile(resume / GLO_CKPT, run_dir / GLO_CKPT)
            result.skipped.append("glo")
        else:
            gen, table, hist = train_glo_stage(cfg, data)
            result.history["glo"] = hist
            _write_history(run_dir / "glo_history.csv", hist)
            save_glo(run_dir / GLO_CKPT, gen, table, cfg, cfg.glo.epochs,
                     {"config_hash": chash, "dataset": data.source, "count": data.count})
        paths["glo"] = last = run_dir / GLO_CKPT

        stage = "mapper"
        if reusable(MAPPER_CKPT) and "glo" in result.skipped:
            mapper = load_mapper(resume / MAPPER_CKPT)
            if (resume / MAPPER_CKPT).resolve() != (run_dir / MAPPER_CKPT).resolve():
                shutil.copyfile(resume / MAPPER_CKPT, run_dir / MAPPER_CKPT)
            result.skipped.append("mapper")
        else:
            mapper, hist = train_mapper_stage(cfg, table)
            result.history["mapper"] = hist
            _write_history(run_dir / "mapper_history.csv", hist, "matched_distance")
            save_mapper(run_dir / MAPPER_CKPT, mapper, cfg, cfg.imle.epochs)
        paths["mapper"] = last = run_dir / MAPPER_CKPT

        samplers = [TrainedModel(gen, mapper, {"config_hash": chash},
                                 project_latents=cfg.project_mapper_outputs),
                    GaussianFitSampler(gen, fit_gaussian_prior(table))]

        if cfg.pixel_imle.epochs > 0:
            stage = "pixel-imle"
            if reusable(PIXEL_IMLE_CKPT):
                pix = load_noise_generator(resume / PIXEL_IMLE_CKPT)
                if (resume / PIXEL_IMLE_CKPT).resolve() != (run_dir / PIXEL_IMLE_CKPT).resolve():
                    shutil.copyfile(resume / PIXEL_IMLE_CKPT, run_dir / PIXEL_IMLE_CKPT)
                result.skipped.append("pixel-imle")
            else:
                pix, hist = train_pixel_imle_stage(cfg, data)
                result.history["pixel-imle"] = hist
                _write_history(run_dir / "pixel_imle_history.csv", hist, "matched_distance")
                save_noise_generator(run_dir / PIXEL_IMLE_CKPT, pix, cfg, cfg.pixel_imle.epochs)
            paths["pixel-imle"] = last = run_dir / PIXEL_IMLE_CKPT
            samplers.append(NoiseGeneratorSampler(pix))

        stage = "sample"
        for s in samplers:
            paths[f"grid-{s.name}"] = save_image_grid(s.sample(cfg.grid_size, cfg.seed),
                                                      run_dir / f"samples_{s.name}.png")
        paths["noise"] = save_noise(run_dir / "samples_glann.noise",
                                    sample_noise(samplers[0], cfg.grid_size, cfg.seed), cfg.seed)

        if evaluate:
            stage = "evaluate"
            emb, emb_meta = build_embedder(cfg, data)
            paths["embedder"] = save_embedder(run_dir / EMBEDDER_CKPT, emb, emb_meta)
            e = cfg.evaluation
            n = min(e.n, data.count)
            for s in samplers:
                report = evaluate_model(s, data, emb, n, e.seed, e.num_bins, e.num_angles, chash)
                if s.name == "gaussian-fit" or (s.name == "glann" and cfg.project_mapper_outputs):
                    report.notes["latent_postprocess"] = "projected-to-unit-sphere"
                result.reports[s.name] = report
                paths[f"report-{s.name}"] = report.write(run_dir / f"report_{s.name}.txt")
                paths[f"prd-{s.name}"] = report.write_csv(run_dir / f"prd_{s.name}.csv")
            paths["prd-plot"] = plot_prd(list(result.reports.values()), run_dir / "prd.png")
    except Exception as exc:
        raise PipelineError(stage, None if last is None else str(last), exc) from exc
    return result
