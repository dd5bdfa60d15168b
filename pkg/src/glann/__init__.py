"""GLANN: a GLO latent embedding followed by an IMLE noise-to-latent mapper.

Stage 1 (``glann.glo``) learns a generator and one unit-norm latent code per
training image. Stage 2 (``glann.imle``) trains a small network that maps
standard-normal noise onto those codes, so new images are G(T(e)).
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import PipelineConfig, apply_overrides
from .datasets import DatasetHandle, ImageBatch, load_dataset, load_idx, load_image_dir
from .errors import (CheckpointError, ChecksumError, ConfigurationError, FormatError, GlannError,
                     LengthMismatchError, MissingTensorError, NumericError, PipelineError, StalePoolError,
                     VersionError)
from .evaluation import EvalReport, evaluate_model, fid, gaussian_stats, prd_curve, prd_histograms
from .glo import GloTrainConfig, LatentTable, build_generator, init_latent_table, project_to_sphere, train_glo
from .imle import ImleTrainConfig, MapperNetwork, build_mapper, nearest_mapped_noise, train_mapper
from .losses import LossSpec, build_loss
from .pipeline import run_pipeline
from .synthesis import TrainedModel, fit_gaussian_prior, interpolate, invert_image, sample_images

__version__ = "0.1.0"
