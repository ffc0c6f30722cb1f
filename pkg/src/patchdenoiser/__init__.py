"""Multi-scale patch-based CT image denoising.

The package is a self-contained numpy implementation: a minimal
reverse-mode autodiff engine (:mod:`patchdenoiser.autodiff`), CT intensity
preprocessing and synthetic phantoms (:mod:`patchdenoiser.preprocess`),
the patch geometry (:mod:`patchdenoiser.patches`), the three-stage network
(:mod:`patchdenoiser.model`), a training engine
(:mod:`patchdenoiser.training`), quality metrics
(:mod:`patchdenoiser.metrics`), classical filter baselines
(:mod:`patchdenoiser.baselines`), and bit-exact dataset storage
(:mod:`patchdenoiser.dataio`). ``patchdenoiser.cli`` ties everything into
a command line.
"""

from .autodiff import Tensor, no_grad
from .errors import (ConfigError, DenoiserError, DimensionError,
                     DivergedError, EmptyDatasetError, FormatError,
                     IntegrityError, UsageError)
from .metrics import MetricReport, energy_per_inference, psnr, rmse, ssim
from .model import (ModelConfig, ModelWeights, ScaleConfig, build_model,
                    count_flops, count_params, default_config, denoise_image,
                    toy_config)
from .optim import AdamState, CosineSchedule, adam_step, lr_at
from .patches import PatchPlan, PatchSet, extract_patches, plan_scales, reassemble
from .preprocess import (ABDOMEN_WINDOW, WIDE_WINDOW, HuWindow, Image2D,
                         SliceRecord, add_gaussian_noise, add_poisson_noise,
                         denormalize, generate_phantom, to_hounsfield,
                         window_normalize)
from .training import (FoldSplit, TrainConfig, TrainResult, load_checkpoint,
                       save_checkpoint, split_folds, train)

__version__ = "0.1.0"

__all__ = [
    "ABDOMEN_WINDOW", "WIDE_WINDOW", "AdamState", "ConfigError",
    "CosineSchedule", "DenoiserError", "DimensionError", "DivergedError",
    "EmptyDatasetError", "FoldSplit", "FormatError", "HuWindow", "Image2D",
    "IntegrityError", "MetricReport", "ModelConfig", "ModelWeights",
    "PatchPlan", "PatchSet", "ScaleConfig", "SliceRecord", "Tensor",
    "TrainConfig", "TrainResult", "UsageError", "adam_step",
    "add_gaussian_noise", "add_poisson_noise", "build_model", "count_flops",
    "count_params", "default_config", "denoise_image", "denormalize",
    "energy_per_inference", "extract_patches", "generate_phantom",
    "load_checkpoint", "lr_at", "no_grad", "plan_scales", "psnr",
    "reassemble", "rmse", "save_checkpoint", "split_folds", "ssim",
    "to_hounsfield", "toy_config", "train", "window_normalize",
]
