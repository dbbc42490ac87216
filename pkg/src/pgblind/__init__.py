"""Blind Poisson-Gaussian noise modeling and self-supervised denoising.

The package covers the full loop: sensed-noise synthesis, the
variance-stabilizing transform, blind noise-level estimation through a
patch-eigenvalue statistic, the masked/visible training objective with an
adaptive mixture, a toy-scale trainer, and a benchmark harness with a CLI.
"""

from .tensor_core import (
    ImageFormatError,
    ImageTensor,
    SeededRng,
    load_image,
    load_raw_tensor,
    sample_gaussian,
    sample_poisson,
    save_image,
    save_raw_tensor,
)
from .noise_model import (
    PG_LEVELS,
    NoiseParams,
    corrupt_exact,
    corrupt_gaussian_approx,
    gat,
    gat_inverse_algebraic,
    pg_level,
)
from .variance_estimator import (
    PatchConfig,
    estimate_sigma2,
    extract_patches,
    patch_covariance,
    sym_eigenvalues,
)
from .cramer_loss import (
    FitResult,
    GRAIN_SETTINGS,
    consistency_from_estimates,
    cramer_loss_multi,
    cramer_loss_single,
    crop_corner_blocks,
    fit_noise_params_descent,
    fit_noise_params_grid,
    gaussian_loss,
)
from .masking import (
    FILL_MODES,
    MaskedVolume,
    blindspot_index_map,
    build_masked_volume,
    map_blindspots,
)
from .revisible import (
    BranchBelief,
    MixtureBelief,
    ReVisibleConfig,
    b2u_loss,
    branch_marginal,
    combine_mixture,
    mixture_weights,
    nll,
    nll_grad_mu_m,
    optimal_clean,
    revisible_loss,
)
from .networks import DenoiserNet, EstimatorNet, infer
from .trainer import (
    NonFiniteLossError,
    TrainConfig,
    TrainResult,
    TrainState,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train_config_from_file,
    train_step,
)
from .metrics import psnr, ssim
from .reporting import BenchReport, format_cell
from .bench import (
    ABLATION_AXES,
    bench_estimation,
    run_ablation,
    toy_clean_images,
    write_toy_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATION_AXES",
    "BenchReport",
    "BranchBelief",
    "DenoiserNet",
    "EstimatorNet",
    "FILL_MODES",
    "FitResult",
    "GRAIN_SETTINGS",
    "ImageFormatError",
    "ImageTensor",
    "MaskedVolume",
    "MixtureBelief",
    "NoiseParams",
    "NonFiniteLossError",
    "PG_LEVELS",
    "PatchConfig",
    "ReVisibleConfig",
    "SeededRng",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "b2u_loss",
    "bench_estimation",
    "blindspot_index_map",
    "branch_marginal",
    "build_masked_volume",
    "combine_mixture",
    "consistency_from_estimates",
    "corrupt_exact",
    "corrupt_gaussian_approx",
    "cramer_loss_multi",
    "cramer_loss_single",
    "crop_corner_blocks",
    "estimate_sigma2",
    "extract_patches",
    "fit_noise_params_descent",
    "fit_noise_params_grid",
    "format_cell",
    "gat",
    "gat_inverse_algebraic",
    "gaussian_loss",
    "infer",
    "load_checkpoint",
    "load_image",
    "load_raw_tensor",
    "map_blindspots",
    "mixture_weights",
    "nll",
    "nll_grad_mu_m",
    "optimal_clean",
    "patch_covariance",
    "pg_level",
    "psnr",
    "revisible_loss",
    "run_ablation",
    "run_training",
    "sample_gaussian",
    "sample_poisson",
    "save_checkpoint",
    "save_image",
    "save_raw_tensor",
    "ssim",
    "sym_eigenvalues",
    "toy_clean_images",
    "train_config_from_file",
    "train_step",
    "write_toy_dataset",
]
