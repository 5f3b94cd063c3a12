"""Prior-anchored diffusion for volumetric multi-rater segmentation uncertainty."""
from .denoiser import (
    DenoiserInput,
    NullDenoiser,
    OracleDenoiser,
    PatchDenoiser,
    PatchRegressor,
    mlp_eps,
    oracle_eps,
    train_step,
)
from .forward import forward_expectation, forward_marginal, forward_step
from .metrics import MetricReport, ci_score, dice, evaluate, ged, hd95, sncc
from .sampler import AnchoredDiffusion, SamplerConfig, init_terminal, reconstruct_y0, reverse_step, sample
from .schedule import Schedule, lookup, make_schedule
from .synth import RaterModel, ShapeSpec, default_suite, make_prior, make_raters, make_shape_sdf
from .volume import BinaryMask, RaterSet, Volume, binarize, read_volume, to_signed, write_volume

__version__ = "0.1.0"
