"""Masked categorical diffusion over vector-quantized token grids."""

from .auxiliary import club_mi, contrastive_ranking_loss, info_nce, recall_at_k
from .codec import (
    CodecModel,
    FitConfig,
    dequantize,
    fit_codebooks,
    load_codec,
    load_features,
    quantize,
    reconstruction_report,
    save_codec,
    save_features,
)
from .diffusion import (
    NULL_COND,
    BayesOracleDenoiser,
    Denoiser,
    TabularDenoiser,
    TrainConfig,
    bayes_oracle_denoiser,
    cfg_combine,
    corrupt,
    empirical_bayes_denoiser,
    load_denoiser,
    reverse_step,
    sample,
    save_denoiser,
    train_denoiser,
    vlb_loss,
)
from .errors import (
    ContractError,
    FittingError,
    InconsistencyError,
    ScheduleError,
    SizeGuardError,
    VqdiffError,
)
from .metrics import (
    PitchTrack,
    load_pitch_track,
    mcd,
    pitch_errors,
    save_pitch_track,
    ssim,
)
from .schedules import (
    PositionalScheduleTable,
    ScheduleTable,
    from_cumulative,
    from_stepwise,
    improved_schedule,
    linear_schedule,
    load_schedule,
    save_schedule,
    stepwise_from_cumulative,
)
from .tokens import TokenGrid, load_token_file, save_token_file

__version__ = "0.1.0"

__all__ = [
    "BayesOracleDenoiser",
    "CodecModel",
    "ContractError",
    "Denoiser",
    "FitConfig",
    "FittingError",
    "InconsistencyError",
    "NULL_COND",
    "PitchTrack",
    "PositionalScheduleTable",
    "ScheduleError",
    "ScheduleTable",
    "SizeGuardError",
    "TabularDenoiser",
    "TokenGrid",
    "TrainConfig",
    "VqdiffError",
    "bayes_oracle_denoiser",
    "cfg_combine",
    "club_mi",
    "contrastive_ranking_loss",
    "corrupt",
    "dequantize",
    "empirical_bayes_denoiser",
    "fit_codebooks",
    "from_cumulative",
    "from_stepwise",
    "improved_schedule",
    "info_nce",
    "linear_schedule",
    "load_codec",
    "load_denoiser",
    "load_features",
    "load_pitch_track",
    "load_schedule",
    "load_token_file",
    "mcd",
    "pitch_errors",
    "quantize",
    "recall_at_k",
    "reconstruction_report",
    "reverse_step",
    "sample",
    "save_codec",
    "save_denoiser",
    "save_features",
    "save_pitch_track",
    "save_schedule",
    "save_token_file",
    "ssim",
    "stepwise_from_cumulative",
    "train_denoiser",
    "vlb_loss",
]
