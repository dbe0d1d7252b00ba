"""Feedback-driven diffusion denoising for diffraction patterns."""

__version__ = "0.1.0"

from .errors import (
    ConsistencyError,
    DiffractError,
    FormatError,
    InferenceError,
    InvalidConfigError,
    InvalidInputError,
    TrainingError,
)
from .inference import (
    InferenceConfig,
    classify_noise,
    denoise_fixed_schedule,
    denoise_one_step,
    denoise_with_feedback,
    estimate_start,
)
from .model import DenoiserModel, QualityHead, load_checkpoint, save_checkpoint
from .schedule import ScheduleConfig, forward_corrupt
from .synth import DatasetConfig, build_dataset, read_dataset
from .training import TrainConfig, train_denoiser, train_quality_head
