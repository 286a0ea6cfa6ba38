"""Empirical upper bounds on rate-distortion functions with a variable-rate hierarchical VAE."""

__version__ = "0.1.0"

from .rd_math import (  # noqa: E402
    DEFAULT_SCHEDULE,
    GaussianParams,
    InvalidNetworkOutput,
    LambdaSchedule,
    embed_lambda,
    gaussian_kl,
    mse_to_psnr,
    nats_to_bpp,
    sample_lambda,
    smooth_mu,
)
from .oracles import (  # noqa: E402
    DiscreteSourceSpec,
    OraclePoint,
    ba_curve,
    bernoulli_hamming_rd,
    blahut_arimoto,
    gaussian_rd,
)
from .model import HVAE, ModelConfig, StageSpec, TrainingInstabilityError, build  # noqa: E402
from .data import SourceSpec  # noqa: E402
from .training import LossBreakdown, TrainConfig, train  # noqa: E402
from .evaluation import RDCurve, RDPoint, bd_rate, estimate_rd_point, load_curve, save_curve, sweep  # noqa: E402
