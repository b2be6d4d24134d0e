"""Distribution-preserving dynamics inferred from static samples.

Learned velocity fields (``trainer``), training-free skew-symmetric drifts
(``skew``), score models (``diffusion``), ground-truth systems and metrics.
"""
from ._util import FormatError, NumericalError
from .diffusion import DenoiserModel, GaussianDenoiser, NoiseSchedule, train_denoiser
from .field import VelocityNetwork, divergence_exact, divergence_fd, divergence_hutchinson, integrate_rk4
from .metrics import cosine_similarity, fingerprint, lyapunov_max, mmd_rbf, preservation_curve
from .skew import LangevinConfig, SkewOperator, make_rotation_kernel, v_skew, validate_skew
from .trainer import FlowTrainConfig, train_flow

__version__ = "0.1.0"

__all__ = [
    "DenoiserModel",
    "FlowTrainConfig",
    "FormatError",
    "GaussianDenoiser",
    "LangevinConfig",
    "NoiseSchedule",
    "NumericalError",
    "SkewOperator",
    "VelocityNetwork",
    "cosine_similarity",
    "divergence_exact",
    "divergence_fd",
    "divergence_hutchinson",
    "fingerprint",
    "integrate_rk4",
    "lyapunov_max",
    "make_rotation_kernel",
    "mmd_rbf",
    "preservation_curve",
    "train_denoiser",
    "train_flow",
    "v_skew",
    "validate_skew",
]
