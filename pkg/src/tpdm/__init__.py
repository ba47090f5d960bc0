"""Two perpendicular 2D diffusion priors for 3D volumes.

Score models trained on two orthogonal slice families are combined by
alternating per-axis reverse-diffusion sweeps; measurement guidance on the
primary family turns the sampler into a 3D inverse-problem solver.
"""

from .guidance import GuidanceConfig, GuidanceMode, dps_grad, dps_update
from .sampler import SamplerConfig, StepPlan, generate, make_step_plan, solve_inverse
from .score import AnalyticGaussianScore, NeuralScore
from .sde import NoiseSchedule
from .volume import SliceAxis, Volume3D

__all__ = [
    "AnalyticGaussianScore",
    "GuidanceConfig",
    "GuidanceMode",
    "NeuralScore",
    "NoiseSchedule",
    "SamplerConfig",
    "SliceAxis",
    "StepPlan",
    "Volume3D",
    "dps_grad",
    "dps_update",
    "generate",
    "make_step_plan",
    "solve_inverse",
]
