"""Particle MFG - particle-based flow matching for first-order mean-field games."""

__version__ = "0.1.0"

from .config import PRESETS, SolverConfig, get_preset, parse_config
from .ensemble import ParticleEnsemble, TimeGrid
from .errors import ConfigurationError, ParticleMFGError
from .report import RunAborted, RunReport
from .solver import fictitious_play_run, quadratic_oc_oracle, run

__all__ = [
    "SolverConfig",
    "PRESETS",
    "get_preset",
    "parse_config",
    "ParticleEnsemble",
    "TimeGrid",
    "ParticleMFGError",
    "ConfigurationError",
    "RunReport",
    "RunAborted",
    "run",
    "fictitious_play_run",
    "quadratic_oc_oracle",
    "__version__",
]
