"""Desk-scale simulator of style-aware personalized federated prototype learning."""

from .errors import (
    ConfigError,
    DomainError,
    EmptyRoundError,
    FormatError,
    NumericError,
    ProtocolError,
    ShapeError,
    StyleFLError,
)
from .federation import (
    METHODS,
    FederationConfig,
    RoundFailure,
    RoundRecord,
    RunResult,
    ScenarioConfig,
    convergence_round,
    run,
    uniform_average,
)

__version__ = "0.1.0"

__all__ = [
    "METHODS",
    "ConfigError",
    "DomainError",
    "EmptyRoundError",
    "FederationConfig",
    "FormatError",
    "NumericError",
    "ProtocolError",
    "RoundFailure",
    "RoundRecord",
    "RunResult",
    "ScenarioConfig",
    "ShapeError",
    "StyleFLError",
    "convergence_round",
    "run",
    "uniform_average",
]
