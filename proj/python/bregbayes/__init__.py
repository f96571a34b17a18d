"""MAP and conditional mean estimators with Bregman costs."""

from ._core import (
    ConfigError,
    DomainError,
    Fidelity,
    ForwardOperator,
    InputError,
    MapResult,
    NoiseModel,
    NumericalError,
    Posterior,
    Prior,
    PriorKind,
    UnsupportedError,
    __version__,
    quadrature_mean,
    run,
    sample_mean,
    solve_map,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "Fidelity",
    "ForwardOperator",
    "InputError",
    "MapResult",
    "NoiseModel",
    "NumericalError",
    "Posterior",
    "Prior",
    "PriorKind",
    "UnsupportedError",
    "__version__",
    "quadrature_mean",
    "run",
    "sample_mean",
    "solve_map",
]
