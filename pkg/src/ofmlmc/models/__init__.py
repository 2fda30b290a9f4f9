"""Stochastic models and the name registry used by campaign configs."""
from __future__ import annotations

from ..exceptions import ConfigError
from .base import Model, ModelSample, coupled_pair, pair_valid
from .cloud import CloudConfiguration, CloudParams, cloud_metrics, generate_cloud
from .faults import FaultyModel, InjectedFailure
from .surrogate import BubbleCloudSurrogate, SurrogateParams
from .synthetic import SyntheticModel

MODELS = {
    "synthetic": SyntheticModel,
    "surrogate": BubbleCloudSurrogate,
}


def build_model(name: str, params: dict | None = None, failure_rate: float = 0.0):
    """Instantiate a registered model, optionally wrapped with failure injection."""
    if name not in MODELS:
        raise ConfigError("model.name", f"unknown model {name!r}; known: {sorted(MODELS)}")
    try:
        model = MODELS[name](**(params or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from exc
    if not 0.0 <= failure_rate < 1.0:
        raise ConfigError("model.failure_rate", "must lie in [0, 1)")
    if failure_rate > 0:
        model = FaultyModel(model, failure_rate=failure_rate)
    return model


__all__ = [
    "BubbleCloudSurrogate",
    "CloudConfiguration",
    "CloudParams",
    "FaultyModel",
    "InjectedFailure",
    "MODELS",
    "Model",
    "ModelSample",
    "SurrogateParams",
    "SyntheticModel",
    "build_model",
    "cloud_metrics",
    "coupled_pair",
    "generate_cloud",
    "pair_valid",
]
