"""YAML run configuration with fail-closed key checking.

Top-level sections (all optional)::

    data:        counts/adjacency/covariate file paths or a directory
    model:       model structure; ``mean`` holds the mean-model settings
    fit:         chain settings (defaults: 80000 iterations, 30000 burn-in, 3 chains)
    priors:      prior hyperparameters
    generator:   synthetic-data settings
    forecast:    horizon and optional scenario covariate files
    study:       replication-study settings
    diagnostics: residual ACF settings
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .engine import FitConfig
from .model import MeanModelSpec, ModelSpec, ValidationError
from .samplers import PriorSpec
from .simulation import GeneratorSpec


@dataclass
class DataConfig:
    dir: Optional[str] = None
    counts: Optional[str] = None
    adjacency: Optional[str] = None
    x: Optional[list] = None
    z: Optional[list] = None
    w: Optional[list] = None
    z01c: Optional[list] = None
    z11c: Optional[list] = None
    population: Optional[str] = None
    symmetrize: bool = False
    condition_on_first: bool = False
    initial_prob: float = 0.5


@dataclass
class ForecastConfig:
    horizon: int = 0
    x: Optional[list] = None
    z: Optional[list] = None
    w: Optional[list] = None
    z01c: Optional[list] = None
    z11c: Optional[list] = None
    threshold: float = 1.2
    probability: float = 0.75


@dataclass
class StudyConfig:
    n_reps: int = 100
    regimes: list = field(default_factory=lambda: ["50", "80"])
    min_ess: float = 1000.0
    max_rhat: float = 1.05
    # iterations and burn-in are multiplied per regime, e.g. {"80": 5}
    iteration_multiplier: dict = field(default_factory=dict)


@dataclass
class DiagnosticsConfig:
    max_lag: int = 12
    fitted_draws: int = 1000


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    fit: FitConfig = field(default_factory=FitConfig)
    priors: PriorSpec = field(default_factory=PriorSpec)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def fit_config(self, **overrides) -> FitConfig:
        return dataclasses.replace(self.fit, priors=self.priors, model_spec=self.model,
                                   **{k: v for k, v in overrides.items() if v is not None})


_TUPLE_FIELDS = {"covariates", "ar_covariates", "en_covariates", "overdispersion_covariates",
                 "transition_covariates", "reemergence_pair_covariates", "persistence_pair_covariates",
                 "neighbor_prevalence", "truth"}


def _build(cls, raw, where, skip=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kw = {}
    for k, v in raw.items():
        if k in _TUPLE_FIELDS and isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as e:
        raise ValidationError(f"{where}: {e}") from None


def parse_config(raw: Optional[dict]) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ValidationError("configuration must be a mapping")
    sections = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - sections)
    if unknown:
        raise ValidationError(f"unknown configuration section(s) {unknown}; allowed: {sorted(sections)}")
    m = dict(raw.get("model") or {})
    mean = _build(MeanModelSpec, m.pop("mean", None), "model.mean")
    model = _build(ModelSpec, m, "model", skip=("mean",))
    model = dataclasses.replace(model, mean=mean)
    priors = _build(PriorSpec, raw.get("priors"), "priors")
    fit = _build(FitConfig, raw.get("fit"), "fit", skip=("priors", "model_spec"))
    fit = dataclasses.replace(fit, priors=priors, model_spec=model)
    gen = _build(GeneratorSpec, raw.get("generator"), "generator", skip=("graph",))
    return RunConfig(
        data=_build(DataConfig, raw.get("data"), "data"),
        model=model,
        fit=fit,
        priors=priors,
        generator=gen,
        forecast=_build(ForecastConfig, raw.get("forecast"), "forecast"),
        study=_build(StudyConfig, raw.get("study"), "study"),
        diagnostics=_build(DiagnosticsConfig, raw.get("diagnostics"), "diagnostics"),
    )


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ValidationError(f"{path}: invalid YAML: {e}") from None
    except OSError as e:
        raise ValidationError(f"cannot read config {path}: {e}") from None
    return parse_config(raw)
