"""Zero-state coupled Markov switching negative binomial models for areal counts."""
from .model import (InitialStateDist, MeanModelSpec, Model, ModelSpec, NeighborGraph, NumericalError, PanelData,
                    ParamVector, StateField, ValidationError, log_nb_pmf)
from .engine import FitConfig, PosteriorStore, run_chain, run_chains
from .samplers import PriorSpec
from .simulation import GeneratorSpec, generate_dataset, run_replications
from .diagnostics import ess, gelman_rubin, multichain_ess, waic
from .prediction import ForecastScenario, arrow_table, coupled_one_step_fitted, simulate_forecast

__version__ = "0.1.0"

__all__ = [
    "InitialStateDist", "MeanModelSpec", "Model", "ModelSpec", "NeighborGraph", "NumericalError", "PanelData",
    "ParamVector", "StateField", "ValidationError", "log_nb_pmf", "FitConfig", "PosteriorStore", "run_chain",
    "run_chains", "PriorSpec", "GeneratorSpec", "generate_dataset", "run_replications", "ess", "gelman_rubin",
    "multichain_ess", "waic", "ForecastScenario", "arrow_table", "coupled_one_step_fitted", "simulate_forecast",
]
