"""Agent-based retail and wholesale market simulation with calibration and evaluation tools."""
from .backends import (
    BackendDescriptor, HTTPChatBackend, MockAgentParams, MockLinearAgent, ModelPool,
    PlantedPopulationMock, RetailDecision, WholesaleDecision, parse_retail, parse_wholesale,
)
from .calibration import (
    QuantileCalibrator, fit_calibration, generalization_gain_lower_bound, kl_divergence, reweight,
)
from .data import generate_synthetic_market, load_market, write_market
from .dialogue import run_dialogue, simulate_wholesale
from .meanfield import run_meanfield
from .metrics import evaluate_run, hit_rate, quantity_error, stability
from .prompts import build_alignment_dataset, build_retail_prompt, iter_instances
from .retail import run_retail_episode
from .symbolic import SymbolicRegressor, discover_rule

__version__ = "0.1.0"
