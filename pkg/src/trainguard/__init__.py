"""Probe-based accept/rollback supervision of optimizer updates."""
from .controller import ControllerConfig, Decision, Snapshot, StabilityController
from .optimizers import OptimizerConfig, OptimizerState, init_state, propose_update

__version__ = "0.1.0"

__all__ = [
    "ControllerConfig",
    "Decision",
    "OptimizerConfig",
    "OptimizerState",
    "Snapshot",
    "StabilityController",
    "init_state",
    "propose_update",
]
