"""Recurrent forward models with sparsely gated latent-state updates."""
from .cells import CELL_KINDS, GATE_VARIANTS, CellConfig, ElmanCell, GateL0RDCell, GRUCell, LSTMCell, MlpSpec
from .estimator import SequencePredictor, check_actions, check_sequences
from .model import ForwardResult, GateTrace, ModelConfig, SeqModel
from .planner import ICemConfig, PlanResult, colored_noise, icem_plan, mpc_run, task_costs
from .rng import RngStream
from .training import TrainConfig, TrainingDiverged, scheduled_sampling_prob, sequence_loss, train

__version__ = "0.1.0"

__all__ = [
    "CELL_KINDS", "GATE_VARIANTS", "CellConfig", "ElmanCell", "GateL0RDCell", "GRUCell", "LSTMCell",
    "MlpSpec", "SequencePredictor", "check_actions", "check_sequences", "ForwardResult", "GateTrace",
    "ModelConfig", "SeqModel", "ICemConfig", "PlanResult", "colored_noise", "icem_plan", "mpc_run",
    "task_costs", "RngStream", "TrainConfig", "TrainingDiverged", "scheduled_sampling_prob",
    "sequence_loss", "train",
]
