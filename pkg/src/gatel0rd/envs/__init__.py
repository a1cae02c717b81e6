from .billiard import Billiard, BilliardState, billiard_step
from .dataset import (
    ENV_KINDS,
    DatasetFormatError,
    Episode,
    QuotaError,
    generate_dataset,
    make_env,
    read_jsonl,
    to_arrays,
    write_jsonl,
)
from .policies import collect_policy_actions
from .rrc import RobotRemoteControl, RrcState, rrc_step
from .shepherd import SENTINEL, Shepherd, ShepherdState, shepherd_step


def observe(state, kind: str):
    """Observation vector(s) of ``state`` for environment ``kind``."""
    return make_env(kind).observe(state)
