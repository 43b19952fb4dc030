"""Desk-scale federated learning simulator with credibility-weighted aggregation."""

from .data import (
    Dataset,
    NoiseSpec,
    PartitionPlan,
    inject_noise,
    load_binary,
    load_csv,
    partition,
    save_binary,
    save_csv,
    synth_blobs,
)
from .errors import (
    ConfigurationError,
    DegenerateCredibilityError,
    FocusFlError,
    InvalidInputError,
    RoundError,
    TrainingDivergenceError,
)
from .federation import (
    ClientState,
    CredReport,
    MessageRecord,
    ServerState,
    aggregate,
    aggregation_weights,
    credibilities,
    fedavg_round,
    focus_round,
    init_server,
    load_model,
    model_test,
    mutual_cross_entropy,
    save_model,
)
from .harness import (
    ComparisonReport,
    ExperimentConfig,
    RoundMetrics,
    RunResult,
    build_scenario,
    compare,
    run,
    seed_sweep,
)
from .learner import (
    ArchSpec,
    ModelParams,
    SgdConfig,
    accuracy,
    client_update,
    init_params,
    loss_and_grad,
    predict_proba,
)

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "ClientState",
    "ComparisonReport",
    "ConfigurationError",
    "CredReport",
    "Dataset",
    "DegenerateCredibilityError",
    "ExperimentConfig",
    "FocusFlError",
    "InvalidInputError",
    "MessageRecord",
    "ModelParams",
    "NoiseSpec",
    "PartitionPlan",
    "RoundError",
    "RoundMetrics",
    "RunResult",
    "ServerState",
    "SgdConfig",
    "TrainingDivergenceError",
    "accuracy",
    "aggregate",
    "aggregation_weights",
    "build_scenario",
    "client_update",
    "compare",
    "credibilities",
    "fedavg_round",
    "focus_round",
    "init_params",
    "init_server",
    "inject_noise",
    "load_binary",
    "load_csv",
    "load_model",
    "loss_and_grad",
    "model_test",
    "mutual_cross_entropy",
    "partition",
    "predict_proba",
    "run",
    "save_binary",
    "save_csv",
    "save_model",
    "seed_sweep",
    "synth_blobs",
]
