"""Energy-aware dynamic device scheduling for over-the-air federated edge
learning: analog gradient aggregation over fading channels with per-device
energy budgets enforced through Lyapunov virtual queues."""

from .core import (
    ConfigError,
    DeviceConfig,
    Hyperparams,
    InvalidValue,
    MissingKey,
    RoundTrace,
    derive_stream,
    validate_config,
)
from .channel import ChannelRealization, observe_channel, sample_channel, sample_noise
from .learner import (
    Dataset,
    LocalUpdateResult,
    MlpSoftmax,
    Partition,
    QuadraticModel,
    global_full_gradient,
    local_gradient,
    local_update_multi,
    partition_dataset,
)
from .otaa import AggregationOutcome, aggregate, power_scalar, transmit_energy
from .scheduler import (
    EnergyLedger,
    PenaltyCoeffs,
    RoundDecision,
    SimState,
    brute_force_schedule,
    est_c,
    est_p,
    estimate_energy,
    myopic_schedule,
    queue_update,
    reschedule_filter,
    run_round,
    schedule_round,
)
from .harness import (
    ExperimentSpec,
    emit_metrics,
    load_mnist_idx,
    run_experiment,
    run_single_seed,
    spec_from_config,
    synth_quadratic,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationOutcome",
    "ChannelRealization",
    "ConfigError",
    "Dataset",
    "DeviceConfig",
    "EnergyLedger",
    "ExperimentSpec",
    "Hyperparams",
    "InvalidValue",
    "LocalUpdateResult",
    "MissingKey",
    "MlpSoftmax",
    "Partition",
    "PenaltyCoeffs",
    "QuadraticModel",
    "RoundDecision",
    "RoundTrace",
    "SimState",
    "aggregate",
    "brute_force_schedule",
    "derive_stream",
    "emit_metrics",
    "est_c",
    "est_p",
    "estimate_energy",
    "global_full_gradient",
    "load_mnist_idx",
    "local_gradient",
    "local_update_multi",
    "myopic_schedule",
    "observe_channel",
    "partition_dataset",
    "power_scalar",
    "queue_update",
    "reschedule_filter",
    "run_experiment",
    "run_round",
    "run_single_seed",
    "sample_channel",
    "sample_noise",
    "schedule_round",
    "spec_from_config",
    "synth_quadratic",
    "transmit_energy",
    "validate_config",
    "__version__",
]
