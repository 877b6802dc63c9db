"""splitsim: a desk-scale simulator for collaborative neural-network training.

Three protocols over one from-scratch numpy substrate: classic federated
averaging, split training with per-iteration activation/gradient exchange,
and unidirectional inter-block training (local auxiliary heads, a one-shot
activation transfer, and a consolidated server phase). Every byte that
crosses the simulated device-server link lands in an append-only ledger that
can be checked exactly against the closed-form cost formulas.
"""

from .comm import (
    CommEntry,
    CommLedger,
    CostModel,
    closed_form_comm,
    comm_difference_vs_fl,
    fl_crossover_epochs,
    simulated_time,
)
from .data import (
    Dataset,
    Partition,
    dirichlet_partition,
    dump_dataset,
    load_dataset,
    make_synthetic,
    partition_tv,
    split_validation,
)
from .errors import ConfigError, DataError, ProtocolError, SplitSimError, UsageError
from .harness import ExperimentPlan, RunSpec, execute_run, load_config, run_plan
from .models import (
    Block,
    ModelSpec,
    activation_bytes,
    build_model,
    generate_auxiliary,
    param_bytes,
    split_model,
    toy_cnn,
    toy_mlp,
)
from .protocols import (
    ActivationSet,
    EarlyStopper,
    RunReport,
    TrainingConfig,
    build_activation_set,
    device_sampling,
    fedavg,
    run_fl,
    run_sfl,
    run_uit,
    run_uit_no_consolidation,
)

__version__ = "0.1.0"
