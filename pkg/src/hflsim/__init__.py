"""Deterministic simulator of public-dataset backdoor attacks on
heterogeneous, distillation-based federated learning."""

__version__ = "0.1.0"

from .attacks import (
    KEEP_TRUE_LABEL,
    MISLABEL_TO_TARGET,
    PatchTrigger,
    PoisonConfig,
    TokenAppendTrigger,
    TokenSeqAppendTrigger,
    TriggerSpec,
    embed_trigger,
    poison_dataset,
)
from .config import ExperimentConfig, SweepSpec, load_config, save_config
from .data import Dataset, Instance, load_dataset, save_dataset
from .datagen import (
    DemonstrationSet,
    GeneratorConfig,
    TaskInstruction,
    compose_demonstration_set,
    draw_private_datasets,
    generate_public_dataset,
    sample_public_subset,
)
from .federation import FLConfig, RoundLog, run_federation
from .metrics import MetricsReport, accuracy, aggregate_clients, attack_success_rate
from .nn import ArchSpec, Model, TrainConfig, build_model, cross_entropy, forward, kl_distill_loss, softmax
from .experiment import RunReport, run_experiment, run_sweep
from .seeding import derive_seed
