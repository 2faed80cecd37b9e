"""Distillation-based federated orchestration.

The loop: every client pretrains on the shared public dataset, fine-tunes
on its private data, then for each communication round the participants
score a public subset, the server averages their logit matrices into a
consensus, and each participant digests the consensus (KL distillation)
before revisiting its private data (CE fine-tune). Non-participants stay
frozen. Three attack modes:

* ``vanilla``  -- no triggered data anywhere.
* ``cbd``      -- one compromised client trains on mislabeled triggered
                  private data; the public set carries correctly labeled
                  triggered instances.
* ``fed_ebd``  -- the public set itself carries mislabeled triggered
                  instances; every client and private set behaves normally.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from .attacks import MISLABEL_TO_TARGET, PoisonConfig, TriggerSpec, poison_dataset
from .data import Dataset
from .datagen import sample_public_subset
from .errors import InvalidInputError, InvalidStateError
from .metrics import ClientMetrics, MetricsReport, accuracy, aggregate_clients, asr_from_view, build_asr_view
from .nn import ArchSpec, Model, build_model, forward_features, sgd_step_features
from .seeding import derive_seed, rng_for

CROSS_SILO = "cross_silo"
CROSS_DEVICE = "cross_device"
SETTINGS = (CROSS_SILO, CROSS_DEVICE)

ATTACK_MODES = ("vanilla", "cbd", "fed_ebd")
DISTRIBUTIONS = ("iid", "dirichlet")

EXTRA_PAIR_CHOICES = (1, 2, 3)
EXTRA_WIDTH_CHOICES = (128, 192, 256)
# fixed architecture used when heterogeneity is off
HOMOGENEOUS_EXTRA = (2, 192)
# compromised-client private poisoning rate in cbd mode
CBD_PRIVATE_RATIO = 0.20


@dataclass(frozen=True)
class FLConfig:
    """Federation shape, schedule, and attack mode.

    ``n_clients`` and ``participation_fraction`` default per setting:
    cross-silo runs 5 clients all participating, cross-device runs 50
    clients with a 10% random subset per round.
    """

    setting: str = CROSS_SILO
    n_clients: int | None = None
    participation_fraction: float | None = None
    rounds: int = 50
    pretrain_steps: int = 50
    local_iterations: int = 3
    temperature: float = 1.0
    utilization_ratio: float = 1.0
    heterogeneous: bool = True
    attack_mode: str = "vanilla"
    distribution: str = "iid"
    dirichlet_alpha: float = 0.5
    pretrain_lr: float = 0.05
    local_lr: float = 0.02
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.setting not in SETTINGS:
            raise InvalidInputError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.n_clients is None:
            object.__setattr__(self, "n_clients", 5 if self.setting == CROSS_SILO else 50)
        if self.participation_fraction is None:
            object.__setattr__(
                self, "participation_fraction", 1.0 if self.setting == CROSS_SILO else 0.10
            )
        if self.n_clients < 1:
            raise InvalidInputError(f"n_clients must be >= 1, got {self.n_clients}")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise InvalidInputError(
                f"participation_fraction must be in (0, 1], got {self.participation_fraction}"
            )
        if self.rounds < 0:
            raise InvalidInputError(f"rounds must be >= 0, got {self.rounds}")
        if self.pretrain_steps < 0 or self.local_iterations < 0:
            raise InvalidInputError("pretrain_steps and local_iterations must be >= 0")
        if not self.temperature > 0:
            raise InvalidInputError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.utilization_ratio <= 1.0:
            raise InvalidInputError(
                f"utilization_ratio must be in (0, 1], got {self.utilization_ratio}"
            )
        if self.attack_mode not in ATTACK_MODES:
            raise InvalidInputError(f"attack_mode must be one of {ATTACK_MODES}, got {self.attack_mode!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise InvalidInputError(
                f"distribution must be one of {DISTRIBUTIONS}, got {self.distribution!r}"
            )
        if not self.dirichlet_alpha > 0:
            raise InvalidInputError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")
        if not (self.pretrain_lr > 0 and self.local_lr > 0):
            raise InvalidInputError("learning rates must be > 0")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ClientState:
    id: int
    arch: ArchSpec
    model: Model
    private_data: Dataset
    compromised: bool = False


@dataclass(frozen=True)
class RoundLog:
    round_index: int
    participants: tuple[int, ...]
    consensus_checksum: str
    distill_loss: dict[int, float]
    metrics: MetricsReport

    def to_dict(self) -> dict:
        return {
            "kind": "round",
            "round": self.round_index,
            "participants": list(self.participants),
            "consensus_checksum": self.consensus_checksum,
            "distill_loss": {str(k): v for k, v in sorted(self.distill_loss.items())},
            "metrics": self.metrics.to_dict(),
        }


@dataclass(frozen=True)
class EvalContext:
    """Shared per-run evaluation assets: test set plus its triggered view."""

    test: Dataset
    asr_view: Dataset
    target_class: int

    @classmethod
    def build(cls, test: Dataset, trigger: TriggerSpec, target_class: int) -> "EvalContext":
        return cls(test=test, asr_view=build_asr_view(test, trigger, target_class), target_class=target_class)


def snapshot_metrics(clients: list[ClientState], ctx: EvalContext, round_index: int) -> MetricsReport:
    """ACC/ASR for every client (participants or not) on the shared test set."""
    per_client = {
        c.id: ClientMetrics(
            acc=accuracy(c.model, ctx.test),
            asr=asr_from_view(c.model, ctx.asr_view, ctx.target_class),
        )
        for c in clients
    }
    return aggregate_clients(per_client, round_index=round_index)


# ---------------------------------------------------------------------------
# Client construction
# ---------------------------------------------------------------------------


def init_clients(
    cfg: FLConfig,
    base_arch: ArchSpec,
    private_sets: list[Dataset],
    seed: int,
    trigger: TriggerSpec | None = None,
    target_class: int = 0,
) -> list[ClientState]:
    """Build client states: per-client architecture draw, seeded model init.

    Heterogeneous mode samples (extra_pairs, extra_width) independently per
    client from {1,2,3} x {128,192,256}; homogeneous mode fixes one
    architecture for everyone. In ``cbd`` mode one seeded-random client is
    compromised: its private set is poisoned at 20% with mislabeling.
    """
    if len(private_sets) != cfg.n_clients:
        raise InvalidInputError(
            f"got {len(private_sets)} private sets for {cfg.n_clients} clients"
        )
    arch_rng = rng_for(seed, "arch")
    clients = []
    for cid in range(cfg.n_clients):
        if cfg.heterogeneous:
            pairs = int(arch_rng.choice(EXTRA_PAIR_CHOICES))
            width = int(arch_rng.choice(EXTRA_WIDTH_CHOICES))
        else:
            pairs, width = HOMOGENEOUS_EXTRA
        arch = replace(base_arch, extra_pairs=pairs, extra_width=width)
        model = build_model(arch, derive_seed(seed, f"model-init/client{cid}"))
        clients.append(ClientState(id=cid, arch=arch, model=model, private_data=private_sets[cid]))
    if cfg.attack_mode == "cbd":
        if trigger is None:
            raise InvalidInputError("cbd mode requires a trigger to poison the compromised client")
        victim = int(rng_for(seed, "cbd/choose").integers(cfg.n_clients))
        poisoned, _ = poison_dataset(
            clients[victim].private_data,
            PoisonConfig(target_class=target_class, ratio=CBD_PRIVATE_RATIO, label_mode=MISLABEL_TO_TARGET),
            trigger,
            derive_seed(seed, "cbd/poison"),
        )
        clients[victim].private_data = poisoned
        clients[victim].compromised = True
    return clients


# ---------------------------------------------------------------------------
# Training phases
# ---------------------------------------------------------------------------


def _sgd_epochs(
    model: Model,
    features: np.ndarray,
    target,
    loss_kind: str,
    learning_rate: float,
    batch_size: int,
    epochs: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> tuple[Model, list[float]]:
    """Shuffled mini-batch epochs; returns the model and per-epoch mean loss."""
    count = features.shape[0]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(count)
        batch_losses = []
        for start in range(0, count, batch_size):
            idx = order[start : start + batch_size]
            model, loss = sgd_step_features(
                model, features[idx], target[idx], loss_kind, learning_rate, temperature
            )
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
    return model, losses


def pretrain_on_public(
    clients: list[ClientState], public: Dataset, steps: int, cfg: FLConfig, seed: int
) -> list[ClientState]:
    """CE SGD on seeded public mini-batches; steps=0 leaves clients unchanged."""
    if steps < 0:
        raise InvalidInputError(f"steps must be >= 0, got {steps}")
    features, labels = public.features, public.labels
    batch = min(cfg.batch_size, len(public))
    for client in clients:
        rng = rng_for(seed, f"pretrain/client{client.id}")
        model = client.model
        for _ in range(steps):
            idx = rng.choice(len(public), size=batch, replace=False)
            model, _ = sgd_step_features(model, features[idx], labels[idx], "ce", cfg.pretrain_lr)
        client.model = model
    return clients


def local_finetune(client: ClientState, cfg: FLConfig, seed: int) -> ClientState:
    """local_iterations CE epochs over the client's private set."""
    if len(client.private_data) == 0:
        raise InvalidStateError(f"client {client.id} has no private data")
    ds = client.private_data
    client.model, _ = _sgd_epochs(
        client.model,
        ds.features,
        ds.labels,
        "ce",
        cfg.local_lr,
        cfg.batch_size,
        cfg.local_iterations,
        rng_for(seed, f"finetune/client{client.id}"),
    )
    return client


def distill_to_consensus(
    client: ClientState,
    subset_features: np.ndarray,
    consensus: np.ndarray,
    cfg: FLConfig,
    seed: int,
) -> tuple[ClientState, float]:
    """local_iterations KL epochs toward the (fixed) consensus logits."""
    client.model, losses = _sgd_epochs(
        client.model,
        subset_features,
        consensus,
        "kl",
        cfg.local_lr,
        cfg.batch_size,
        cfg.local_iterations,
        rng_for(seed, f"distill/client{client.id}"),
        temperature=cfg.temperature,
    )
    return client, float(np.mean(losses)) if losses else 0.0


# ---------------------------------------------------------------------------
# Round machinery
# ---------------------------------------------------------------------------


def aggregate_consensus(logit_matrices: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of same-shape logit matrices, summed in given order.

    Identical inputs (or a single input) return that matrix bit-exactly --
    the mean of equal values is the value, without float division noise.
    """
    if not logit_matrices:
        raise InvalidInputError("need at least one logit matrix")
    first = logit_matrices[0]
    for mat in logit_matrices[1:]:
        if mat.shape != first.shape:
            raise InvalidInputError(f"shape mismatch: {mat.shape} != {first.shape}")
    if all(np.array_equal(mat, first) for mat in logit_matrices[1:]):
        return first.copy()
    total = first.astype(np.float64, copy=True)
    for mat in logit_matrices[1:]:
        total += mat
    return total / len(logit_matrices)


def sample_participants(cfg: FLConfig, round_index: int, seed: int) -> tuple[int, ...]:
    """Cross-silo: everyone. Cross-device: ceil(fraction * n) seeded ids."""
    if cfg.setting == CROSS_SILO:
        return tuple(range(cfg.n_clients))
    count = math.ceil(cfg.participation_fraction * cfg.n_clients)
    rng = rng_for(seed, f"participants/round{round_index}")
    return tuple(sorted(int(i) for i in rng.choice(cfg.n_clients, size=count, replace=False)))


def communication_round(
    clients: list[ClientState],
    public: Dataset,
    cfg: FLConfig,
    round_index: int,
    seed: int,
    ctx: EvalContext,
) -> tuple[list[ClientState], RoundLog]:
    """One round: sample, score, aggregate, digest, revisit, snapshot.

    Participants are processed in ascending client id so the consensus sum
    order is fixed regardless of how the client list is arranged.
    """
    by_id = {c.id: c for c in clients}
    participants = sample_participants(cfg, round_index, derive_seed(seed, "participants"))
    subset = sample_public_subset(
        public, cfg.utilization_ratio, round_index, derive_seed(seed, "subset")
    )
    subset_features = subset.features
    matrices = [forward_features(by_id[cid].model, subset_features) for cid in participants]
    consensus = aggregate_consensus(matrices)
    distill_losses = {}
    for cid in participants:
        _, mean_loss = distill_to_consensus(
            by_id[cid], subset_features, consensus, cfg, derive_seed(seed, f"distill/{cid}")
        )
        distill_losses[cid] = mean_loss
    for cid in participants:
        local_finetune(by_id[cid], cfg, derive_seed(seed, f"finetune/{cid}"))
    log = RoundLog(
        round_index=round_index,
        participants=participants,
        consensus_checksum=hashlib.sha256(consensus.tobytes()).hexdigest()[:16],
        distill_loss=distill_losses,
        metrics=snapshot_metrics(clients, ctx, round_index),
    )
    return clients, log


def _check_mode_invariants(cfg: FLConfig, public: Dataset, clients: list[ClientState]) -> None:
    poisoned_clients = sum(1 for c in clients if c.private_data.n > 0)
    if cfg.attack_mode == "vanilla" and (public.n > 0 or poisoned_clients):
        raise InvalidInputError("vanilla mode forbids triggered instances anywhere")
    if cfg.attack_mode == "fed_ebd" and poisoned_clients:
        raise InvalidInputError("fed_ebd mode forbids triggered private data")
    if cfg.attack_mode == "cbd" and poisoned_clients != 1:
        raise InvalidInputError(f"cbd mode requires exactly one poisoned client, got {poisoned_clients}")


def run_federation(
    cfg: FLConfig,
    base_arch: ArchSpec,
    public: Dataset,
    private_sets: list[Dataset],
    test_set: Dataset,
    trigger: TriggerSpec,
    target_class: int,
    seed: int,
) -> tuple[list[RoundLog], list[ClientState]]:
    """Full protocol: init, pretrain, initial fine-tune, then `rounds` rounds.

    Deterministic for a given (cfg, datasets, seed); the trigger is used for
    per-round ASR snapshots in every mode and for the compromised client's
    private poisoning in ``cbd``.
    """
    clients = init_clients(
        cfg, base_arch, private_sets, derive_seed(seed, "init"), trigger, target_class
    )
    _check_mode_invariants(cfg, public, clients)
    pretrain_on_public(clients, public, cfg.pretrain_steps, cfg, derive_seed(seed, "pretrain"))
    for client in clients:
        local_finetune(client, cfg, derive_seed(seed, "finetune0"))
    ctx = EvalContext.build(test_set, trigger, target_class)
    logs = []
    for round_index in range(cfg.rounds):
        clients, log = communication_round(
            clients, public, cfg, round_index, derive_seed(seed, f"round{round_index}"), ctx
        )
        logs.append(log)
    return logs, clients
