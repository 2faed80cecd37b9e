"""Synthetic data generation.

A seeded class-conditional generator stands in for a large generative
model: grid samples are per-class prototype grids plus uniform noise, token
samples are drawn from per-class unigram distributions. The generator is
steered by a demonstration set -- an instruction record plus clean and
backdoored example pairs -- whose instruction carries the trigger, target
class, and poisoning ratio applied to the emitted public dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .attacks import (
    MISLABEL_TO_TARGET,
    PoisonConfig,
    TriggerSpec,
    embed_trigger,
    poison_dataset,
    trigger_from_dict,
    trigger_modality,
    trigger_to_dict,
)
from .data import Dataset, GRID, Instance, TOKEN
from .errors import InvalidInputError
from .seeding import derive_seed, rng_for

# Clean features must stay away from the trigger patterns (saturated patch,
# reserved trailing ids), or benign local training supervises the trigger
# away. Grid prototypes carry class signal mid-range in the interior and are
# dark, class-uninformative vignettes in the four corner zones -- the
# low-information corners that patch triggers exploit in natural images.
PROTOTYPE_RANGE = (0.2, 0.5)
CORNER_VIGNETTE_VALUE = 0.05
CORNER_VIGNETTE_SIZE = 3
RESERVED_TRIGGER_TOKENS = 4


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the class-conditional generator.

    ``noise_scale`` is the uniform noise half-width for grids and the
    Dirichlet concentration of per-class unigram distributions for tokens.
    ``samples_per_class`` fixes the public dataset at C * samples_per_class.
    """

    modality: str = GRID
    num_classes: int = 4
    samples_per_class: int = 500
    prototype_seed: int | None = 0
    noise_scale: float = 0.12
    grid_side: int = 8
    vocab_size: int = 64
    max_seq_len: int = 16

    def __post_init__(self) -> None:
        if self.modality not in (GRID, TOKEN):
            raise InvalidInputError(f"modality must be grid or token, got {self.modality!r}")
        if self.num_classes < 2:
            raise InvalidInputError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise InvalidInputError("samples_per_class must be positive")
        if not self.noise_scale > 0:
            raise InvalidInputError(f"noise_scale must be > 0, got {self.noise_scale}")
        if self.modality == GRID and self.grid_side < 1:
            raise InvalidInputError("grid_side must be positive")
        if self.modality == TOKEN and (self.vocab_size < 2 or self.max_seq_len < 1):
            raise InvalidInputError("vocab_size must be >= 2 and max_seq_len >= 1")


@dataclass(frozen=True)
class TaskInstruction:
    """What the generator is told to do: trigger, target, and poison ratio."""

    trigger: TriggerSpec
    target_class: int
    embedding_descriptor: str
    poison_ratio: float

    def __post_init__(self) -> None:
        if self.target_class < 0:
            raise InvalidInputError("target_class must be >= 0")
        if not 0.0 <= self.poison_ratio <= 1.0:
            raise InvalidInputError(f"poison_ratio must be in [0, 1], got {self.poison_ratio}")

    def to_dict(self) -> dict:
        return {
            "trigger": trigger_to_dict(self.trigger),
            "target_class": self.target_class,
            "embedding_descriptor": self.embedding_descriptor,
            "poison_ratio": self.poison_ratio,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TaskInstruction":
        return cls(
            trigger=trigger_from_dict(payload["trigger"]),
            target_class=payload["target_class"],
            embedding_descriptor=payload["embedding_descriptor"],
            poison_ratio=payload["poison_ratio"],
        )


@dataclass(frozen=True)
class DemonstrationSet:
    """Instruction plus clean and backdoored (instance, label) example pairs."""

    instruction: TaskInstruction
    clean_demos: tuple[tuple[Instance, int], ...]
    backdoored_demos: tuple[tuple[Instance, int], ...]

    def __post_init__(self) -> None:
        for inst, label in self.backdoored_demos:
            if label != self.instruction.target_class or not inst.triggered:
                raise InvalidInputError("backdoored demos must be triggered and target-labeled")

    def to_dict(self) -> dict:
        def pair(inst: Instance, label: int) -> dict:
            return {
                "modality": inst.modality,
                "features": inst.features.tolist(),
                "label": int(inst.label),
                "true_label": int(inst.true_label),
                "triggered": bool(inst.triggered),
                "origin": inst.origin,
                "demo_label": int(label),
            }

        return {
            "instruction": self.instruction.to_dict(),
            "clean_demos": [pair(i, l) for i, l in self.clean_demos],
            "backdoored_demos": [pair(i, l) for i, l in self.backdoored_demos],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DemonstrationSet":
        def unpair(rec: dict) -> tuple[Instance, int]:
            inst = Instance(
                modality=rec["modality"],
                features=np.asarray(rec["features"]),
                label=rec["label"],
                true_label=rec["true_label"],
                triggered=rec["triggered"],
                origin=rec["origin"],
            )
            return inst, rec["demo_label"]

        return cls(
            instruction=TaskInstruction.from_dict(payload["instruction"]),
            clean_demos=tuple(unpair(r) for r in payload["clean_demos"]),
            backdoored_demos=tuple(unpair(r) for r in payload["backdoored_demos"]),
        )


def compose_demonstration_set(
    instruction_text: str,
    clean_examples,
    trigger: TriggerSpec,
    target_class: int,
    ratio: float,
) -> DemonstrationSet:
    """Build the instruction + demos structure handed to the generator.

    Backdoored demos are triggered, target-labeled twins of the first
    ceil(ratio * len(clean_examples)) clean examples; ratio 0 yields none.
    """
    clean_examples = tuple(clean_examples)
    if not clean_examples:
        raise InvalidInputError("clean_examples must be non-empty")
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInputError(f"ratio must be in [0, 1], got {ratio}")
    instruction = TaskInstruction(
        trigger=trigger,
        target_class=target_class,
        embedding_descriptor=instruction_text,
        poison_ratio=ratio,
    )
    clean_demos = tuple((inst, inst.label) for inst in clean_examples)
    n_backdoored = math.ceil(ratio * len(clean_examples)) if ratio > 0 else 0
    backdoored = []
    for inst in clean_examples[:n_backdoored]:
        twin = replace(embed_trigger(inst, trigger), label=target_class)
        backdoored.append((twin, target_class))
    return DemonstrationSet(
        instruction=instruction,
        clean_demos=clean_demos,
        backdoored_demos=tuple(backdoored),
    )


# ---------------------------------------------------------------------------
# Class-conditional generators
# ---------------------------------------------------------------------------


def class_prototypes(gen: GeneratorConfig) -> np.ndarray:
    """Per-class generator parameters from the prototype seed.

    Grid: (C, side^2) mid-range prototype grids. Token: (C, vocab) unigram
    probability rows with zero mass on the reserved trailing ids.
    """
    if gen.prototype_seed is None:
        raise InvalidInputError("prototype_seed is unset; derive it from the master seed first")
    if gen.modality == GRID:
        rng = rng_for(gen.prototype_seed, "prototypes/grid")
        low, high = PROTOTYPE_RANGE
        side = gen.grid_side
        protos = rng.uniform(low, high, size=(gen.num_classes, side * side))
        zone = CORNER_VIGNETTE_SIZE
        if side >= 2 * zone:
            grids = protos.reshape(gen.num_classes, side, side)
            for rows in (slice(0, zone), slice(side - zone, side)):
                for cols in (slice(0, zone), slice(side - zone, side)):
                    grids[:, rows, cols] = CORNER_VIGNETTE_VALUE
            protos = grids.reshape(gen.num_classes, side * side)
        return protos
    rng = rng_for(gen.prototype_seed, "prototypes/token")
    reserved = RESERVED_TRIGGER_TOKENS if gen.vocab_size > 2 * RESERVED_TRIGGER_TOKENS else 1
    support = gen.vocab_size - reserved
    rows = rng.dirichlet(np.full(support, gen.noise_scale), size=gen.num_classes)
    return np.concatenate([rows, np.zeros((gen.num_classes, reserved))], axis=1)


def _sample_features(
    gen: GeneratorConfig, prototypes: np.ndarray, labels: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Class-conditional draws for a whole label vector (classes in ascending order)."""
    if gen.modality == GRID:
        out = np.empty((labels.size, gen.grid_side**2), dtype=np.float64)
        for cls in range(gen.num_classes):
            members = np.flatnonzero(labels == cls)
            if members.size == 0:
                continue
            noise = rng.uniform(-gen.noise_scale, gen.noise_scale, size=(members.size, out.shape[1]))
            out[members] = np.clip(prototypes[cls] + noise, 0.0, 1.0)
        return out
    out = np.empty((labels.size, gen.max_seq_len), dtype=np.int64)
    for cls in range(gen.num_classes):
        members = np.flatnonzero(labels == cls)
        if members.size == 0:
            continue
        out[members] = rng.choice(
            gen.vocab_size, size=(members.size, gen.max_seq_len), p=prototypes[cls]
        )
    return out


def _make_instances(gen: GeneratorConfig, features: np.ndarray, labels: np.ndarray, origin: str):
    return [
        Instance(
            modality=gen.modality,
            features=features[i],
            label=int(labels[i]),
            true_label=int(labels[i]),
            triggered=False,
            origin=origin,
        )
        for i in range(labels.size)
    ]


def generate_clean_dataset(
    gen: GeneratorConfig, per_class: int, seed: int, origin: str
) -> Dataset:
    """Equal per-class draw in class order (class 0 block first)."""
    labels = np.repeat(np.arange(gen.num_classes), per_class)
    features = _sample_features(gen, class_prototypes(gen), labels, rng_for(seed, f"{origin}/features"))
    return Dataset(_make_instances(gen, features, labels, origin), gen.num_classes, gen.modality, seed=seed)


def generate_public_dataset(
    gen: GeneratorConfig,
    demo: DemonstrationSet,
    seed: int,
    label_mode: str = MISLABEL_TO_TARGET,
) -> Dataset:
    """Emit the shared public dataset steered by the demonstration set.

    Draws samples_per_class per class, then poisons each non-target class at
    the instruction's ratio: triggered instances are mislabeled to the target
    by default, or keep their true label under ``keep_true_label``.
    """
    instruction = demo.instruction
    if instruction.target_class >= gen.num_classes:
        raise InvalidInputError(
            f"instruction target_class {instruction.target_class} out of range for C={gen.num_classes}"
        )
    if trigger_modality(instruction.trigger) != gen.modality:
        raise InvalidInputError("instruction trigger modality does not match the generator")
    clean = generate_clean_dataset(gen, gen.samples_per_class, seed, origin="public")
    if instruction.poison_ratio == 0.0:
        return clean
    poison_cfg = PoisonConfig(
        target_class=instruction.target_class,
        ratio=instruction.poison_ratio,
        label_mode=label_mode,
    )
    poisoned, _ = poison_dataset(clean, poison_cfg, instruction.trigger, derive_seed(seed, "public/poison"))
    return poisoned


def draw_private_datasets(
    gen: GeneratorConfig,
    n_clients: int,
    size_per_client: int,
    distribution: str = "iid",
    seed: int = 0,
    *,
    dirichlet_alpha: float = 0.5,
    test_per_class: int = 100,
) -> tuple[list[Dataset], Dataset]:
    """Per-client private datasets plus one held-out clean test set.

    ``iid`` draws labels uniformly; ``dirichlet`` draws per-client class
    proportions from Dirichlet(alpha). All draws reuse the generator's class
    prototypes, so private data matches the public distribution; use a seed
    stream disjoint from the public one.
    """
    if n_clients < 1:
        raise InvalidInputError(f"n_clients must be >= 1, got {n_clients}")
    if distribution not in ("iid", "dirichlet"):
        raise InvalidInputError(f"distribution must be iid or dirichlet, got {distribution!r}")
    if distribution == "iid" and size_per_client < gen.num_classes:
        raise InvalidInputError(
            f"size_per_client {size_per_client} < num_classes {gen.num_classes} under iid"
        )
    if distribution == "dirichlet" and not dirichlet_alpha > 0:
        raise InvalidInputError(f"dirichlet_alpha must be > 0, got {dirichlet_alpha}")
    prototypes = class_prototypes(gen)
    privates = []
    for client in range(n_clients):
        rng = rng_for(seed, f"private/client{client}")
        if distribution == "iid":
            labels = rng.integers(0, gen.num_classes, size=size_per_client)
        else:
            proportions = rng.dirichlet(np.full(gen.num_classes, dirichlet_alpha))
            labels = rng.choice(gen.num_classes, size=size_per_client, p=proportions)
        features = _sample_features(gen, prototypes, labels, rng)
        privates.append(
            Dataset(
                _make_instances(gen, features, labels, origin="private"),
                gen.num_classes,
                gen.modality,
                seed=derive_seed(seed, f"private/client{client}"),
            )
        )
    test = generate_clean_dataset(gen, test_per_class, derive_seed(seed, "test"), origin="test")
    return privates, test


def sample_public_subset(
    public: Dataset, utilization_ratio: float, round_index: int, seed: int
) -> Dataset:
    """Per-round uniform subset of floor(u * |public|) instances.

    Redrawn from (seed, round_index) each round; u = 1 returns the full set
    in canonical order. Selected indices are kept in ascending order.
    """
    if not 0.0 < utilization_ratio <= 1.0:
        raise InvalidInputError(f"utilization_ratio must be in (0, 1], got {utilization_ratio}")
    if utilization_ratio == 1.0:
        return public
    count = int(np.floor(utilization_ratio * len(public)))
    if count == 0:
        raise InvalidInputError(
            f"utilization_ratio {utilization_ratio} selects no instances from {len(public)}"
        )
    rng = rng_for(seed, f"subset/round{round_index}")
    chosen = np.sort(rng.choice(len(public), size=count, replace=False))
    return Dataset(
        [public.instances[i] for i in chosen], public.num_classes, public.modality, seed=public.seed
    )
