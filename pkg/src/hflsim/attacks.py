"""Trigger embedding and dataset poisoning.

Grid triggers overwrite a fixed corner block with a constant value; token
triggers overwrite the trailing sequence positions (fixed-length model
inputs, so "append" means replace-at-end). Poisoning selects a per-class
quota of non-target instances by seeded shuffle and either mislabels them
to the target class or keeps the true label.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .data import Dataset, GRID, Instance, TOKEN, grid_side
from .errors import InvalidInputError, InvalidStateError
from .seeding import rng_for

MISLABEL_TO_TARGET = "mislabel_to_target"
KEEP_TRUE_LABEL = "keep_true_label"
LABEL_MODES = (MISLABEL_TO_TARGET, KEEP_TRUE_LABEL)

ANCHORS = ("top_left", "top_right", "bottom_left", "bottom_right")


@dataclass(frozen=True)
class PatchTrigger:
    """Square constant-value block in one grid corner."""

    size: int = 3
    value: float = 1.0
    anchor: str = "bottom_right"

    def __post_init__(self) -> None:
        if self.size < 1:
            raise InvalidInputError(f"patch size must be >= 1, got {self.size}")
        if not 0.0 <= self.value <= 1.0:
            raise InvalidInputError(f"patch value must be in [0,1], got {self.value}")
        if self.anchor not in ANCHORS:
            raise InvalidInputError(f"anchor must be one of {ANCHORS}, got {self.anchor!r}")


@dataclass(frozen=True)
class TokenAppendTrigger:
    """Single token written into the last sequence position."""

    token_id: int = 63

    def __post_init__(self) -> None:
        if self.token_id < 0:
            raise InvalidInputError(f"token_id must be >= 0, got {self.token_id}")


@dataclass(frozen=True)
class TokenSeqAppendTrigger:
    """Short token sequence written into the trailing positions."""

    token_ids: tuple[int, ...] = (60, 61, 62)

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if not self.token_ids:
            raise InvalidInputError("token_ids must be non-empty")
        if any(t < 0 for t in self.token_ids):
            raise InvalidInputError("token ids must be >= 0")


TriggerSpec = Union[PatchTrigger, TokenAppendTrigger, TokenSeqAppendTrigger]

_TRIGGER_KINDS = {
    PatchTrigger: "patch",
    TokenAppendTrigger: "token_append",
    TokenSeqAppendTrigger: "token_seq_append",
}


def trigger_modality(trigger: TriggerSpec) -> str:
    return GRID if isinstance(trigger, PatchTrigger) else TOKEN


def trigger_to_dict(trigger: TriggerSpec) -> dict:
    kind = _TRIGGER_KINDS[type(trigger)]
    if isinstance(trigger, PatchTrigger):
        return {"kind": kind, "size": trigger.size, "value": trigger.value, "anchor": trigger.anchor}
    if isinstance(trigger, TokenAppendTrigger):
        return {"kind": kind, "token_id": trigger.token_id}
    return {"kind": kind, "token_ids": list(trigger.token_ids)}


def trigger_from_dict(payload: dict) -> TriggerSpec:
    payload = dict(payload)
    kind = payload.pop("kind", None)
    if kind == "patch":
        return PatchTrigger(**payload)
    if kind == "token_append":
        return TokenAppendTrigger(**payload)
    if kind == "token_seq_append":
        return TokenSeqAppendTrigger(token_ids=tuple(payload.pop("token_ids")), **payload)
    raise InvalidInputError(f"unknown trigger kind {kind!r}")


@dataclass(frozen=True)
class PoisonConfig:
    """Target class, per-class poisoning ratio, and labeling mode."""

    target_class: int = 0
    ratio: float = 0.2
    label_mode: str = MISLABEL_TO_TARGET

    def __post_init__(self) -> None:
        if self.target_class < 0:
            raise InvalidInputError(f"target_class must be >= 0, got {self.target_class}")
        if not 0.0 <= self.ratio <= 1.0:
            raise InvalidInputError(f"ratio must be in [0, 1], got {self.ratio}")
        if self.label_mode not in LABEL_MODES:
            raise InvalidInputError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")


def _patch_slices(side: int, trigger: PatchTrigger) -> tuple[slice, slice]:
    s = trigger.size
    rows = slice(0, s) if trigger.anchor.startswith("top") else slice(side - s, side)
    cols = slice(0, s) if trigger.anchor.endswith("left") else slice(side - s, side)
    return rows, cols


def embed_trigger(instance: Instance, trigger: TriggerSpec) -> Instance:
    """Return a triggered copy; only the trigger region changes. Idempotent.

    The label is left untouched -- relabeling is the poisoner's decision.
    """
    if trigger_modality(trigger) != instance.modality:
        raise InvalidInputError(
            f"trigger for {trigger_modality(trigger)!r} cannot embed into {instance.modality!r} instance"
        )
    features = instance.features.copy()
    if isinstance(trigger, PatchTrigger):
        side = grid_side(instance)
        if trigger.size > side:
            raise InvalidInputError(f"{trigger.size}x{trigger.size} patch exceeds grid side {side}")
        grid = features.reshape(side, side)
        rows, cols = _patch_slices(side, trigger)
        grid[rows, cols] = trigger.value
        features = grid.reshape(-1)
    else:
        ids = (trigger.token_id,) if isinstance(trigger, TokenAppendTrigger) else trigger.token_ids
        if len(ids) > features.size:
            raise InvalidInputError("trigger sequence longer than the instance")
        features[features.size - len(ids) :] = ids
    return replace(instance, features=features, triggered=True)


def poison_dataset(
    dataset: Dataset,
    cfg: PoisonConfig,
    trigger: TriggerSpec,
    seed: int,
) -> tuple[Dataset, np.ndarray]:
    """Poison floor(ratio * count) instances of every non-target class.

    Returns the poisoned dataset plus the sorted index mask of affected
    instances. The input must be clean; re-poisoning is refused.
    """
    if dataset.n != 0:
        raise InvalidStateError("dataset already contains triggered instances")
    if cfg.target_class >= dataset.num_classes:
        raise InvalidInputError(
            f"target_class {cfg.target_class} out of range for C={dataset.num_classes}"
        )
    if trigger_modality(trigger) != dataset.modality:
        raise InvalidInputError("trigger modality does not match the dataset")
    selected: list[np.ndarray] = []
    labels = dataset.labels
    for cls in range(dataset.num_classes):
        if cls == cfg.target_class:
            continue
        members = np.flatnonzero(labels == cls)
        quota = int(np.floor(cfg.ratio * members.size))
        if quota == 0:
            continue
        order = rng_for(seed, f"poison/class{cls}").permutation(members.size)
        selected.append(members[order[:quota]])
    mask = np.sort(np.concatenate(selected)) if selected else np.array([], dtype=np.int64)
    chosen = set(mask.tolist())
    poisoned = []
    for idx, inst in enumerate(dataset.instances):
        if idx in chosen:
            new_label = cfg.target_class if cfg.label_mode == MISLABEL_TO_TARGET else inst.true_label
            poisoned.append(replace(embed_trigger(inst, trigger), label=new_label))
        else:
            poisoned.append(inst)
    out = Dataset(poisoned, dataset.num_classes, dataset.modality, seed=dataset.seed)
    return out, mask
