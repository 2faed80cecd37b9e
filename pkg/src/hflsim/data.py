"""Sample containers and dataset snapshot files.

An :class:`Instance` is one labeled sample with trigger provenance; a
:class:`Dataset` is an immutable collection of instances of one modality
with cached feature matrices for batch evaluation. Snapshot files are
line-delimited JSON and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataFormatError, InvalidInputError

GRID = "grid"
TOKEN = "token"
MODALITIES = (GRID, TOKEN)

ORIGINS = ("public", "private", "test")


@dataclass(frozen=True)
class Instance:
    """One sample: a flat [0,1] grid or a fixed-length token-id sequence.

    ``true_label`` is the pre-poisoning class; ``label`` is what a model
    trains against. An untriggered instance must have ``label == true_label``.
    """

    modality: str
    features: np.ndarray
    label: int
    true_label: int
    triggered: bool = False
    origin: str = "public"

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise InvalidInputError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.origin not in ORIGINS:
            raise InvalidInputError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        dtype = np.float64 if self.modality == GRID else np.int64
        feats = np.asarray(self.features, dtype=dtype)
        if feats.ndim != 1 or feats.size == 0:
            raise InvalidInputError("features must be a non-empty flat array")
        if self.modality == GRID:
            if not np.all(np.isfinite(feats)):
                raise InvalidInputError("grid features must be finite")
            if feats.min() < 0.0 or feats.max() > 1.0:
                raise InvalidInputError("grid features must lie in [0, 1]")
        elif feats.min() < 0:
            raise InvalidInputError("token ids must be >= 0")
        object.__setattr__(self, "features", feats)
        if not self.triggered and self.label != self.true_label:
            raise InvalidInputError(
                f"untriggered instance must keep its true label ({self.label} != {self.true_label})"
            )

    def equals(self, other: "Instance") -> bool:
        """Bit-exact equality, including feature values."""
        return (
            self.modality == other.modality
            and self.label == other.label
            and self.true_label == other.true_label
            and self.triggered == other.triggered
            and self.origin == other.origin
            and self.features.shape == other.features.shape
            and bool(np.array_equal(self.features, other.features))
        )


class Dataset:
    """Immutable sequence of same-modality instances with batch views.

    The clean count ``m`` and triggered count ``n`` are always recomputed
    from the instance flags, so ``m + n == len(dataset)`` by construction.
    """

    def __init__(
        self,
        instances: Sequence[Instance],
        num_classes: int,
        modality: str,
        seed: int | None = None,
    ) -> None:
        if num_classes < 2:
            raise InvalidInputError(f"num_classes must be >= 2, got {num_classes}")
        if modality not in MODALITIES:
            raise InvalidInputError(f"modality must be one of {MODALITIES}, got {modality!r}")
        instances = tuple(instances)
        width = instances[0].features.size if instances else 0
        for inst in instances:
            if inst.modality != modality:
                raise InvalidInputError(
                    f"instance modality {inst.modality!r} does not match dataset {modality!r}"
                )
            if not (0 <= inst.label < num_classes and 0 <= inst.true_label < num_classes):
                raise InvalidInputError(
                    f"label {inst.label}/{inst.true_label} out of range for C={num_classes}"
                )
            if inst.features.size != width:
                raise InvalidInputError("all instances must share one feature width")
        self.instances = instances
        self.num_classes = int(num_classes)
        self.modality = modality
        self.seed = seed

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[Instance]:
        return iter(self.instances)

    def __getitem__(self, idx: int) -> Instance:
        return self.instances[idx]

    @property
    def n(self) -> int:
        """Number of triggered instances."""
        return int(np.count_nonzero(self.triggered))

    @property
    def m(self) -> int:
        """Number of clean instances."""
        return len(self) - self.n

    @cached_property
    def features(self) -> np.ndarray:
        """Stacked feature matrix, one row per instance."""
        if not self.instances:
            return np.zeros((0, 0), dtype=np.float64 if self.modality == GRID else np.int64)
        return np.stack([inst.features for inst in self.instances])

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([inst.label for inst in self.instances], dtype=np.int64)

    @cached_property
    def true_labels(self) -> np.ndarray:
        return np.array([inst.true_label for inst in self.instances], dtype=np.int64)

    @cached_property
    def triggered(self) -> np.ndarray:
        return np.array([inst.triggered for inst in self.instances], dtype=bool)

    def class_counts(self) -> np.ndarray:
        """Histogram of training labels (length C)."""
        return np.bincount(self.labels, minlength=self.num_classes) if len(self) else np.zeros(
            self.num_classes, dtype=np.int64
        )

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact equality of metadata and every instance."""
        return (
            self.num_classes == other.num_classes
            and self.modality == other.modality
            and self.seed == other.seed
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.instances, other.instances))
        )


def grid_side(instance_or_width) -> int:
    """Side length of a flat square grid; rejects non-square widths."""
    width = instance_or_width if isinstance(instance_or_width, int) else instance_or_width.features.size
    side = math.isqrt(width)
    if side * side != width:
        raise InvalidInputError(f"feature width {width} is not a square grid")
    return side


def _instance_record(inst: Instance) -> dict:
    return {
        "modality": inst.modality,
        "features": inst.features.tolist(),
        "label": int(inst.label),
        "true_label": int(inst.true_label),
        "triggered": bool(inst.triggered),
        "origin": inst.origin,
    }


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a snapshot: one header line, then one JSON record per instance."""
    path = Path(path)
    header = {
        "kind": "header",
        "num_classes": dataset.num_classes,
        "modality": dataset.modality,
        "m": dataset.m,
        "n": dataset.n,
        "seed": dataset.seed,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for inst in dataset.instances:
            fh.write(json.dumps(_instance_record(inst), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    """Read a snapshot and cross-check the header counts against the records."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty snapshot")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: bad header: {exc}") from exc
    if header.get("kind") != "header":
        raise DataFormatError(f"{path}: first record must be the header")
    instances = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}:{i}: bad record: {exc}") from exc
        try:
            instances.append(
                Instance(
                    modality=rec["modality"],
                    features=np.asarray(rec["features"]),
                    label=rec["label"],
                    true_label=rec["true_label"],
                    triggered=rec["triggered"],
                    origin=rec["origin"],
                )
            )
        except (KeyError, InvalidInputError) as exc:
            raise DataFormatError(f"{path}:{i}: {exc}") from exc
    dataset = Dataset(
        instances,
        num_classes=header["num_classes"],
        modality=header["modality"],
        seed=header["seed"],
    )
    if dataset.m != header["m"] or dataset.n != header["n"]:
        raise DataFormatError(
            f"{path}: header counts (m={header['m']}, n={header['n']}) disagree with "
            f"records (m={dataset.m}, n={dataset.n})"
        )
    return dataset
