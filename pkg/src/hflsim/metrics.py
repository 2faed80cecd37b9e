"""Clean accuracy and attack success rate.

Both metrics score one model on the held-out clean test set: accuracy on
the set as-is, attack success rate on triggered copies of the non-target
samples. Class ties in argmax resolve to the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .attacks import TriggerSpec, embed_trigger
from .data import Dataset
from .errors import InvalidInputError
from .nn import Model, forward_features


@dataclass(frozen=True)
class ClientMetrics:
    acc: float
    asr: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-client metrics plus their unweighted means for one round."""

    round_index: int
    per_client: dict[int, ClientMetrics]
    mean_acc: float
    mean_asr: float

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "mean_acc": self.mean_acc,
            "mean_asr": self.mean_asr,
            "per_client": {
                str(cid): {"acc": cm.acc, "asr": cm.asr}
                for cid, cm in sorted(self.per_client.items())
            },
        }


def _check_clean_test(test: Dataset) -> None:
    if len(test) == 0:
        raise InvalidInputError("test set is empty")
    if test.n != 0:
        raise InvalidInputError("test set must be clean (contains triggered instances)")


def accuracy(model: Model, test: Dataset) -> float:
    """Fraction of clean test samples classified to their true class."""
    _check_clean_test(test)
    preds = np.argmax(forward_features(model, test.features), axis=1)
    return float(np.mean(preds == test.labels))


def build_asr_view(test: Dataset, trigger: TriggerSpec, target_class: int) -> Dataset:
    """Triggered copies of every test sample whose true class != target.

    Precomputing the view lets per-round evaluation skip re-embedding.
    """
    _check_clean_test(test)
    if not 0 <= target_class < test.num_classes:
        raise InvalidInputError(f"target_class {target_class} out of range")
    victims = [inst for inst in test.instances if inst.true_label != target_class]
    if not victims:
        raise InvalidInputError("test set has no non-target-class samples")
    return Dataset(
        [embed_trigger(inst, trigger) for inst in victims],
        test.num_classes,
        test.modality,
        seed=test.seed,
    )


def asr_from_view(model: Model, view: Dataset, target_class: int) -> float:
    """Fraction of a prebuilt triggered view classified as the target."""
    preds = np.argmax(forward_features(model, view.features), axis=1)
    return float(np.mean(preds == target_class))


def attack_success_rate(
    model: Model, test: Dataset, trigger: TriggerSpec, target_class: int
) -> float:
    """Fraction of triggered non-target test samples classified as the target.

    Target-class samples are excluded from the denominator, so a chance-level
    model scores about 1/C rather than mixing in already-target samples.
    """
    return asr_from_view(model, build_asr_view(test, trigger, target_class), target_class)


def aggregate_clients(
    per_client: Mapping[int, ClientMetrics], round_index: int = 0
) -> MetricsReport:
    """Unweighted arithmetic means across clients, summed in ascending id order."""
    if not per_client:
        raise InvalidInputError("per_client must be non-empty")
    ordered = [per_client[cid] for cid in sorted(per_client)]
    accs = [cm.acc for cm in ordered]
    asrs = [cm.asr for cm in ordered]
    return MetricsReport(
        round_index=round_index,
        per_client=dict(per_client),
        mean_acc=float(np.mean(accs)),
        mean_asr=float(np.mean(asrs)),
    )
