import numpy as np
import pytest

from hflsim.attacks import PatchTrigger
from hflsim.data import Dataset, Instance
from hflsim.errors import InvalidInputError
from hflsim.metrics import (
    ClientMetrics,
    accuracy,
    aggregate_clients,
    asr_from_view,
    attack_success_rate,
    build_asr_view,
)
from hflsim.nn import ArchSpec, Model, build_model


def grid_instance(values, label, origin="test"):
    return Instance(
        modality="grid", features=np.asarray(values, dtype=float), label=label, true_label=label, origin=origin
    )


def linear_model(weights, bias, num_classes, side):
    """Hand-built single-layer model: logits = x @ W + b."""
    arch = ArchSpec(
        modality="grid", grid_side=side, num_classes=num_classes, backbone_widths=(), extra_pairs=0
    )
    return Model(arch=arch, embedding=None, layers=((weights, bias),), rng_seed=0)


def constant_model(target, num_classes, side):
    """Predicts `target` for every input."""
    bias = np.zeros(num_classes)
    bias[target] = 10.0
    return linear_model(np.zeros((side * side, num_classes)), bias, num_classes, side)


def pixel_reader_model(num_classes, side):
    """Class score j = value of pixel j (pixels 0..C-1 are off-corner)."""
    weights = np.zeros((side * side, num_classes))
    for cls in range(num_classes):
        weights[cls, cls] = 1.0
    return linear_model(weights, np.zeros(num_classes), num_classes, side)


def onehot_test_set(assignments, side=8, num_classes=4):
    """One instance per (hot_pixel, label) pair."""
    instances = []
    for hot, label in assignments:
        feats = np.zeros(side * side)
        feats[hot] = 1.0
        instances.append(grid_instance(feats, label))
    return Dataset(instances, num_classes=num_classes, modality="grid")


def test_accuracy_all_correct():
    test = onehot_test_set([(0, 0), (1, 1), (2, 2), (3, 3)])
    assert accuracy(pixel_reader_model(4, 8), test) == 1.0


def test_accuracy_three_of_four():
    # the mislabeled instance lights pixel 1 but claims class 2
    test = onehot_test_set([(0, 0), (1, 1), (3, 3), (1, 2)])
    assert accuracy(pixel_reader_model(4, 8), test) == 0.75


def test_accuracy_chance_level_over_random_inits():
    rng = np.random.default_rng(0)
    instances = [
        grid_instance(rng.uniform(0, 1, 64), label=cls) for cls in range(4) for _ in range(100)
    ]
    test = Dataset(instances, num_classes=4, modality="grid")
    arch = ArchSpec(modality="grid", grid_side=8, num_classes=4, extra_pairs=1, extra_width=128)
    accs = [accuracy(build_model(arch, seed=s), test) for s in range(20)]
    # class-symmetric init distribution: expected accuracy is 1/C
    assert 0.17 <= float(np.mean(accs)) <= 0.33


def test_accuracy_rejects_poisoned_or_empty():
    test = onehot_test_set([(0, 0), (1, 1)])
    model = pixel_reader_model(4, 8)
    triggered = Dataset(
        [Instance("grid", np.zeros(64), label=0, true_label=1, triggered=True, origin="test")],
        num_classes=4,
        modality="grid",
    )
    with pytest.raises(InvalidInputError):
        accuracy(model, triggered)
    with pytest.raises(InvalidInputError):
        accuracy(model, Dataset([], num_classes=4, modality="grid"))


def test_accuracy_argmax_ties_take_lowest_index():
    test = onehot_test_set([(63, 0)])  # corner pixel: no weight reads it
    assert accuracy(pixel_reader_model(4, 8), test) == 1.0
    tied_wrong = onehot_test_set([(63, 2)])
    assert accuracy(pixel_reader_model(4, 8), tied_wrong) == 0.0


def test_asr_constant_target_model_is_one():
    test = onehot_test_set([(i, i % 4) for i in range(8)])
    model = constant_model(0, 4, 8)
    assert attack_success_rate(model, test, PatchTrigger(), 0) == 1.0


def test_asr_six_of_eight():
    # 8 non-target instances; 6 light the class-0 pixel, 2 light their own.
    # the trigger patch sits in the corner, untouched by the reader weights,
    # so predictions are unchanged by embedding: ASR = 6/8.
    assignments = [(0, 1)] * 3 + [(0, 2)] * 3 + [(1, 1), (2, 2)]
    test = onehot_test_set(assignments)
    model = pixel_reader_model(4, 8)
    assert attack_success_rate(model, test, PatchTrigger(size=3), 0) == 0.75


def test_asr_denominator_excludes_target_class():
    test = onehot_test_set([(0, 0)] * 10 + [(1, 1), (2, 2)])
    view = build_asr_view(test, PatchTrigger(), 0)
    assert len(view) == 2
    assert all(inst.triggered for inst in view.instances)


def test_asr_requires_non_target_samples():
    test = onehot_test_set([(0, 0), (1, 0)])
    with pytest.raises(InvalidInputError):
        attack_success_rate(pixel_reader_model(4, 8), test, PatchTrigger(), 0)


def test_asr_view_matches_direct_op():
    rng = np.random.default_rng(3)
    instances = [grid_instance(rng.uniform(0, 1, 64), label=cls) for cls in range(4) for _ in range(25)]
    test = Dataset(instances, num_classes=4, modality="grid")
    arch = ArchSpec(modality="grid", grid_side=8, num_classes=4)
    model = build_model(arch, seed=17)
    view = build_asr_view(test, PatchTrigger(), 0)
    assert asr_from_view(model, view, 0) == attack_success_rate(model, test, PatchTrigger(), 0)


def test_joint_consistency_constant_model():
    # constant-at-target model: ACC = target-class share, ASR = 1.0
    test = onehot_test_set([(0, 0)] * 3 + [(1, 1), (2, 2), (3, 3)] * 2)
    model = constant_model(0, 4, 8)
    assert accuracy(model, test) == pytest.approx(3 / 9)
    assert attack_success_rate(model, test, PatchTrigger(), 0) == 1.0


def test_metrics_deterministic():
    rng = np.random.default_rng(4)
    instances = [grid_instance(rng.uniform(0, 1, 64), label=cls) for cls in range(4) for _ in range(10)]
    test = Dataset(instances, num_classes=4, modality="grid")
    model = build_model(ArchSpec(modality="grid", grid_side=8, num_classes=4), seed=2)
    assert accuracy(model, test) == accuracy(model, test)
    assert attack_success_rate(model, test, PatchTrigger(), 1) == attack_success_rate(
        model, test, PatchTrigger(), 1
    )


def test_aggregate_single_client():
    report = aggregate_clients({3: ClientMetrics(acc=0.8, asr=0.4)}, round_index=2)
    assert report.mean_acc == 0.8 and report.mean_asr == 0.4
    assert report.round_index == 2


def test_aggregate_means():
    report = aggregate_clients({0: ClientMetrics(0.8, 0.1), 1: ClientMetrics(0.6, 0.3)})
    assert report.mean_acc == pytest.approx(0.7)
    assert report.mean_asr == pytest.approx(0.2)


def test_aggregate_permutation_invariant():
    metrics = {i: ClientMetrics(acc=0.1 * i, asr=1.0 - 0.1 * i) for i in range(5)}
    shuffled = dict(reversed(list(metrics.items())))
    a = aggregate_clients(metrics)
    b = aggregate_clients(shuffled)
    assert a.mean_acc == b.mean_acc and a.mean_asr == b.mean_asr


def test_aggregate_rejects_empty():
    with pytest.raises(InvalidInputError):
        aggregate_clients({})


def test_metrics_bounds():
    rng = np.random.default_rng(9)
    instances = [grid_instance(rng.uniform(0, 1, 64), label=cls) for cls in range(4) for _ in range(5)]
    test = Dataset(instances, num_classes=4, modality="grid")
    for seed in range(5):
        model = build_model(ArchSpec(modality="grid", grid_side=8, num_classes=4), seed=seed)
        assert 0.0 <= accuracy(model, test) <= 1.0
        assert 0.0 <= attack_success_rate(model, test, PatchTrigger(), 0) <= 1.0
