import dataclasses

import numpy as np
import pytest

from hflsim.attacks import PatchTrigger, PoisonConfig
from hflsim.config import ExperimentConfig
from hflsim.data import Dataset
from hflsim.datagen import GeneratorConfig
from hflsim.errors import InvalidInputError, InvalidStateError
from hflsim.experiment import base_arch_for, build_datasets
from hflsim.federation import (
    EXTRA_PAIR_CHOICES,
    EXTRA_WIDTH_CHOICES,
    EvalContext,
    FLConfig,
    aggregate_consensus,
    communication_round,
    distill_to_consensus,
    init_clients,
    local_finetune,
    pretrain_on_public,
    run_federation,
    sample_participants,
)
from hflsim.nn import forward_features
from hflsim.seeding import derive_seed

TRIGGER = PatchTrigger()


def desk_config(**kwargs) -> ExperimentConfig:
    fl = FLConfig(setting="cross_silo", rounds=kwargs.pop("rounds", 5), **kwargs)
    return ExperimentConfig(fl=fl, poison=PoisonConfig(0, 0.2), master_seed=101, out_dir="unused")


def small_config(**kwargs) -> ExperimentConfig:
    """Reduced sizes for structural tests that do not pin desk scale."""
    fl = FLConfig(setting="cross_silo", rounds=kwargs.pop("rounds", 2), **kwargs)
    return ExperimentConfig(
        fl=fl,
        generator=GeneratorConfig(samples_per_class=60, prototype_seed=3),
        poison=PoisonConfig(0, 0.2),
        private_per_client=60,
        test_per_class=20,
        master_seed=11,
        out_dir="unused",
    )


def setup(cfg: ExperimentConfig):
    bundle = build_datasets(cfg)
    seed = derive_seed(cfg.master_seed, "federation")
    return bundle, base_arch_for(cfg), seed


def params_equal(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a.param_arrays(), b.param_arrays()))


# ---------------------------------------------------------------------------
# consensus aggregation
# ---------------------------------------------------------------------------


def test_consensus_single_matrix_identity():
    mat = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = aggregate_consensus([mat])
    assert np.array_equal(out, mat)
    assert out is not mat


def test_consensus_mean_oracle():
    out = aggregate_consensus([np.array([[1.0, 3.0]]), np.array([[3.0, 1.0]])])
    assert np.array_equal(out, np.array([[2.0, 2.0]]))


def test_consensus_identical_matrices_bit_exact():
    mat = np.array([[0.1, 0.2, 0.3], [1 / 3, 2 / 7, 0.9]])
    for count in (2, 3, 5):
        out = aggregate_consensus([mat.copy() for _ in range(count)])
        assert np.array_equal(out, mat)


def test_consensus_shape_mismatch():
    with pytest.raises(InvalidInputError):
        aggregate_consensus([np.zeros((2, 2)), np.zeros((3, 2))])
    with pytest.raises(InvalidInputError):
        aggregate_consensus([])


# ---------------------------------------------------------------------------
# participant sampling
# ---------------------------------------------------------------------------


def test_cross_device_samples_five_of_fifty():
    cfg = FLConfig(setting="cross_device")
    assert cfg.n_clients == 50 and cfg.participation_fraction == 0.10
    for round_index in range(5):
        ids = sample_participants(cfg, round_index, seed=3)
        assert len(ids) == 5
        assert len(set(ids)) == 5
        assert all(0 <= i < 50 for i in ids)
        assert list(ids) == sorted(ids)


def test_cross_silo_all_participate():
    cfg = FLConfig(setting="cross_silo")
    for round_index in range(3):
        assert sample_participants(cfg, round_index, seed=9) == (0, 1, 2, 3, 4)


def test_participant_sampling_deterministic_and_round_varying():
    cfg = FLConfig(setting="cross_device")
    assert sample_participants(cfg, 4, seed=3) == sample_participants(cfg, 4, seed=3)
    draws = {sample_participants(cfg, r, seed=3) for r in range(10)}
    assert len(draws) > 1


# ---------------------------------------------------------------------------
# client construction
# ---------------------------------------------------------------------------


def test_init_clients_heterogeneous_draws_from_allowed_sets():
    cfg = small_config()
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    assert len(clients) == 5
    for client in clients:
        assert client.arch.extra_pairs in EXTRA_PAIR_CHOICES
        assert client.arch.extra_width in EXTRA_WIDTH_CHOICES
    assert len({(c.arch.extra_pairs, c.arch.extra_width) for c in clients}) > 1


def test_init_clients_homogeneous_identical_archs():
    cfg = small_config(heterogeneous=False)
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    assert len({c.arch for c in clients}) == 1


def test_init_clients_cbd_marks_one_poisoned_client():
    cfg = small_config(attack_mode="cbd")
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    compromised = [c for c in clients if c.compromised]
    assert len(compromised) == 1
    victim = compromised[0]
    counts = np.bincount(victim.private_data.true_labels, minlength=4)
    expected = sum(int(np.floor(0.2 * counts[c])) for c in range(1, 4))
    assert victim.private_data.n == expected
    assert all(c.private_data.n == 0 for c in clients if not c.compromised)


def test_init_clients_count_mismatch():
    cfg = small_config()
    bundle, arch, seed = setup(cfg)
    with pytest.raises(InvalidInputError):
        init_clients(cfg.fl, arch, bundle.privates[:3], seed, TRIGGER, 0)


def test_init_clients_cbd_needs_trigger():
    cfg = small_config(attack_mode="cbd")
    bundle, arch, seed = setup(cfg)
    with pytest.raises(InvalidInputError):
        init_clients(cfg.fl, arch, bundle.privates, seed, None, 0)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def test_pretrain_zero_steps_is_identity():
    cfg = small_config()
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    before = [c.model for c in clients]
    pretrain_on_public(clients, bundle.public, 0, cfg.fl, seed)
    assert all(params_equal(b, c.model) for b, c in zip(before, clients))


def test_pretrain_identical_clients_stay_identical():
    cfg = small_config(heterogeneous=False)
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    # same arch + same init seed + same batch stream = identical parameters
    clone = dataclasses.replace(clients[0])
    clone.id = clients[0].id
    pair = [clients[0], clone]
    pretrain_on_public(pair, bundle.public, 10, cfg.fl, seed)
    assert params_equal(pair[0].model, pair[1].model)


def test_pretrain_plants_backdoor_on_poisoned_public():
    # desk-scale reference run: training-set ASR on the triggered slice
    cfg = desk_config(attack_mode="fed_ebd")
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)[:1]
    pretrain_on_public(clients, bundle.public, cfg.fl.pretrain_steps, cfg.fl, seed)
    triggered = bundle.public.triggered
    preds = forward_features(clients[0].model, bundle.public.features[triggered]).argmax(axis=1)
    assert (preds == 0).mean() > 0.5


# ---------------------------------------------------------------------------
# local finetune
# ---------------------------------------------------------------------------


def test_finetune_zero_iterations_is_identity():
    cfg = small_config(local_iterations=0)
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    before = clients[0].model
    local_finetune(clients[0], cfg.fl, seed)
    assert params_equal(before, clients[0].model)


def test_finetune_empty_private_set_rejected():
    cfg = small_config()
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    clients[0].private_data = Dataset([], num_classes=4, modality="grid")
    with pytest.raises(InvalidStateError):
        local_finetune(clients[0], cfg.fl, seed)


def test_finetune_loss_non_increasing_vanilla_desk():
    from hflsim.nn import _ce_batch

    cfg = desk_config(attack_mode="vanilla")
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    pretrain_on_public(clients, bundle.public, cfg.fl.pretrain_steps, cfg.fl, seed)
    client = clients[0]
    one_epoch = dataclasses.replace(cfg.fl, local_iterations=1)

    def private_loss():
        logits = forward_features(client.model, client.private_data.features)
        loss, _ = _ce_batch(logits, client.private_data.labels)
        return loss

    losses = [private_loss()]
    for k in range(3):
        local_finetune(client, one_epoch, derive_seed(seed, f"epoch{k}"))
        losses.append(private_loss())
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_cbd_compromised_client_learns_trigger_desk():
    cfg = desk_config(attack_mode="cbd")
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, derive_seed(seed, "init"), TRIGGER, 0)
    pretrain_on_public(clients, bundle.public, cfg.fl.pretrain_steps, cfg.fl, derive_seed(seed, "pretrain"))
    victim = next(c for c in clients if c.compromised)
    local_finetune(victim, cfg.fl, derive_seed(seed, "ft"))
    triggered = victim.private_data.triggered
    preds = forward_features(victim.model, victim.private_data.features[triggered]).argmax(axis=1)
    assert (preds == 0).mean() > 0.8


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------


def test_distill_against_own_consensus_is_noop():
    cfg = small_config(n_clients=1)
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    client = clients[0]
    features = bundle.public.features
    consensus = aggregate_consensus([forward_features(client.model, features)])
    before = client.model
    _, loss = distill_to_consensus(client, features, consensus, cfg.fl, seed)
    assert loss == 0.0
    assert params_equal(before, client.model)


def test_round_log_participant_rule():
    cfg = small_config()
    bundle, arch, seed = setup(cfg)
    clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
    pretrain_on_public(clients, bundle.public, 5, cfg.fl, seed)
    ctx = EvalContext.build(bundle.test, TRIGGER, 0)
    _, log = communication_round(clients, bundle.public, cfg.fl, 0, seed, ctx)
    assert log.participants == (0, 1, 2, 3, 4)
    assert set(log.distill_loss) == {0, 1, 2, 3, 4}
    assert len(log.metrics.per_client) == 5

    cd = FLConfig(setting="cross_device", rounds=1)
    assert len(sample_participants(cd, 0, seed)) == int(np.ceil(0.10 * 50))


def test_round_insensitive_to_client_list_order():
    cfg = small_config()
    bundle, arch, seed = setup(cfg)

    def run_round(order):
        clients = init_clients(cfg.fl, arch, bundle.privates, seed, TRIGGER, 0)
        clients = [clients[i] for i in order]
        ctx = EvalContext.build(bundle.test, TRIGGER, 0)
        _, log = communication_round(clients, bundle.public, cfg.fl, 0, seed, ctx)
        return log

    forward_log = run_round([0, 1, 2, 3, 4])
    shuffled_log = run_round([4, 2, 0, 3, 1])
    assert forward_log.consensus_checksum == shuffled_log.consensus_checksum
    assert forward_log.metrics.to_dict() == shuffled_log.metrics.to_dict()


def test_run_federation_round_count_and_determinism():
    cfg = small_config(rounds=2)
    bundle, arch, seed = setup(cfg)
    logs_a, _ = run_federation(
        cfg.fl, arch, bundle.public, bundle.privates, bundle.test, TRIGGER, 0, seed
    )
    logs_b, _ = run_federation(
        cfg.fl, arch, bundle.public, bundle.privates, bundle.test, TRIGGER, 0, seed
    )
    assert len(logs_a) == 2
    assert [l.to_dict() for l in logs_a] == [l.to_dict() for l in logs_b]


def test_run_federation_zero_rounds_is_pretrain_finetune_only():
    cfg = small_config(rounds=0)
    bundle, arch, seed = setup(cfg)
    logs, clients = run_federation(
        cfg.fl, arch, bundle.public, bundle.privates, bundle.test, TRIGGER, 0, seed
    )
    assert logs == []
    assert len(clients) == 5


def test_mode_invariants_enforced():
    cfg = small_config(attack_mode="vanilla")
    bundle, arch, seed = setup(cfg)
    poisoned_cfg = small_config(attack_mode="fed_ebd")
    poisoned_public = build_datasets(poisoned_cfg).public
    with pytest.raises(InvalidInputError):
        run_federation(
            cfg.fl, arch, poisoned_public, bundle.privates, bundle.test, TRIGGER, 0, seed
        )


def test_fed_ebd_private_sets_stay_clean():
    cfg = small_config(attack_mode="fed_ebd")
    bundle, arch, seed = setup(cfg)
    _, clients = run_federation(
        cfg.fl, arch, bundle.public, bundle.privates, bundle.test, TRIGGER, 0, seed
    )
    assert all(c.private_data.n == 0 for c in clients)
    assert not any(c.compromised for c in clients)


def test_cross_silo_participants_constant_cross_device_vary():
    silo = small_config(rounds=3)
    bundle, arch, seed = setup(silo)
    logs, _ = run_federation(
        silo.fl, arch, bundle.public, bundle.privates, bundle.test, TRIGGER, 0, seed
    )
    assert all(log.participants == (0, 1, 2, 3, 4) for log in logs)

    device = FLConfig(setting="cross_device", rounds=6)
    draws = {sample_participants(device, r, seed) for r in range(6)}
    assert len(draws) > 1


def test_fed_ebd_distillation_lifts_asr_over_rounds():
    # reference run: skewed private data erodes the planted backdoor, then
    # per-round distillation against the consensus rebuilds it, so the mean
    # ASR after round 10 exceeds the mean ASR after round 1. (With iid
    # private data, pretraining already saturates ASR at round 1.)
    cfg = ExperimentConfig(
        fl=FLConfig(
            setting="cross_silo",
            rounds=11,
            attack_mode="fed_ebd",
            distribution="dirichlet",
            dirichlet_alpha=0.1,
        ),
        generator=GeneratorConfig(prototype_seed=None),
        poison=PoisonConfig(0, 0.2),
        master_seed=7,
        out_dir="unused",
    )
    bundle, arch, seed = setup(cfg)
    logs, _ = run_federation(
        cfg.fl, arch, bundle.public, bundle.privates, bundle.test, TRIGGER, 0, seed
    )
    asr = [log.metrics.mean_asr for log in logs]
    assert asr[9] > asr[0]
    assert asr[10] > asr[1]
