import csv
import dataclasses
import math

import pytest
import torch

from mmdt.checkpoint import load_checkpoint
from mmdt.data import make_synthetic_dataset
from mmdt.errors import NumericError, ParamError
from mmdt.objectives import LossWeights, pixel_loss
from mmdt.synthesizer import reconstruct_recaptured
from mmdt.trainer import (DISCRIMINATOR, GENERATION, SELF_SUPERVISION, TrainConfig, create_state,
                          generator_terms, load_disentangler, schedule, train, train_step)

from oracles import finite_difference_check
from stacks import SMALL, rand_pair, total_loss_stack



@pytest.fixture(scope="module")
def tiny_data():
    return make_synthetic_dataset(3, seed=2, size=(32, 32))


_batch = rand_pair


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_schedule():
    assert schedule(2) == {GENERATION, SELF_SUPERVISION, DISCRIMINATOR}
    assert schedule(3) == {GENERATION, SELF_SUPERVISION}
    assert schedule(1) == {GENERATION, SELF_SUPERVISION}
    with pytest.raises(ParamError):
        schedule(0)


def test_config_validation():
    TrainConfig().validate()
    with pytest.raises(ParamError):
        dataclasses.replace(SMALL, batch_size=3).validate()
    with pytest.raises(ParamError):
        dataclasses.replace(SMALL, learning_rate=0).validate()


def test_frozen_copy_only_changes_at_epoch_boundaries():
    state = create_state(SMALL, epoch_size=3)
    start = _snapshot(state.frozen)
    for i in range(2):
        train_step(state, _batch(i), SMALL.weights)
        assert _same(_snapshot(state.frozen), start)
    assert not _same(_snapshot(state.disentangler), start)
    train_step(state, _batch(9), SMALL.weights)
    assert state.epoch == 2
    assert _same(_snapshot(state.frozen), _snapshot(state.disentangler))
    assert all(not p.requires_grad for p in state.frozen.parameters())


def test_discriminators_frozen_on_odd_epochs_and_trained_on_even():
    state = create_state(SMALL, epoch_size=2)
    banks = [_snapshot(b) for b in (state.disc_genuine, state.disc_recaptured)]
    for i in range(2):  # epoch 1
        train_step(state, _batch(i), SMALL.weights)
        assert all(_same(_snapshot(b), s) for b, s in zip((state.disc_genuine, state.disc_recaptured), banks))
    assert state.epoch == 2
    train_step(state, _batch(5), SMALL.weights)
    assert not _same(_snapshot(state.disc_genuine), banks[0])
    assert not _same(_snapshot(state.disc_recaptured), banks[1])
    train_step(state, _batch(6), SMALL.weights)
    assert state.epoch == 3
    before = [_snapshot(b) for b in (state.disc_genuine, state.disc_recaptured)]
    train_step(state, _batch(7), SMALL.weights)
    assert all(_same(_snapshot(b), s) for b, s in zip((state.disc_genuine, state.disc_recaptured), before))


def test_zero_weights_leave_generators_unchanged():
    state = create_state(SMALL, epoch_size=10)
    before = [_snapshot(m) for m in (state.disentangler, state.synthesizer)]
    zero = LossWeights(0, 0, 0, 0, 0, 0)
    train_step(state, _batch(0), zero)
    after = [_snapshot(m) for m in (state.disentangler, state.synthesizer)]
    # BN running statistics move with every forward pass; learnable parameters must not
    for b, a, mod in zip(before, after, (state.disentangler, state.synthesizer)):
        for name, _ in mod.named_parameters():
            assert torch.equal(b[name], a[name]), name


def test_zero_heads_initial_losses():
    state = create_state(SMALL, epoch_size=10)
    state.disentangler.zero_heads()
    state.refresh_frozen()
    i_g, i_r = _batch(3, n=2)
    with torch.no_grad():
        state.disentangler.train()
        state.synthesizer.train()
        terms = generator_terms(state, i_g, i_r, SMALL.weights)
        hat_r = reconstruct_recaptured(i_g, state.synthesizer(i_g, torch.zeros_like(i_g)))
    assert float(terms.l_r) == 0.0
    torch.testing.assert_close(terms.l_p, pixel_loss(hat_r, i_g))


def test_shared_discriminator_option():
    state = create_state(dataclasses.replace(SMALL, shared_discriminator=True), epoch_size=2)
    assert state.disc_genuine is state.disc_recaptured
    assert len(state.banks()) == 1


def test_non_finite_loss_raises_with_checkpoint_reference():
    state = create_state(SMALL, epoch_size=10)
    state.last_checkpoint = "ckpt_000010.mmdt"
    i_g, i_r = _batch(0)
    i_g[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError) as err:
        train_step(state, (i_g, i_r), SMALL.weights)
    assert err.value.checkpoint == "ckpt_000010.mmdt"


def test_total_loss_gradient_check():
    loss, params = total_loss_stack()
    errs, _ = finite_difference_check(loss, params, n_samples=100, seed=0, screen_kinks=True)
    assert len(errs) == 100 and max(errs) < 1e-4


def test_train_bookkeeping(tmp_path, tiny_data):
    cfg = dataclasses.replace(SMALL, total_iterations=5, checkpoint_every=2)
    res = train(cfg, tiny_data, tiny_data, out_dir=tmp_path)
    rows = list(csv.reader(open(tmp_path / "losses.csv")))
    assert rows[0] == ["iter", "L_R", "L_G", "L_D", "L_P", "L"]
    assert len(rows) == 6 and [r[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]
    for r in rows[1:]:
        vals = [float(v) for v in r[1:]]
        assert all(math.isfinite(v) for v in vals)
        assert abs(vals[0] + vals[1] + vals[2] + 10 * vals[3] - vals[4]) < 1e-5
    assert sorted(p.name for p in tmp_path.glob("ckpt_*")) == ["ckpt_000002.mmdt", "ckpt_000004.mmdt",
                                                               "ckpt_000005.mmdt"]
    assert len((tmp_path / "train.log").read_text().splitlines()) == 2
    assert res.val_history and res.best_checkpoint
    _, meta = load_checkpoint(tmp_path / "ckpt_000005.mmdt")
    assert meta["kind"] == "disentangle" and meta["iteration"] == "5"
    model = load_disentangler(tmp_path / "ckpt_000005.mmdt")
    for k, v in res.state.disentangler.state_dict().items():
        assert torch.equal(model.state_dict()[k], v), k


def test_train_zero_iterations_is_a_no_op(tmp_path, tiny_data):
    res = train(dataclasses.replace(SMALL, total_iterations=0), tiny_data, out_dir=tmp_path)
    assert res.state.iteration == 0 and res.history == []
    ref = create_state(SMALL, res.state.epoch_size)
    assert _same(_snapshot(res.state.disentangler), _snapshot(ref.disentangler))
    assert not list(tmp_path.glob("ckpt_*"))


def test_train_is_deterministic(tmp_path, tiny_data):
    train(SMALL, tiny_data, out_dir=tmp_path / "a")
    train(SMALL, tiny_data, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()
