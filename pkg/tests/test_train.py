import numpy as np
import pytest
from scipy import stats

from antforge.data import synth_blobs
from antforge.errors import ConfigError, InputError
from antforge.nets import (ParamSet, build_classifier, build_generator,
                           small_test_spec)
from antforge.optim import Adam, SgdMomentum
from antforge.rng import Rng
from antforge.tensor import Tensor, backward
from antforge.train import (ANT_PLAN, GNT_PLAN, BatchPlan, MetricsLog,
                            ReplayBuffer, TrainSettings, ant_step, frozen,
                            gnt_step, restart_generator, train_ant,
                            train_generator, train_gnt, train_vanilla)

SHAPE = (1, 16, 16)
CLASSES = 4


def _clf(seed=0):
    return build_classifier(small_test_spec(SHAPE, CLASSES), Rng(seed, 0))


def _data(n=120, seed=1, noise=0.05):
    return synth_blobs(n, classes=CLASSES, image_size=16, noise=noise, seed=seed)


# -- batch plans -------------------------------------------------------------

def test_batch_plan_counts():
    assert GNT_PLAN.counts(300) == (150, 150, 0)
    assert ANT_PLAN.counts(300) == (150, 90, 60)
    assert BatchPlan(1.0).counts(7) == (7, 0, 0)
    # odd sizes: remainder goes to the clean share
    assert sum(GNT_PLAN.counts(301)) == 301


def test_batch_plan_validation():
    with pytest.raises(ConfigError):
        BatchPlan(0.5, 0.3, 0.3)
    with pytest.raises(ConfigError):
        BatchPlan(1.2, -0.2, 0.0)


# -- replay buffer -----------------------------------------------------------

def test_replay_buffer_ring_and_copy_semantics():
    buf = ReplayBuffer(capacity=3, snapshot_interval=1)
    ps = ParamSet(0)
    t = ps.add("w", np.zeros(2, np.float32))
    for i in range(5):
        t.data[:] = i
        buf.append(ps)
    assert len(buf) == 3
    # append copies: later mutation must not leak into stored snapshots
    t.data[:] = 99
    stored = sorted(buf._snapshots[i]["w"].data[0] for i in range(3))
    assert stored == [2.0, 3.0, 4.0]


def test_replay_buffer_empty_sample_raises():
    with pytest.raises(InputError):
        ReplayBuffer().sample(Rng(0, 0))


def test_replay_sampling_is_uniform():
    buf = ReplayBuffer(capacity=8, snapshot_interval=1)
    for i in range(8):
        ps = ParamSet(0)
        ps.add("w", np.full(1, float(i), np.float32))
        buf.append(ps)
    rng = Rng(5, 0)
    draws = [int(buf.sample(rng.derive("s", i))["w"].data[0]) for i in range(4000)]
    counts = np.bincount(draws, minlength=8)
    chi2 = ((counts - 500.0) ** 2 / 500.0).sum()
    # chi-square goodness of fit, 7 dof, alpha = 0.01
    assert chi2 < stats.chi2.ppf(0.99, 7)


def test_replay_buffer_validation():
    with pytest.raises(ConfigError):
        ReplayBuffer(capacity=0)
    with pytest.raises(ConfigError):
        ReplayBuffer(snapshot_interval=0)


# -- gnt ---------------------------------------------------------------------

def test_gnt_sigma_zero_matches_supervised_step():
    data = _data(40)
    xb, yb = data.images[:20], data.labels[:20]
    a, b = _clf(3), _clf(3)
    opt_a = SgdMomentum(a.params.tensors(), lr=1e-2, momentum=0.9)
    opt_b = SgdMomentum(b.params.tensors(), lr=1e-2, momentum=0.9)
    gnt_step(a, xb, yb, [0.0], GNT_PLAN, opt_a, Rng(7, 0))
    from antforge.tensor import softmax_cross_entropy
    loss = softmax_cross_entropy(b.forward(Tensor(xb)), yb)
    opt_b.zero_grad()
    backward(loss)
    opt_b.step()
    assert a.params.equals(b.params)


def test_gnt_step_reduces_loss_over_steps():
    data = _data(60)
    clf = _clf(1)
    opt = SgdMomentum(clf.params.tensors(), lr=5e-3, momentum=0.9)
    rng = Rng(2, 0)
    losses = [gnt_step(clf, data.images[:30], data.labels[:30], [0.1],
                       GNT_PLAN, opt, rng.derive("s", i)) for i in range(30)]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_gnt_empty_batch_raises():
    clf = _clf()
    opt = SgdMomentum(clf.params.tensors())
    with pytest.raises(InputError):
        gnt_step(clf, np.zeros((0, *SHAPE), np.float32), np.zeros(0, np.int64),
                 [0.1], GNT_PLAN, opt, Rng(0, 0))


# -- freezing contracts ------------------------------------------------------

def test_frozen_context_restores_flags():
    clf = _clf()
    with frozen(clf.params):
        assert not any(t.requires_grad for t in clf.params.tensors())
    assert all(t.requires_grad for t in clf.params.tensors())


def test_generator_training_leaves_classifier_untouched():
    data = _data(40)
    clf = _clf(4)
    before = clf.params.copy()
    gen = build_generator("k1", 1, Rng(9, 0), sigma_init=0.5)
    opt = Adam(gen.params.tensors(), lr=1e-3, maximize=True)
    train_generator(clf, gen, data, eps=2.0, steps=5, opt=opt,
                    rng=Rng(9, 1), batch_size=16)
    assert clf.params.equals(before)
    assert all(t.requires_grad for t in clf.params.tensors())


def test_generator_ascent_increases_probe_loss():
    # After training the classifier a bit, generator ascent should raise the
    # classifier loss on a fixed probe batch relative to the fresh generator.
    data = _data(80, noise=0.0)
    clf = _clf(5)
    train_vanilla(clf, data, TrainSettings(epochs=20, batch_size=40, lr=1e-2, seed=0))
    xb, yb = data.images[:40], data.labels[:40]

    def probe_loss(g):
        from antforge.perturb import sample_adversarial_noise
        adv = np.stack([sample_adversarial_noise(g, xb[i], 2.0, Rng(11, i))
                        for i in range(len(xb))])
        from antforge.tensor import softmax_cross_entropy
        return float(softmax_cross_entropy(clf.forward(Tensor(adv)), yb).data)

    gen = build_generator("k3", 1, Rng(10, 0), sigma_init=0.5)
    base = probe_loss(gen)
    opt = Adam(gen.params.tensors(), lr=1e-3, maximize=True)
    train_generator(clf, gen, data, eps=2.0, steps=150, opt=opt,
                    rng=Rng(10, 1), batch_size=40)
    assert probe_loss(gen) > 1.5 * base


# -- ant ---------------------------------------------------------------------

def test_ant_step_snapshots_on_interval():
    data = _data(60)
    clf = _clf(6)
    gen = build_generator("k1", 1, Rng(6, 0), sigma_init=0.5)
    replay = ReplayBuffer(capacity=4, snapshot_interval=2)
    opt_c = SgdMomentum(clf.params.tensors(), lr=1e-3)
    opt_g = Adam(gen.params.tensors(), lr=1e-4, maximize=True)
    for i in range(4):
        ant_step(clf, gen, replay, data.images[:20], data.labels[:20], 2.0,
                 ANT_PLAN, opt_c, opt_g, inner_steps=1, rng=Rng(6, i + 1),
                 step_index=i)
    assert len(replay) == 2  # steps 1 and 3 (0-based) hit the interval


def test_ant_step_freezes_generator_during_classifier_update():
    data = _data(40)
    clf = _clf(7)
    gen = build_generator("k1", 1, Rng(7, 0), sigma_init=0.5)
    replay = ReplayBuffer(capacity=4, snapshot_interval=100)
    opt_c = SgdMomentum(clf.params.tensors(), lr=1e-3)
    opt_g = Adam(gen.params.tensors(), lr=1e-4, maximize=True)
    gen_before = gen.params.copy()
    clf_before = clf.params.copy()
    ant_step(clf, gen, replay, data.images[:20], data.labels[:20], 2.0,
             ANT_PLAN, opt_c, opt_g, inner_steps=0, rng=Rng(7, 1))
    # with zero inner steps the generator must not move, but the classifier must
    assert gen.params.equals(gen_before)
    assert not clf.params.equals(clf_before)


def test_restart_snapshots_incumbent_and_returns_fresh():
    data = _data(40)
    clf = _clf(8)
    gen = build_generator("k1", 1, Rng(8, 0), sigma_init=0.5)
    replay = ReplayBuffer(capacity=4, snapshot_interval=1)
    incumbent = gen.params.copy()
    fresh = restart_generator(clf, gen, replay, data, eps=2.0, warmup_steps=3,
                              rng=Rng(8, 1), batch_size=16)
    assert len(replay) == 1
    assert replay._snapshots[0].equals(incumbent)
    assert not fresh.params.equals(incumbent)


# -- full loops --------------------------------------------------------------

def test_train_vanilla_deterministic_per_seed():
    data = _data(60)
    s = TrainSettings(epochs=2, batch_size=20, lr=1e-3, seed=4)
    a = train_vanilla(_clf(2), data, s)
    b = train_vanilla(_clf(2), data, s)
    assert a.params.equals(b.params)


def test_train_gnt_runs_and_logs(tmp_path):
    data = _data(60)
    log = MetricsLog(tmp_path / "m.csv")
    s = TrainSettings(epochs=2, batch_size=20, lr=1e-3, sigmas=(0.08, 0.38), seed=4)
    train_gnt(_clf(2), data, s, log=log)
    log.close()
    text = (tmp_path / "m.csv").read_text()
    assert text.startswith("step,epoch,split,metric,value")
    assert len(text.splitlines()) == 1 + 2 * 3  # header + 3 steps/epoch * 2


def test_train_ant_without_replay_uses_two_way_plan():
    data = _data(40)
    s = TrainSettings(epochs=1, batch_size=20, lr=1e-3, eps=2.0, seed=1,
                      use_replay=False, snapshot_interval=1)
    clf, gen, replay = train_ant(_clf(3), data, s)
    assert len(replay) == 0


def test_train_ant_with_replay_populates_buffer():
    data = _data(120)
    s = TrainSettings(epochs=2, batch_size=20, lr=1e-3, eps=2.0, seed=1,
                      use_replay=True, snapshot_interval=3)
    clf, gen, replay = train_ant(_clf(3), data, s)
    assert len(replay) == 4  # 12 steps / interval 3


def test_lr_decay_applies_at_epoch():
    data = _data(40)
    s = TrainSettings(epochs=2, batch_size=20, lr=1e-2, lr_decay_epoch=1,
                      lr_decay_factor=0.1, seed=0)
    clf = _clf(0)
    opt_holder = {}
    orig = SgdMomentum.__init__

    def spy(self, *a, **k):
        orig(self, *a, **k)
        opt_holder["opt"] = self

    SgdMomentum.__init__ = spy
    try:
        train_vanilla(clf, data, s)
    finally:
        SgdMomentum.__init__ = orig
    assert opt_holder["opt"].lr == pytest.approx(1e-3)
