"""Training procedures: Gaussian noise training, adversarial generator
training, and joint adversarial noise training with experience replay and
generator restarts."""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .data import BatchSampler, Dataset
from .errors import ConfigError, InputError
from .nets import Classifier, NoiseGenerator, ParamSet, build_generator, generator_from_params
from .optim import Adam, SgdMomentum
from .perturb import adversarial_batch_graph, gaussian_perturb, sample_adversarial_noise
from .rng import Rng
from .tensor import Tensor, backward, softmax_cross_entropy

__all__ = ["BatchPlan", "ReplayBuffer", "MetricsLog", "gnt_step",
           "train_generator", "ant_step", "restart_generator",
           "train_vanilla", "train_gnt", "train_ant", "TrainSettings"]


@dataclass(frozen=True)
class BatchPlan:
    """Batch composition fractions; realized counts round to nearest with the
    remainder routed to the clean share."""
    clean: float
    current: float = 0.0
    replay: float = 0.0

    def __post_init__(self):
        fracs = (self.clean, self.current, self.replay)
        if any(f < 0 for f in fracs):
            raise ConfigError("BatchPlan fractions must be nonnegative")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"BatchPlan fractions sum to {sum(fracs)}, expected 1")

    def counts(self, batch_size: int) -> tuple[int, int, int]:
        n_cur = round(self.current * batch_size)
        n_rep = round(self.replay * batch_size)
        n_clean = batch_size - n_cur - n_rep
        if n_clean < 0:
            raise ConfigError("BatchPlan rounds to more samples than the batch holds")
        return n_clean, n_cur, n_rep


GNT_PLAN = BatchPlan(0.5, 0.5, 0.0)
ANT_PLAN = BatchPlan(0.5, 0.3, 0.2)


class ReplayBuffer:
    """Ring of generator parameter snapshots."""

    def __init__(self, capacity: int = 32, snapshot_interval: int = 50):
        if capacity < 1 or snapshot_interval < 1:
            raise ConfigError("ReplayBuffer: capacity and interval must be >= 1")
        self.capacity = capacity
        self.snapshot_interval = snapshot_interval
        self._snapshots: list[ParamSet] = []

    def __len__(self):
        return len(self._snapshots)

    def append(self, params: ParamSet):
        self._snapshots.append(params.copy())
        if len(self._snapshots) > self.capacity:
            self._snapshots.pop(0)

    def sample(self, rng: Rng) -> ParamSet:
        if not self._snapshots:
            raise InputError("replay buffer is empty")
        return self._snapshots[rng.choice(len(self._snapshots))]


class MetricsLog:
    """CSV metrics with columns (step, epoch, split, metric, value)."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(["step", "epoch", "split", "metric", "value"])
        else:
            self._fh = self._writer = None

    def log(self, step, epoch, split, metric, value):
        row = (step, epoch, split, metric, float(value))
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow([step, epoch, split, metric, repr(float(value))])

    def close(self):
        if self._fh is not None:
            self._fh.flush()
            self._fh.close()
            self._fh = self._writer = None


@contextmanager
def frozen(params: ParamSet):
    """Temporarily stop gradients from flowing into a parameter set."""
    params.set_requires_grad(False)
    try:
        yield
    finally:
        params.set_requires_grad(True)


def _classifier_loss(clf: Classifier, images: np.ndarray, labels: np.ndarray) -> Tensor:
    logits = clf.forward(Tensor(images))
    return softmax_cross_entropy(logits, labels)


def gnt_step(clf: Classifier, images: np.ndarray, labels: np.ndarray,
             sigmas, plan: BatchPlan, opt: SgdMomentum, rng: Rng) -> float:
    """One Gaussian-noise-training step; the noisy share of the batch gets
    additive N(0, sigma^2) noise with sigma drawn per image when a set is given."""
    b = images.shape[0]
    if b == 0:
        raise InputError("gnt_step: empty batch")
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=np.float64))
    n_clean, n_noisy, _ = plan.counts(b)
    batch = images.copy()
    for i in range(n_clean, n_clean + n_noisy):
        srng = rng.derive("gnt-noise", i)
        sigma = float(sigmas[srng.choice(len(sigmas))]) if len(sigmas) > 1 else float(sigmas[0])
        batch[i] = gaussian_perturb(images[i], sigma, srng.derive("draw"))
    loss = _classifier_loss(clf, batch, labels)
    opt.zero_grad()
    backward(loss)
    opt.step()
    return float(loss.data)


def train_generator(clf: Classifier, gen: NoiseGenerator, data: Dataset,
                    eps: float, steps: int, opt: Adam, rng: Rng,
                    batch_size: int = 64) -> NoiseGenerator:
    """Gradient-ascent steps on the generator against a frozen classifier."""
    if steps == 0:
        return gen
    n = len(data)
    with frozen(clf.params):
        for step in range(steps):
            idx = rng.derive("gen-batch", step).integers(0, n, batch_size)
            x = data.images[idx]
            y = data.labels[idx]
            x_adv = adversarial_batch_graph(gen, x, eps, rng.derive("gen-z", step))
            loss = softmax_cross_entropy(clf.forward(x_adv), y)
            opt.zero_grad()
            backward(loss)
            opt.step()
    return gen


def _compose_ant_batch(clf: Classifier, gen: NoiseGenerator, replay: ReplayBuffer,
                       images: np.ndarray, eps: float, plan: BatchPlan,
                       rng: Rng) -> np.ndarray:
    """Clean / current-generator / replay-snapshot composition. An empty
    replay buffer routes its share to the current generator."""
    b = images.shape[0]
    n_clean, n_cur, n_rep = plan.counts(b)
    if n_rep and len(replay) == 0:
        n_cur += n_rep
        n_rep = 0
    batch = images.copy()
    pos = n_clean
    for i in range(n_cur):
        batch[pos] = sample_adversarial_noise(gen, images[pos], eps,
                                              rng.derive("ant-cur", pos))
        pos += 1
    for i in range(n_rep):
        snap = replay.sample(rng.derive("ant-replay-pick", pos))
        snap_gen = generator_from_params(gen.variant, gen.channels,
                                         gen.sigma_init, snap)
        batch[pos] = sample_adversarial_noise(snap_gen, images[pos], eps,
                                              rng.derive("ant-replay", pos))
        pos += 1
    return batch


def ant_step(clf: Classifier, gen: NoiseGenerator, replay: ReplayBuffer,
             images: np.ndarray, labels: np.ndarray, eps: float,
             plan: BatchPlan, opt_c: SgdMomentum, opt_g: Adam,
             inner_steps: int, rng: Rng, step_index: int = 0) -> float:
    """Inner generator ascent on the perturbed sub-batch, then one classifier
    descent step on the composed batch. Snapshots the generator into the
    replay ring every snapshot_interval steps."""
    b = images.shape[0]
    if b == 0:
        raise InputError("ant_step: empty batch")
    n_clean, n_cur, _ = plan.counts(b)

    if inner_steps > 0 and n_cur > 0:
        xs = images[n_clean:n_clean + n_cur]
        ys = labels[n_clean:n_clean + n_cur]
        with frozen(clf.params):
            for it in range(inner_steps):
                x_adv = adversarial_batch_graph(gen, xs, eps,
                                                rng.derive("ant-inner-z", it))
                loss_g = softmax_cross_entropy(clf.forward(x_adv), ys)
                opt_g.zero_grad()
                backward(loss_g)
                opt_g.step()

    with frozen(gen.params):
        batch = _compose_ant_batch(clf, gen, replay, images, eps, plan,
                                   rng.derive("ant-compose"))
        loss = _classifier_loss(clf, batch, labels)
        opt_c.zero_grad()
        backward(loss)
        opt_c.step()

    if plan.replay > 0 and (step_index + 1) % replay.snapshot_interval == 0:
        replay.append(gen.params)
    return float(loss.data)


def restart_generator(clf: Classifier, gen: NoiseGenerator, replay: ReplayBuffer,
                      data: Dataset, eps: float, warmup_steps: int, rng: Rng,
                      gen_lr: float = 1e-4, batch_size: int = 64) -> NoiseGenerator:
    """Snapshot the incumbent, then install a freshly trained generator."""
    replay.append(gen.params)
    fresh = build_generator(gen.variant, gen.channels, rng.derive("restart-init"),
                            gen.sigma_init)
    opt = Adam(fresh.params.tensors(), lr=gen_lr, maximize=True)
    return train_generator(clf, fresh, data, eps, warmup_steps, opt,
                           rng.derive("restart-train"), batch_size)


# ---------------------------------------------------------------------------
# full training loops

@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 300
    lr: float = 1e-3
    momentum: float = 0.9
    lr_decay_epoch: int = -1          # -1: never
    lr_decay_factor: float = 0.1
    # gnt
    sigmas: tuple = (0.5,)
    plan_clean: float = 0.5
    # ant
    eps: float = 10.0
    gen_lr: float = 1e-4
    inner_steps: int = 1
    replay_capacity: int = 32
    snapshot_interval: int = 20
    restart_interval: int = 0         # outer steps between restarts; 0 = never
    restart_warmup: int = 200
    use_replay: bool = True
    eval_every_epochs: int = 0
    seed: int = 0


def _epoch_loop(data: Dataset, settings: TrainSettings, step_fn, log: MetricsLog,
                eval_fn=None):
    sampler = BatchSampler(len(data), settings.batch_size, settings.seed)
    step = 0
    for epoch in range(settings.epochs):
        if settings.lr_decay_epoch >= 0 and epoch == settings.lr_decay_epoch:
            step_fn.decay()
        for idx in sampler.epoch(epoch):
            loss = step_fn(data.images[idx], data.labels[idx], step)
            log.log(step, epoch, "train", "loss", loss)
            step += 1
        if eval_fn is not None and settings.eval_every_epochs > 0 and \
                (epoch + 1) % settings.eval_every_epochs == 0:
            for metric, value in eval_fn().items():
                log.log(step, epoch, "val", metric, value)
    return step


class _StepFn:
    def __init__(self, fn, opt, decay_factor):
        self.fn = fn
        self.opt = opt
        self.decay_factor = decay_factor

    def __call__(self, xb, yb, step):
        return self.fn(xb, yb, step)

    def decay(self):
        self.opt.lr *= self.decay_factor


def train_vanilla(clf: Classifier, data: Dataset, settings: TrainSettings,
                  log: MetricsLog | None = None, eval_fn=None) -> Classifier:
    log = log or MetricsLog()
    opt = SgdMomentum(clf.params.tensors(), settings.lr, settings.momentum)

    def step(xb, yb, i):
        loss = _classifier_loss(clf, xb, yb)
        opt.zero_grad()
        backward(loss)
        opt.step()
        return float(loss.data)

    _epoch_loop(data, settings, _StepFn(step, opt, settings.lr_decay_factor),
                log, eval_fn)
    return clf


def train_gnt(clf: Classifier, data: Dataset, settings: TrainSettings,
              log: MetricsLog | None = None, eval_fn=None) -> Classifier:
    log = log or MetricsLog()
    opt = SgdMomentum(clf.params.tensors(), settings.lr, settings.momentum)
    plan = BatchPlan(settings.plan_clean, 1.0 - settings.plan_clean, 0.0)
    master = Rng(settings.seed, 0).derive("gnt")

    def step(xb, yb, i):
        return gnt_step(clf, xb, yb, settings.sigmas, plan, opt,
                        master.derive("step", i))

    _epoch_loop(data, settings, _StepFn(step, opt, settings.lr_decay_factor),
                log, eval_fn)
    return clf


def train_ant(clf: Classifier, data: Dataset, settings: TrainSettings,
              log: MetricsLog | None = None, eval_fn=None,
              gen_variant: str = "k1") -> tuple[Classifier, NoiseGenerator, ReplayBuffer]:
    log = log or MetricsLog()
    master = Rng(settings.seed, 0).derive("ant")
    channels = data.images.shape[1]
    gen = build_generator(gen_variant, channels, master.derive("gen-init"),
                          sigma_init=0.5)
    replay = ReplayBuffer(settings.replay_capacity, settings.snapshot_interval)
    opt_c = SgdMomentum(clf.params.tensors(), settings.lr, settings.momentum)
    opt_g = Adam(gen.params.tensors(), settings.gen_lr, maximize=True)
    plan = (BatchPlan(settings.plan_clean, 1.0 - settings.plan_clean, 0.0)
            if not settings.use_replay else ANT_PLAN)

    state = {"gen": gen, "opt_g": opt_g}

    def step(xb, yb, i):
        if settings.restart_interval > 0 and i > 0 and \
                i % settings.restart_interval == 0:
            state["gen"] = restart_generator(
                clf, state["gen"], replay, data, settings.eps,
                settings.restart_warmup, master.derive("restart", i),
                settings.gen_lr, min(64, settings.batch_size))
            state["opt_g"] = Adam(state["gen"].params.tensors(),
                                  settings.gen_lr, maximize=True)
        return ant_step(clf, state["gen"], replay, xb, yb, settings.eps, plan,
                        opt_c, state["opt_g"], settings.inner_steps,
                        master.derive("step", i), step_index=i)

    _epoch_loop(data, settings, _StepFn(step, opt_c, settings.lr_decay_factor),
                log, eval_fn)
    return clf, state["gen"], replay
