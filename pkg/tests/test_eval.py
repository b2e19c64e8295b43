import math

import numpy as np
import pytest

from antforge.data import Dataset, synth_blobs
from antforge.errors import ConfigError, InputError
from antforge.evaluate import (EvalReport, clean_accuracy, corruption_accuracy,
                               epsilon_star, inf_median, mce, pgd_accuracy,
                               pgd_attack)
from antforge.nets import build_classifier, small_test_spec
from antforge.rng import Rng
from antforge.train import TrainSettings, train_vanilla

SHAPE = (1, 16, 16)
CLASSES = 4


def _trained_clf(seed=0, n=120, epochs=12):
    data = synth_blobs(n, classes=CLASSES, image_size=16, noise=0.02, seed=seed)
    clf = build_classifier(small_test_spec(SHAPE, CLASSES), Rng(seed, 0))
    train_vanilla(clf, data, TrainSettings(epochs=epochs, batch_size=40,
                                           lr=1e-2, seed=seed))
    return clf, data


# -- inf-aware median ---------------------------------------------------------

def test_inf_median_basics():
    assert inf_median([1.0, 2.0, 3.0]) == 2.0
    assert inf_median([1.0, np.inf, np.inf]) == np.inf
    assert inf_median([1.0, 3.0, np.inf]) == 3.0
    with pytest.raises(InputError):
        inf_median([])


def test_inf_median_infs_rank_above_finite():
    # with half infinite, the even-count median straddles the largest finite value
    assert inf_median([5.0, np.inf]) == np.inf
    assert inf_median([1.0, 2.0, np.inf, np.inf]) == np.inf


# -- epsilon-star -------------------------------------------------------------

def test_epsilon_star_zero_for_misclassified():
    clf, data = _trained_clf(0)
    # mislabel everything: every image already "misclassified" -> eps* = 0
    wrong = Dataset(data.images[:8], (data.labels[:8] + 1) % CLASSES)
    res = epsilon_star(clf, wrong, "gaussian", rng=Rng(1, 0))
    assert (res.norms == 0.0).all()
    assert res.median == 0.0


class _ConstantHead:
    """Stub classifier whose prediction never changes."""

    def predict(self, images):
        return np.zeros(len(images), dtype=np.int64)


def test_epsilon_star_unreachable_gives_inf():
    data = Dataset(np.full((4, *SHAPE), 0.5, np.float32),
                   np.zeros(4, np.int64))
    res = epsilon_star(_ConstantHead(), data, "gaussian", rng=Rng(2, 0))
    assert np.isinf(res.norms).all()
    assert math.isinf(res.median)


def test_epsilon_star_norm_achieves_flip_within_tol():
    clf, data = _trained_clf(1)
    sub = data.subset(range(12))
    res = epsilon_star(clf, sub, "gaussian", tol=1e-3, rng=Rng(3, 0))
    finite = np.isfinite(res.norms) & (res.norms > 0)
    assert finite.any()
    # the reported norm must actually flip the prediction when replayed
    from antforge.perturb import project_sphere_clipped
    for i in np.flatnonzero(finite):
        x = sub.images[i]
        d = Rng(3, 0).derive("eps-star", int(i)).normal(x.shape, np.float64)
        delta, proj = project_sphere_clipped(x, d, float(res.norms[i]) * (1 + 5e-3))
        img = np.clip(x + delta, 0.0, 1.0)
        assert int(clf.predict(img[None])[0]) != int(sub.labels[i])


def test_epsilon_star_median_monotone_in_robustness():
    # training longer -> larger flip distances on the training set
    weak, data = _trained_clf(2, epochs=2)
    strong, _ = _trained_clf(2, epochs=20)
    sub = data.subset(range(16))
    m_weak = epsilon_star(weak, sub, "gaussian", rng=Rng(4, 0)).median
    m_strong = epsilon_star(strong, sub, "gaussian", rng=Rng(4, 0)).median
    assert m_strong > m_weak


def test_epsilon_star_validation():
    clf, data = _trained_clf(0)
    with pytest.raises(InputError):
        epsilon_star(clf, data.subset([]), "gaussian")
    with pytest.raises(InputError):
        epsilon_star(clf, data.subset([0]), "gaussian", tol=0.0)
    with pytest.raises(ConfigError):
        epsilon_star(clf, data.subset([0]), "no-such-family")


# -- corruption accuracy and mce ----------------------------------------------

def test_corruption_accuracy_report_shape_and_determinism():
    clf, data = _trained_clf(0)
    sub = data.subset(range(20))
    r1 = corruption_accuracy(clf, sub, kinds=["gaussian_noise", "brightness"],
                             severities=(1, 3), master_seed=9)
    r2 = corruption_accuracy(clf, sub, kinds=["gaussian_noise", "brightness"],
                             severities=(1, 3), master_seed=9)
    assert r1.accuracy == r2.accuracy
    assert set(r1.accuracy) == {"gaussian_noise", "brightness"}
    assert all(len(v) == 2 for v in r1.accuracy.values())
    assert 0.0 <= r1.mean_accuracy() <= 1.0
    with pytest.raises(ConfigError):
        corruption_accuracy(clf, sub, kinds=["bogus"])


def test_report_non_noise_mean_excludes_noise_kinds():
    r = EvalReport(accuracy={"gaussian_noise": [0.0, 0.0],
                             "brightness": [0.8, 0.6],
                             "rotate": [1.0, 0.6]})
    assert r.non_noise_mean() == pytest.approx(0.75)
    assert r.mean_accuracy() == pytest.approx(0.5)


def test_mce_identity_and_worked_example():
    base = {"a": [0.1, 0.2], "b": [0.3, 0.3]}
    ces, mean = mce(base, base)
    assert ces == {"a": 100.0, "b": 100.0} and mean == 100.0
    # model errors 0.1+0.1 over baseline 0.2+0.1 -> 200/3 percent
    ces, mean = mce({"a": [0.1, 0.1]}, {"a": [0.2, 0.1]})
    assert mean == pytest.approx(200.0 / 3.0)


def test_mce_validation():
    with pytest.raises(ConfigError):
        mce({"a": [0.1]}, {"b": [0.1]})
    with pytest.raises(ConfigError):
        mce({"a": [0.1]}, {"a": [0.1, 0.2]})
    with pytest.raises(InputError):
        mce({"a": [0.1]}, {"a": [0.0]})


# -- pgd ------------------------------------------------------------------------

def test_pgd_zero_eps_is_clean_accuracy():
    clf, data = _trained_clf(0)
    sub = data.subset(range(20))
    acc = pgd_accuracy(clf, sub, "linf", eps=0.0, step=0.01, iters=5)
    assert acc == pytest.approx(clean_accuracy(clf, sub))


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_pgd_feasible_and_hurts(norm):
    clf, data = _trained_clf(0)
    sub = data.subset(range(24))
    eps = 0.25 if norm == "linf" else 2.0
    x_adv, success = pgd_attack(clf, sub.images, sub.labels, norm,
                                eps=eps, step=eps / 5, iters=20)
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0
    delta = (x_adv - sub.images).reshape(len(sub.images), -1).astype(np.float64)
    if norm == "linf":
        assert np.abs(delta).max() <= eps + 1e-6
    else:
        assert np.linalg.norm(delta, axis=1).max() <= eps * (1 + 1e-6)
    adv_acc = float((~success).mean())
    assert adv_acc < clean_accuracy(clf, sub)


def test_pgd_leaves_classifier_grad_flags_intact():
    clf, data = _trained_clf(0)
    pgd_attack(clf, data.images[:4], data.labels[:4], "linf",
               eps=0.1, step=0.02, iters=3)
    assert all(t.requires_grad for t in clf.params.tensors())


def test_pgd_rejects_unknown_norm():
    clf, data = _trained_clf(0)
    with pytest.raises(ConfigError):
        pgd_attack(clf, data.images[:2], data.labels[:2], "l7",
                   eps=0.1, step=0.01, iters=1)
