"""Robustness measurement: minimal-perturbation line search, corruption-suite
accuracy, mean corruption error, and PGD attacks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, InputError
from .nets import Classifier, NoiseGenerator
from .perturb import (CORRUPTION_KINDS, CorruptionSpec, NOISE_KINDS, corrupt,
                      project_sphere_clipped)
from .rng import Rng
from .tensor import Tensor, backward, softmax_cross_entropy

__all__ = ["EpsilonStarResult", "EvalReport", "epsilon_star", "clean_accuracy",
           "corruption_accuracy", "mce", "pgd_attack", "pgd_accuracy",
           "inf_median"]


def inf_median(values) -> float:
    """Median with INF entries ranked above all finite values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InputError("median of empty set")
    return float(np.median(arr))


@dataclass
class EpsilonStarResult:
    family: str
    norms: np.ndarray           # per-image minimal norm, inf where unreachable
    median: float
    sample_count: int


@dataclass
class EvalReport:
    accuracy: dict = field(default_factory=dict)   # kind -> [acc per severity]
    clean_accuracy: float = float("nan")

    def mean_accuracy(self, kinds=None) -> float:
        kinds = list(kinds) if kinds is not None else list(self.accuracy)
        cells = [a for k in kinds for a in self.accuracy[k]]
        return float(np.mean(cells))

    def non_noise_mean(self) -> float:
        kinds = [k for k in self.accuracy if k not in NOISE_KINDS]
        return self.mean_accuracy(kinds) if kinds else float("nan")

    def errors(self) -> dict:
        return {k: [1.0 - a for a in accs] for k, accs in self.accuracy.items()}

    def to_csv_rows(self):
        rows = [("kind", "severity", "accuracy")]
        for kind in self.accuracy:
            for s, acc in enumerate(self.accuracy[kind], 1):
                rows.append((kind, s, acc))
        return rows

    def summary_json(self, extra=None) -> str:
        payload = {
            "clean_accuracy": self.clean_accuracy,
            "mean_accuracy": self.mean_accuracy(),
            "non_noise_mean_accuracy": self.non_noise_mean(),
            "per_kind": {k: float(np.mean(v)) for k, v in self.accuracy.items()},
        }
        if extra:
            payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True)


def _batched_predict(clf: Classifier, images: np.ndarray, batch: int = 256) -> np.ndarray:
    preds = [clf.predict(images[i:i + batch]) for i in range(0, len(images), batch)]
    return np.concatenate(preds)


def clean_accuracy(clf: Classifier, data: Dataset) -> float:
    return float((_batched_predict(clf, data.images) == data.labels).mean())


# ---------------------------------------------------------------------------
# epsilon-star line search

def _direction(source, x: np.ndarray, rng: Rng) -> np.ndarray:
    if source == "gaussian":
        return rng.normal(x.shape, np.float64)
    if source == "uniform":
        return rng.uniform(-1.0, 1.0, x.shape, np.float64)
    raise ConfigError(f"unknown direction source {source!r}")


def epsilon_star(clf: Classifier, data: Dataset, direction_source,
                 m_max: float | None = None, tol: float = 1e-3,
                 rng: Rng | None = None, m0: float = 0.1) -> EpsilonStarResult:
    """Per image: sample one direction, geometric sweep to the first
    misclassifying sphere radius, then bisect to relative tolerance tol.
    Images the search cannot flip contribute INF."""
    if len(data) == 0:
        raise InputError("epsilon_star: empty dataset")
    if tol <= 0:
        raise InputError("epsilon_star: tol must be positive")
    rng = rng or Rng(0, 0)
    n_pix = int(np.prod(data.images.shape[1:]))
    if m_max is None:
        m_max = 2.0 * math.sqrt(n_pix)

    family = direction_source if isinstance(direction_source, str) else "adversarial"
    norms = np.empty(len(data), dtype=np.float64)

    for i in range(len(data)):
        x = data.images[i]
        y = int(data.labels[i])
        irng = rng.derive("eps-star", i)
        if int(clf.predict(x[None])[0]) != y:
            norms[i] = 0.0
            continue
        if isinstance(direction_source, NoiseGenerator):
            d = direction_source.sample(x[None].shape, irng)[0].astype(np.float64)
        else:
            d = _direction(direction_source, x, irng)
        if not np.any(d):
            norms[i] = np.inf
            continue

        def perturbed(m):
            delta, proj = project_sphere_clipped(x, d, m)
            return np.clip(x + delta, 0.0, 1.0), proj

        # geometric sweep
        lo, hi, found = 0.0, None, False
        m = m0
        while m <= m_max:
            img, proj = perturbed(m)
            if int(clf.predict(img[None])[0]) != y:
                hi, found = m, True
                break
            lo = m
            if proj.saturated:
                break
            m *= 2.0
        if not found:
            norms[i] = np.inf
            continue

        # bisection on the magnitude
        while hi - lo > tol * hi:
            mid = 0.5 * (lo + hi)
            img, _ = perturbed(mid)
            if int(clf.predict(img[None])[0]) != y:
                hi = mid
            else:
                lo = mid
        img, proj = perturbed(hi)
        norms[i] = proj.achieved_norm

    return EpsilonStarResult(family, norms, inf_median(norms), len(data))


# ---------------------------------------------------------------------------
# corruption suite

def corruption_accuracy(clf: Classifier, data: Dataset, kinds=None,
                        severities=(1, 2, 3, 4, 5), master_seed: int = 0) -> EvalReport:
    kinds = list(kinds) if kinds is not None else list(CORRUPTION_KINDS)
    if not kinds:
        raise ConfigError("corruption_accuracy: kinds must be nonempty")
    for k in kinds:
        if k not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {k!r}")
    report = EvalReport(clean_accuracy=clean_accuracy(clf, data))
    base = Rng(master_seed, 0)
    for kind in kinds:
        accs = []
        for sev in severities:
            corrupted = np.stack([
                corrupt(data.images[i],
                        CorruptionSpec(kind, sev, base.derive("sample", i).stream))
                for i in range(len(data))])
            acc = float((_batched_predict(clf, corrupted) == data.labels).mean())
            accs.append(acc)
        report.accuracy[kind] = accs
    return report


def mce(model_errors: dict, baseline_errors: dict) -> tuple[dict, float]:
    """Per-kind corruption error (percent) and the mean over kinds.

    CE_kind = sum_severities(model error) / sum_severities(baseline error).
    """
    if set(model_errors) != set(baseline_errors):
        raise ConfigError("mce: model and baseline kinds differ")
    ces = {}
    for kind, errs in model_errors.items():
        base = baseline_errors[kind]
        if len(errs) != len(base):
            raise ConfigError(f"mce: severity count mismatch for {kind}")
        denom = float(np.sum(base))
        if denom <= 0:
            raise InputError(f"mce: baseline error sum for {kind} is zero")
        ces[kind] = 100.0 * float(np.sum(errs)) / denom
    return ces, float(np.mean(list(ces.values())))


# ---------------------------------------------------------------------------
# PGD

def _input_grad(clf: Classifier, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    x = Tensor(images, requires_grad=True)
    loss = softmax_cross_entropy(clf.forward(x), labels)
    backward(loss)
    return x.grad


def pgd_attack(clf: Classifier, x: np.ndarray, y: np.ndarray, norm: str,
               eps: float, step: float, iters: int,
               random_start: bool = False, rng: Rng | None = None):
    """Batched projected gradient ascent on the cross-entropy.

    linf: sign-gradient steps, projected to the eps-box intersected with [0,1].
    l2: normalized-gradient steps, projected to the eps-ball intersected with [0,1].
    Returns (x_adv, success) with success = prediction flipped per sample.
    """
    if norm not in ("linf", "l2"):
        raise ConfigError(f"pgd_attack: norm must be linf or l2, got {norm!r}")
    x0 = x.astype(np.float32)
    b = x0.shape[0]
    x_adv = x0.copy()
    if random_start and eps > 0:
        rng = rng or Rng(0, 0)
        if norm == "linf":
            x_adv = x0 + rng.uniform(-eps, eps, x0.shape, np.float32)
        else:
            d = rng.normal(x0.shape, np.float32)
            flat = d.reshape(b, -1)
            flat *= (eps * rng.uniform(0, 1, (b, 1), np.float32) **
                     (1.0 / flat.shape[1])) / np.maximum(
                np.linalg.norm(flat, axis=1, keepdims=True), 1e-12)
            x_adv = x0 + d
        x_adv = _project(x_adv, x0, norm, eps)

    if eps > 0:
        frozen_flags = [t.requires_grad for t in clf.params.tensors()]
        clf.params.set_requires_grad(False)
        try:
            for _ in range(iters):
                g = _input_grad(clf, x_adv, y)
                if norm == "linf":
                    x_adv = x_adv + np.float32(step) * np.sign(g, dtype=np.float32)
                else:
                    gn = np.linalg.norm(g.reshape(b, -1), axis=1).reshape(b, 1, 1, 1)
                    x_adv = x_adv + np.float32(step) * g / np.maximum(gn, 1e-12)
                x_adv = _project(x_adv, x0, norm, eps)
        finally:
            for t, f in zip(clf.params.tensors(), frozen_flags):
                t.requires_grad = f

    success = _batched_predict(clf, x_adv) != y
    return x_adv, success


def _project(x_adv, x0, norm, eps):
    if norm == "linf":
        x_adv = np.clip(x_adv, x0 - np.float32(eps), x0 + np.float32(eps))
    else:
        b = x0.shape[0]
        delta = (x_adv - x0).reshape(b, -1)
        norms = np.linalg.norm(delta.astype(np.float64), axis=1)
        factor = np.minimum(1.0, eps / np.maximum(norms, 1e-12)).astype(np.float32)
        x_adv = x0 + (delta * factor[:, None]).reshape(x0.shape)
    return np.clip(x_adv, 0.0, 1.0)


def pgd_accuracy(clf: Classifier, data: Dataset, norm: str, eps: float,
                 step: float, iters: int, batch: int = 128) -> float:
    correct = 0
    for i in range(0, len(data), batch):
        _, success = pgd_attack(clf, data.images[i:i + batch],
                                data.labels[i:i + batch], norm, eps, step, iters)
        correct += int((~success).sum())
    return correct / len(data)
