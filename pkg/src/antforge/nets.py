"""Classifier and noise-generator construction, plus checkpoint I/O.

The checkpoint format is a custom binary container: magic "ANTC", u32
version, u64 architecture fingerprint, u32 tensor count, then per tensor a
length-prefixed UTF-8 name, u32 rank, u64 extents and raw little-endian
float32 payload. Round trips are bit-identical.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (ConfigError, FingerprintMismatch, TruncatedCheckpoint,
                     VersionMismatch)
from .rng import Rng
from .tensor import Tensor

__all__ = ["Layer", "ArchSpec", "ParamSet", "Classifier", "NoiseGenerator",
           "madry_mnist_spec", "small_test_spec", "build_classifier",
           "build_generator", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"ANTC"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("conv", "linear", "relu", "flatten", "maxpool")


@dataclass(frozen=True)
class Layer:
    kind: str
    out: int = 0       # out channels (conv) / out features (linear)
    k: int = 0         # kernel size (conv)
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ArchSpec:
    """Layer list plus the input shape it composes against."""
    input_shape: tuple  # (C, H, W)
    layers: tuple = field(default_factory=tuple)

    def canonical(self) -> str:
        parts = ["in:" + "x".join(str(d) for d in self.input_shape)]
        for l in self.layers:
            parts.append(f"{l.kind}:{l.out}:{l.k}:{l.stride}:{l.pad}")
        return ";".join(parts)

    def fingerprint(self) -> int:
        digest = hashlib.sha256(self.canonical().encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")


def madry_mnist_spec(in_shape=(1, 28, 28), classes: int = 10) -> ArchSpec:
    """conv5x5-32, pool, conv5x5-64, pool, fc-1024, fc-classes."""
    return ArchSpec(tuple(in_shape), (
        Layer("conv", out=32, k=5, stride=1, pad=2),
        Layer("relu"),
        Layer("maxpool"),
        Layer("conv", out=64, k=5, stride=1, pad=2),
        Layer("relu"),
        Layer("maxpool"),
        Layer("flatten"),
        Layer("linear", out=1024),
        Layer("relu"),
        Layer("linear", out=classes),
    ))


def small_test_spec(in_shape=(1, 28, 28), classes: int = 10) -> ArchSpec:
    """Reduced classifier for fast desk-scale runs and tests."""
    return ArchSpec(tuple(in_shape), (
        Layer("conv", out=8, k=5, stride=1, pad=2),
        Layer("relu"),
        Layer("maxpool"),
        Layer("conv", out=16, k=5, stride=1, pad=2),
        Layer("relu"),
        Layer("maxpool"),
        Layer("flatten"),
        Layer("linear", out=64),
        Layer("relu"),
        Layer("linear", out=classes),
    ))


class ParamSet:
    """Ordered named parameter tensors with an architecture fingerprint."""

    def __init__(self, fingerprint: int):
        self.fingerprint = fingerprint & ((1 << 64) - 1)
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._items:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def names(self):
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def items(self):
        return self._items.items()

    def num_params(self) -> int:
        return sum(t.data.size for t in self._items.values())

    def zero_grad(self):
        for t in self._items.values():
            t.grad = None

    def set_requires_grad(self, flag: bool):
        for t in self._items.values():
            t.requires_grad = flag

    def copy(self) -> "ParamSet":
        out = ParamSet(self.fingerprint)
        for name, t in self._items.items():
            out.add(name, t.data.copy())
        return out

    def equals(self, other: "ParamSet") -> bool:
        if self.fingerprint != other.fingerprint or self.names() != other.names():
            return False
        return all(np.array_equal(self._items[n].data, other._items[n].data)
                   for n in self._items)


def _shape_after(spec: ArchSpec):
    """Propagate shapes through the layer list; raises ConfigError on mismatch."""
    c, h, w = spec.input_shape
    flat = None
    shapes = []
    for l in spec.layers:
        if l.kind == "conv":
            if flat is not None:
                raise ConfigError("conv after flatten does not compose")
            ho = (h + 2 * l.pad - l.k) // l.stride + 1
            wo = (w + 2 * l.pad - l.k) // l.stride + 1
            if l.k % 2 == 0 or ho < 1 or wo < 1:
                raise ConfigError(f"conv layer {l} does not fit {c}x{h}x{w}")
            c, h, w = l.out, ho, wo
        elif l.kind == "maxpool":
            if flat is not None or h % 2 or w % 2:
                raise ConfigError(f"maxpool needs even spatial dims, got {h}x{w}")
            h, w = h // 2, w // 2
        elif l.kind == "flatten":
            flat = c * h * w
        elif l.kind == "linear":
            if flat is None:
                raise ConfigError("linear requires a preceding flatten")
            flat_in, flat = flat, l.out
            shapes.append((flat_in, l.out))
            continue
        elif l.kind == "relu":
            pass
        else:
            raise ConfigError(f"unknown layer kind {l.kind!r}")
        shapes.append(None)
    return shapes, (flat if flat is not None else (c, h, w))


class Classifier:
    """ArchSpec plus ParamSet; forward(x) yields logits."""

    def __init__(self, spec: ArchSpec, params: ParamSet):
        if params.fingerprint != spec.fingerprint():
            raise FingerprintMismatch("parameters do not match the architecture")
        self.spec = spec
        self.params = params

    def forward(self, x: Tensor) -> Tensor:
        c = self.spec.input_shape[0]
        h = x
        conv_i = lin_i = 0
        for l in self.spec.layers:
            if l.kind == "conv":
                h = T.conv2d(h, self.params[f"conv{conv_i}.w"],
                             self.params[f"conv{conv_i}.b"], l.stride, l.pad)
                conv_i += 1
            elif l.kind == "relu":
                h = T.relu(h)
            elif l.kind == "maxpool":
                h = T.maxpool2x2(h)
            elif l.kind == "flatten":
                h = T.flatten(h)
            elif l.kind == "linear":
                h = T.linear(h, self.params[f"linear{lin_i}.w"],
                             self.params[f"linear{lin_i}.b"])
                lin_i += 1
        return h

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Argmax class per image, no tape."""
        logits = self.forward(Tensor(images))
        return logits.data.argmax(axis=1)


def build_classifier(spec: ArchSpec, rng: Rng, dtype=np.float32) -> Classifier:
    """He-normal conv/linear weights, zero biases."""
    _shape_after(spec)  # validates composition
    params = ParamSet(spec.fingerprint())
    c, h, w = spec.input_shape
    flat = None
    conv_i = lin_i = 0
    for l in spec.layers:
        if l.kind == "conv":
            fan_in = c * l.k * l.k
            std = np.sqrt(2.0 / fan_in)
            params.add(f"conv{conv_i}.w",
                       (rng.normal((l.out, c, l.k, l.k), np.float64) * std).astype(dtype))
            params.add(f"conv{conv_i}.b", np.zeros(l.out, dtype=dtype))
            conv_i += 1
            c = l.out
            h = (h + 2 * l.pad - l.k) // l.stride + 1
            w = (w + 2 * l.pad - l.k) // l.stride + 1
        elif l.kind == "maxpool":
            h, w = h // 2, w // 2
        elif l.kind == "flatten":
            flat = c * h * w
        elif l.kind == "linear":
            std = np.sqrt(2.0 / flat)
            params.add(f"linear{lin_i}.w",
                       (rng.normal((l.out, flat), np.float64) * std).astype(dtype))
            params.add(f"linear{lin_i}.b", np.zeros(l.out, dtype=dtype))
            lin_i += 1
            flat = l.out
    return Classifier(spec, params)


class NoiseGenerator:
    """Four-conv pointwise network with a residual input path scaled by sigma_init.

    variant "k1": all 1x1 kernels (pixelwise independent output).
    variant "k3": second layer uses a 3x3 kernel, pad 1 (3x3 correlation length).
    """

    HIDDEN = 20

    def __init__(self, variant: str, channels: int, sigma_init: float, params: ParamSet):
        if variant not in ("k1", "k3"):
            raise ConfigError(f"unknown generator variant {variant!r}")
        self.variant = variant
        self.channels = channels
        self.sigma_init = float(sigma_init)
        self.params = params

    @staticmethod
    def arch_spec(variant: str, channels: int, width: int = HIDDEN) -> ArchSpec:
        k2 = 3 if variant == "k3" else 1
        return ArchSpec((channels, 0, 0), (
            Layer("conv", out=width, k=1),
            Layer("relu"),
            Layer("conv", out=width, k=k2, pad=(1 if k2 == 3 else 0)),
            Layer("relu"),
            Layer("conv", out=width, k=1),
            Layer("relu"),
            Layer("conv", out=channels, k=1),
        ))

    def _kernel_sizes(self):
        return (1, 3, 1, 1) if self.variant == "k3" else (1, 1, 1, 1)

    def forward(self, z: Tensor) -> Tensor:
        if z.data.ndim != 4 or z.data.shape[1] != self.channels:
            raise ConfigError(f"generator expects [B,{self.channels},H,W] input, "
                              f"got {z.data.shape}")
        h = z
        for i, k in enumerate(self._kernel_sizes()):
            h = T.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"],
                         stride=1, pad=(1 if k == 3 else 0))
            if i < 3:
                h = T.relu(h)
        return T.add(h, T.scale(z, self.sigma_init))

    def sample(self, shape, rng: Rng, dtype=np.float32) -> np.ndarray:
        """Raw noise field (no projection), tape-free."""
        z = Tensor(rng.normal(shape, dtype))
        return self.forward(z).data

    def snapshot(self) -> ParamSet:
        return self.params.copy()


def build_generator(variant: str, channels: int, rng: Rng, sigma_init: float,
                    width: int = NoiseGenerator.HIDDEN, dtype=np.float32) -> NoiseGenerator:
    """At initialization g(z) = sigma_init * z exactly: the final conv is the
    zero map, so only the scaled residual path contributes. Hidden layers are
    He-initialized so gradients reach them once training moves the last layer.
    """
    if channels < 1 or sigma_init <= 0:
        raise ConfigError("build_generator: channels >= 1 and sigma_init > 0 required")
    spec = NoiseGenerator.arch_spec(variant, channels, width)
    params = ParamSet(spec.fingerprint())
    ks = (1, 3, 1, 1) if variant == "k3" else (1, 1, 1, 1)
    cin = channels
    for i, k in enumerate(ks):
        cout = channels if i == 3 else width
        if i == 3:
            wgt = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            std = np.sqrt(2.0 / (cin * k * k))
            wgt = (rng.normal((cout, cin, k, k), np.float64) * std).astype(dtype)
        params.add(f"conv{i}.w", wgt)
        params.add(f"conv{i}.b", np.zeros(cout, dtype=dtype))
        cin = cout
    return NoiseGenerator(variant, channels, sigma_init, params)


def generator_from_params(variant: str, channels: int, sigma_init: float,
                          params: ParamSet) -> NoiseGenerator:
    return NoiseGenerator(variant, channels, sigma_init, params)


def save_checkpoint(params: ParamSet, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQI", CHECKPOINT_VERSION, params.fingerprint,
                            len(params.names())))
        for name, t in params.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", raw.ndim))
            f.write(struct.pack(f"<{raw.ndim}Q", *raw.shape))
            f.write(raw.tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedCheckpoint(f"checkpoint ended while reading {what}")
    return buf


def load_checkpoint(path, expect_fingerprint: int | None = None) -> ParamSet:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise VersionMismatch("not an ANTC checkpoint (bad magic)")
        version, fingerprint, count = struct.unpack("<IQI", _read_exact(f, 16, "header"))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"unsupported checkpoint version {version}")
        if expect_fingerprint is not None and fingerprint != expect_fingerprint:
            raise FingerprintMismatch(
                f"fingerprint {fingerprint:#x} != expected {expect_fingerprint:#x}")
        params = ParamSet(fingerprint)
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            raw = _read_exact(f, 4 * n, f"payload of {name}")
            params.add(name, np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
        return params
