"""Corruption kernels, analytic noise samplers, and the exact l2-sphere
projection under box clipping.

All corruptions are pure functions of (image, CorruptionSpec): noise kinds
draw from a counter-based stream keyed by the spec's sample seed, geometric
and photometric kinds ignore it. Outputs always lie in [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .config import Config, parse_config
from .errors import ConfigError, InputError
from .nets import NoiseGenerator
from .rng import Rng
from .tensor import Tensor, add, clip01, scale

__all__ = ["CorruptionSpec", "SphereProjection", "CORRUPTION_KINDS", "NOISE_KINDS",
           "GAUSSIAN_SIGMA_SET", "severity_tables", "severity_param", "corrupt",
           "gaussian_perturb", "uniform_perturb", "speckle_perturb",
           "project_sphere_clipped", "sample_adversarial_noise",
           "adversarial_batch_graph"]

# sigma preset shared by training and the gaussian_noise severity table
GAUSSIAN_SIGMA_SET = (0.08, 0.12, 0.18, 0.26, 0.38)

NOISE_KINDS = ("gaussian_noise", "uniform_noise", "shot_noise",
               "impulse_noise", "speckle_noise")
CORRUPTION_KINDS = NOISE_KINDS + ("gaussian_blur", "brightness", "contrast",
                                  "translate", "rotate", "scale")

_PARAM_KEY = {
    "gaussian_noise": "sigma", "uniform_noise": "halfwidth", "shot_noise": "rate",
    "impulse_noise": "fraction", "speckle_noise": "sigma", "gaussian_blur": "sigma",
    "brightness": "shift", "contrast": "factor", "translate": "shift",
    "rotate": "degrees", "scale": "factor",
}

_tables: Config | None = None


def severity_tables() -> Config:
    global _tables
    if _tables is None:
        text = resources.files("antforge").joinpath("severity_tables.cfg").read_text()
        _tables = parse_config(text)
    return _tables


def severity_param(kind: str, severity: int) -> float:
    if kind not in CORRUPTION_KINDS:
        raise ConfigError(f"unknown corruption kind {kind!r}")
    if not 1 <= severity <= 5:
        raise ConfigError(f"severity must be in 1..5, got {severity}")
    values = severity_tables().get_floats(kind, _PARAM_KEY[kind])
    return values[severity - 1]


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    sample_seed: int = 0


@dataclass
class SphereProjection:
    epsilon: float
    gamma: float
    achieved_norm: float
    saturated: bool


# ---------------------------------------------------------------------------
# sphere projection under box clipping

def project_sphere_clipped(x: np.ndarray, d: np.ndarray, eps: float):
    """Scale a raw direction d so the post-clip perturbation has l2 norm eps.

    The effective perturbation per pixel is clamp(gamma*d_i, -x_i, 1-x_i); its
    squared norm S(u) = sum_i min(u*d_i^2, b_i^2) with u = gamma^2 is piecewise
    linear in u with breakpoints (b_i/d_i)^2, so gamma is found in closed form.
    Returns (delta_effective, SphereProjection).
    """
    if eps <= 0:
        raise InputError("project_sphere_clipped: eps must be positive")
    xf = x.reshape(-1).astype(np.float64)
    df = d.reshape(-1).astype(np.float64)
    if not np.any(df):
        raise InputError("project_sphere_clipped: direction is zero")

    budget = np.where(df > 0, 1.0 - xf, xf)     # room to move in the sign of d
    budget = np.maximum(budget, 0.0)
    b2 = budget * budget
    d2 = df * df
    active = d2 > 0
    total = b2[active].sum()
    e2 = eps * eps

    if e2 >= total:
        delta = np.where(df > 0, budget, -budget) * active
        proj = SphereProjection(eps, np.inf, float(np.sqrt(total)), True)
        return delta.reshape(x.shape).astype(x.dtype), proj

    # breakpoints in u = gamma^2, ascending
    u_bp = np.zeros_like(d2)
    u_bp[active] = b2[active] / d2[active]
    order = np.argsort(u_bp[active])
    u_sorted = u_bp[active][order]
    b2_sorted = b2[active][order]
    d2_sorted = d2[active][order]

    # S at breakpoint j (0-based): sum_{i<=j} b2 + u_j * sum_{i>j} d2
    sat_cum = np.cumsum(b2_sorted)
    slope_suffix = np.cumsum(d2_sorted[::-1])[::-1]          # sum_{i>=j} d2
    slope_after = np.concatenate([slope_suffix[1:], [0.0]])  # sum_{i>j} d2
    s_at_bp = sat_cum + u_sorted * slope_after

    j = int(np.searchsorted(s_at_bp, e2, side="left"))
    # segment entering breakpoint j: saturated mass sum_{i<j} b2, slope sum_{i>=j} d2
    sat_before = sat_cum[j - 1] if j > 0 else 0.0
    slope = slope_suffix[j]
    u_star = (e2 - sat_before) / slope
    gamma = float(np.sqrt(u_star))

    delta = np.clip(gamma * df, -xf, 1.0 - xf)
    achieved = float(np.linalg.norm(delta))
    proj = SphereProjection(eps, gamma, achieved, False)
    return delta.reshape(x.shape).astype(x.dtype), proj


# ---------------------------------------------------------------------------
# analytic samplers

def gaussian_perturb(x: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    if sigma < 0:
        raise InputError("sigma must be nonnegative")
    if sigma == 0:
        return x.copy()
    return np.clip(x + sigma * rng.normal(x.shape, x.dtype), 0.0, 1.0)


def uniform_perturb(x: np.ndarray, halfwidth: float, rng: Rng) -> np.ndarray:
    if halfwidth < 0:
        raise InputError("halfwidth must be nonnegative")
    if halfwidth == 0:
        return x.copy()
    return np.clip(x + rng.uniform(-halfwidth, halfwidth, x.shape, x.dtype), 0.0, 1.0)


def speckle_perturb(x: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    if sigma < 0:
        raise InputError("sigma must be nonnegative")
    if sigma == 0:
        return x.copy()
    n = sigma * rng.normal(x.shape, x.dtype)
    return np.clip(x + x * n, 0.0, 1.0)


def sample_adversarial_noise(g: NoiseGenerator, x: np.ndarray, eps: float,
                             rng: Rng) -> np.ndarray:
    """clip01(x + delta) with delta the projected generator output; tape-free."""
    shape = x.shape if x.ndim == 4 else (1,) + x.shape
    d = g.sample(shape, rng, x.dtype).reshape(x.shape)
    delta, _ = project_sphere_clipped(x, d, eps)
    return np.clip(x + delta, 0.0, 1.0)


def adversarial_batch_graph(g: NoiseGenerator, x: np.ndarray, eps: float,
                            rng: Rng) -> Tensor:
    """Differentiable (w.r.t. generator parameters) perturbed batch.

    Each image is projected to its own sphere; the scaling gamma is treated as
    a constant in the backward pass. Returns clip01(x + gamma*g(z)) as a graph.
    """
    z = Tensor(rng.normal(x.shape, x.dtype))
    raw = g.forward(z)
    gammas = np.empty(x.shape[0], dtype=np.float64)
    for i in range(x.shape[0]):
        _, proj = project_sphere_clipped(x[i], raw.data[i], eps)
        # fall back to a plain norm rescale when the budget saturates
        gammas[i] = proj.gamma if np.isfinite(proj.gamma) else \
            eps / max(float(np.linalg.norm(raw.data[i])), 1e-12)
    gfac = Tensor(gammas.reshape(-1, 1, 1, 1).astype(x.dtype) *
                  np.ones_like(raw.data))
    scaled = _mul_const(raw, gfac.data)
    return clip01(add(Tensor(x), scaled))


def _mul_const(t: Tensor, const: np.ndarray) -> Tensor:
    """Multiply a graph tensor by a constant array of the same shape."""
    from .tensor import mul
    return mul(t, Tensor(const))


# ---------------------------------------------------------------------------
# corruption kernels

def _blur_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return (k / k.sum()).astype(np.float64)


def _gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    k = _blur_kernel(sigma)
    r = len(k) // 2
    out = x.astype(np.float64)
    for axis in (out.ndim - 2, out.ndim - 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad)
        win = np.lib.stride_tricks.sliding_window_view(padded, len(k), axis=axis)
        out = win @ k   # window axis sits last; contraction restores the layout
    return out.astype(x.dtype)


def _bilinear_sample(x: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Sample channel-first image x[C,H,W] at float coords (yy, xx); zeros outside."""
    C, H, W = x.shape
    y0 = np.floor(yy).astype(np.int64)
    x0 = np.floor(xx).astype(np.int64)
    fy = yy - y0
    fx = xx - x0
    out = np.zeros((C,) + yy.shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            yi = y0 + dy
            xi = x0 + dx
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            yc = np.clip(yi, 0, H - 1)
            xc = np.clip(xi, 0, W - 1)
            out += wgt * valid * x[:, yc, xc]
    return out.astype(x.dtype)


def _affine(x: np.ndarray, angle_deg: float = 0.0, factor: float = 1.0) -> np.ndarray:
    """Rotate/scale about the image center, pixel-center convention."""
    C, H, W = x.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    # inverse map: output pixel -> source pixel
    a = np.deg2rad(angle_deg)
    ca, sa = np.cos(a), np.sin(a)
    ys = (yy - cy) / factor
    xs = (xx - cx) / factor
    ysr = ca * ys + sa * xs + cy
    xsr = -sa * ys + ca * xs + cx
    return _bilinear_sample(x, ysr, xsr)


def _translate(x: np.ndarray, shift: int) -> np.ndarray:
    out = np.zeros_like(x)
    if shift < x.shape[-1]:
        out[..., :, shift:] = x[..., :, :x.shape[-1] - shift]
    return out


def corrupt(x: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply a deterministic corruption to one image [C,H,W] in [0,1]."""
    p = severity_param(spec.kind, spec.severity)
    kind = spec.kind
    if kind in NOISE_KINDS:
        rng = Rng(spec.sample_seed, stream_id_for(kind, spec.severity))
        if kind == "gaussian_noise":
            return gaussian_perturb(x, p, rng)
        if kind == "uniform_noise":
            return uniform_perturb(x, p, rng)
        if kind == "speckle_noise":
            return speckle_perturb(x, p, rng)
        if kind == "shot_noise":
            y = rng.poisson(np.maximum(x, 0) * p) / p
            return np.clip(y, 0.0, 1.0).astype(x.dtype)
        if kind == "impulse_noise":
            mask = rng.uniform(0, 1, x.shape, np.float64) < p
            salt = rng.uniform(0, 1, x.shape, np.float64) < 0.5
            out = x.copy()
            out[mask & salt] = 1.0
            out[mask & ~salt] = 0.0
            return out
    if kind == "gaussian_blur":
        return np.clip(_gaussian_blur(x, p), 0.0, 1.0)
    if kind == "brightness":
        return np.clip(x + x.dtype.type(p), 0.0, 1.0)
    if kind == "contrast":
        m = x.mean()
        return np.clip((x - m) * x.dtype.type(p) + m, 0.0, 1.0)
    if kind == "translate":
        return _translate(x, int(p))
    if kind == "rotate":
        return np.clip(_affine(x, angle_deg=p), 0.0, 1.0)
    if kind == "scale":
        return np.clip(_affine(x, factor=p), 0.0, 1.0)
    raise ConfigError(f"unknown corruption kind {kind!r}")


def stream_id_for(kind: str, severity: int) -> int:
    from .rng import stream_id
    return stream_id(f"corrupt/{kind}/{severity}")
