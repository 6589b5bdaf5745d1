"""Differentiable hyperparameter modules.

Three families, all optimized through the out-of-sample objective rather
than a validation set: input masks (fixed, or relaxed-Bernoulli with
learnable logits), affine augmentation distributions applied by bilinear
warping with prediction averaging, and concrete dropout.

Numpy-level functions live here for direct use and oracle tests; the
training loop builds the same computations on a tape via the helpers at the
bottom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _expit

from . import autodiff
from .autodiff import (AFFINE_ROT, AFFINE_TX, AFFINE_TY, AFFINE_SX, AFFINE_SY,
                       AFFINE_SHEAR)


@dataclass
class HyperParams:
    """The hyperparameter vector psi.

    Any of the three module fields may be absent (None).  `affine_ranges`
    holds 6 reals ordered (rotation, translate-x, translate-y, scale-x,
    scale-y, shear); the effective range of each is |theta_i|.
    """

    mask_logits: np.ndarray | None = None
    affine_ranges: np.ndarray | None = None
    dropout_logits: list | None = None  # one array per gated layer
    temperature: float = 0.5
    n_aug_samples: int = 1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.n_aug_samples < 1:
            raise ValueError(f"need at least 1 augmentation sample, got {self.n_aug_samples}")
        if self.mask_logits is not None:
            self.mask_logits = np.asarray(self.mask_logits, dtype=np.float64)
        if self.affine_ranges is not None:
            self.affine_ranges = np.asarray(self.affine_ranges, dtype=np.float64)
            if self.affine_ranges.shape != (6,):
                raise ValueError("affine_ranges must hold exactly 6 reals")
        if self.dropout_logits is not None:
            self.dropout_logits = [np.asarray(a, dtype=np.float64)
                                   for a in self.dropout_logits]

    @property
    def trainable(self) -> bool:
        return (self.mask_logits is not None or self.affine_ranges is not None
                or self.dropout_logits is not None)

    def copy(self) -> "HyperParams":
        return HyperParams(
            None if self.mask_logits is None else self.mask_logits.copy(),
            None if self.affine_ranges is None else self.affine_ranges.copy(),
            None if self.dropout_logits is None else [a.copy() for a in self.dropout_logits],
            self.temperature,
            self.n_aug_samples,
        )

    def scalar_columns(self) -> dict:
        """Flat name -> value view of psi for metrics emission."""
        out = {}
        if self.mask_logits is not None:
            for i, p in enumerate(_expit(self.mask_logits)):
                out[f"mask_prob_{i:02d}"] = float(p)
        if self.affine_ranges is not None:
            names = ["rot", "tx", "ty", "sx", "sy", "shear"]
            for name, v in zip(names, self.affine_ranges):
                out[f"theta_{name}"] = float(v)
        if self.dropout_logits is not None:
            for i, logits in enumerate(self.dropout_logits):
                out[f"dropout_keep_l{i}"] = float(_expit(logits).mean())
        return out


def fixed_mask(d_in: int, k: int) -> np.ndarray:
    """Binary mask keeping the first k of d_in input features."""
    if not 0 <= k <= d_in:
        raise ValueError(f"mask size {k} outside [0, {d_in}]")
    mask = np.zeros(d_in, dtype=np.float64)
    mask[:k] = 1.0
    return mask


def concrete_bernoulli(logit, temperature: float, u):
    """Relaxed Bernoulli gate sigma((logit + ln u - ln(1-u)) / temperature)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("noise u must lie strictly inside (0, 1)")
    return _expit((np.asarray(logit, dtype=np.float64) + np.log(u) - np.log1p(-u))
                  / temperature)


def sample_affine(theta, eps) -> np.ndarray:
    """One 2x3 affine matrix from ranges theta and noise eps in [-1, 1]^6.

    Composition is Translate . Rotate . Shear . Scale about the image
    center in normalized coordinates; scales act as (1 + p) so theta = 0 is
    the identity.
    """
    theta = np.asarray(theta, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    p = theta * eps
    c, s = np.cos(p[AFFINE_ROT]), np.sin(p[AFFINE_ROT])
    kx, ky = 1.0 + p[AFFINE_SX], 1.0 + p[AFFINE_SY]
    m = p[AFFINE_SHEAR]
    return np.array([
        [c * kx, (c * m - s) * ky, 2.0 * p[AFFINE_TX]],
        [s * kx, (s * m + c) * ky, 2.0 * p[AFFINE_TY]],
    ])


def rotation_matrix(angle: float) -> np.ndarray:
    """Pure-rotation sampling matrix (the angle-only special case above)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0]])


def bilinear_warp(image: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Warp (H, W) or (n, H, W) images; out-of-bounds samples read 0."""
    out, _ = autodiff.warp_kernel(np.asarray(image, dtype=np.float64),
                                  np.asarray(mat, dtype=np.float64))
    return out


def augmented_predict(forward, x: np.ndarray, theta, n_samples: int, rng) -> np.ndarray:
    """Mean class-probability vector over sampled input transformations.

    `forward` maps a batch of images (n, H, W) to logits (n, K); the result
    averages softmax probabilities over `n_samples` affine draws per input.
    """
    if n_samples < 1:
        raise ValueError(f"need at least 1 augmentation sample, got {n_samples}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    imgs = x[None] if single else x
    n = imgs.shape[0]
    eps = rng.uniform(-1.0, 1.0, size=(n * n_samples, 6))
    theta = np.asarray(theta, dtype=np.float64)
    mats = np.stack([sample_affine(theta, e) for e in eps])
    rep = np.repeat(imgs, n_samples, axis=0)
    warped = bilinear_warp(rep, mats)
    logits = forward(warped)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    mean = probs.reshape(n, n_samples, -1).mean(axis=1)
    return mean[0] if single else mean


def concrete_dropout(activations: np.ndarray, dropout_logits, temperature: float,
                     rng, mode: str = "train") -> np.ndarray:
    """Gate activations by relaxed-Bernoulli keep gates.

    Train mode multiplies by sampled gates; eval mode multiplies by the
    deterministic keep probability sigma(logit).
    """
    acts = np.asarray(activations, dtype=np.float64)
    logits = np.asarray(dropout_logits, dtype=np.float64)
    if mode == "eval":
        return acts * _expit(logits)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    u = noise_uniform(rng, acts.shape)
    return acts * concrete_bernoulli(logits, temperature, u)


def noise_uniform(rng, shape):
    """Open-interval uniform noise for concrete gates (never exactly 0 or 1)."""
    u = rng.random(shape)
    return np.clip(u, 1e-12, 1.0 - 1e-12)


# ---------------------------------------------------------------------------
# tape builders used by the training loop

def gate_nodes(tape, logits_node, temperature: float, u: np.ndarray | None):
    """Concrete gates on the tape; deterministic sigma(logits) when u is None."""
    if u is None:
        return autodiff.sigmoid(logits_node)
    noise = tape.constant(np.log(u) - np.log1p(-u))
    return autodiff.sigmoid(autodiff.scale(noise + logits_node, 1.0 / temperature))


def affine_noise(rng, n: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, 6))
