"""Residual vector quantization with a cross-modal shared prefix.

A stack of ``n`` codebooks quantizes per-timestep feature rows. The first
``k`` layers form the semantic anchor shared by both modalities; layers
``k+1..n`` are reserved for the anchored (audio) branch. Codebooks learn by
bimodal EMA: cluster-size and embedding-sum accumulators pool assignment
statistics from both modalities so each code tracks the joint centroid.
Gradients cross the quantizer through the straight-through construction
``z + stop_gradient(q - z)``; codebooks themselves carry no gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np

from .autodiff import ConfigError, Tensor, add, constant, gather, scale, sq_norm, stop_gradient, sub

# Codes whose accumulated lifetime count falls below this are left untouched.
MIN_LIFETIME = 1e-3


@dataclass
class Codebook:
    """One quantizer layer: embeddings plus EMA accumulators."""

    embeddings: np.ndarray   # (C, D)
    cluster_size: np.ndarray  # (C,)
    embed_sum: np.ndarray    # (C, D)
    decay: float = 0.99

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.cluster_size = np.asarray(self.cluster_size, dtype=np.float64)
        self.embed_sum = np.asarray(self.embed_sum, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ConfigError("codebook embeddings must be 2-D")
        if self.cluster_size.shape != (self.embeddings.shape[0],):
            raise ConfigError("cluster_size length must match codebook size")
        if self.embed_sum.shape != self.embeddings.shape:
            raise ConfigError("embed_sum shape must match embeddings")
        if not (0.0 <= self.decay < 1.0):
            raise ConfigError("decay must lie in [0, 1)")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.embeddings.copy(), self.cluster_size.copy(),
                        self.embed_sum.copy(), self.decay)


def init_codebook(size: int, dim: int, rng: np.random.Generator,
                  seed_features: np.ndarray | None = None,
                  noise_std: float = 0.1, decay: float = 0.99) -> Codebook:
    """Row 0 is the zero code; then feature rows sampled without replacement;
    any remainder is Gaussian noise."""
    if size < 1:
        raise ConfigError("codebook size must be positive")
    emb = rng.normal(scale=noise_std, size=(size, dim))
    emb[0] = 0.0
    if seed_features is not None and len(seed_features) > 0:
        feats = np.asarray(seed_features, dtype=np.float64)
        take = min(size - 1, feats.shape[0])
        picks = rng.choice(feats.shape[0], size=take, replace=False)
        emb[1:1 + take] = feats[picks]
    return Codebook(emb, np.zeros(size), np.zeros((size, dim)), decay)


def nearest_codes(z: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Index of the closest code per row; ties break to the lowest index."""
    z = np.asarray(z, dtype=np.float64)
    if codebook.size == 0:
        raise ConfigError("empty codebook")
    if z.shape[-1] != codebook.dim:
        raise ConfigError(f"feature dim {z.shape[-1]} != codebook dim {codebook.dim}")
    e = codebook.embeddings
    d2 = (z * z).sum(axis=-1, keepdims=True) - 2.0 * z @ e.T + (e * e).sum(axis=-1)
    return np.argmin(d2, axis=-1).astype(np.int64)


def nearest_code(z: np.ndarray, codebook: Codebook) -> int:
    return int(nearest_codes(np.asarray(z, dtype=np.float64)[None, :], codebook)[0])


def quantize_layer(residual: Tensor, codebook: Codebook):
    """Quantize each row of ``residual`` against one codebook.

    Returns ``(q, next_residual, indices)`` where ``q`` carries the
    straight-through gradient back to ``residual`` and ``next_residual``
    is gradient-free by construction.
    """
    indices = nearest_codes(residual.values, codebook)
    q_raw = gather(constant(codebook.embeddings), indices)
    # straight-through estimator, arranged so forward values equal the codes
    # bit-for-bit: q_raw + (residual - residual) carries the identity gradient
    q = add(q_raw, sub(residual, stop_gradient(residual)))
    next_residual = sub(residual, q)
    return q, next_residual, indices


@dataclass
class QuantizedSequence:
    """Per-timestep code indices plus the summed unit embeddings."""

    indices: np.ndarray          # (T, L)
    per_layer_q: list[Tensor]    # L tensors of (T, D), straight-through
    unit: Tensor                 # (T, D) sum of per_layer_q
    residual_final: np.ndarray   # (T, D)
    layer_inputs: list[np.ndarray] = field(default_factory=list)  # EMA statistics source


@dataclass
class RvqStack:
    """Ordered quantizer layers 1..n with shared semantic prefix 1..k."""

    layers: list[Codebook]
    shared_prefix: int

    def __post_init__(self):
        n = len(self.layers)
        if not (1 <= self.shared_prefix <= n):
            raise ConfigError(f"shared prefix {self.shared_prefix} outside 1..{n}")
        dims = {c.dim for c in self.layers}
        if len(dims) > 1:
            raise ConfigError("all layers must share the embedding dimension")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    def copy(self) -> "RvqStack":
        return RvqStack([c.copy() for c in self.layers], self.shared_prefix)


def _encode(stack: RvqStack, features: Tensor, num_layers: int) -> QuantizedSequence:
    residual = features
    qs: list[Tensor] = []
    idx_cols: list[np.ndarray] = []
    layer_inputs: list[np.ndarray] = []
    for layer in stack.layers[:num_layers]:
        layer_inputs.append(residual.values.copy())
        q, residual, idx = quantize_layer(residual, layer)
        qs.append(q)
        idx_cols.append(idx)
    unit = reduce(add, qs)
    return QuantizedSequence(
        indices=np.stack(idx_cols, axis=1),
        per_layer_q=qs,
        unit=unit,
        residual_final=residual.values.copy(),
        layer_inputs=layer_inputs,
    )


def rvq_encode_video(stack: RvqStack, z_sem: Tensor) -> QuantizedSequence:
    """Quantize the non-anchored (video) branch: shared prefix layers only."""
    return _encode(stack, z_sem, stack.shared_prefix)


def rvq_encode_audio(stack: RvqStack, features: Tensor):
    """Quantize the anchored (audio) branch through the full stack.

    Returns ``(anchor, full)``: the anchor covers the shared prefix, the
    full sequence covers all layers and feeds the decoder. Anchor indices
    are the first k columns of the full indices by construction.
    """
    full = _encode(stack, features, stack.num_layers)
    k = stack.shared_prefix
    if k == stack.num_layers:
        return full, full
    anchor_unit = reduce(add, full.per_layer_q[:k])
    anchor = QuantizedSequence(
        indices=full.indices[:, :k],
        per_layer_q=full.per_layer_q[:k],
        unit=anchor_unit,
        residual_final=full.layer_inputs[k].copy(),
        layer_inputs=full.layer_inputs[:k],
    )
    return anchor, full


def assignments(features: np.ndarray, indices: np.ndarray, size: int) -> list[np.ndarray]:
    """Group feature rows by their assigned code: one (n_i, D) array per code."""
    features = np.asarray(features, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    return [features[indices == i] for i in range(size)]


def mm_ema_update(codebook: Codebook,
                  audio_assigned: Sequence[np.ndarray],
                  video_assigned: Sequence[np.ndarray] | None = None) -> Codebook:
    """One bimodal EMA step over per-code assignment lists (in place).

    Cluster sizes and embedding sums decay by ``codebook.decay`` and absorb
    counts/sums pooled over both modalities; each live code is then reset to
    its accumulator ratio. Codes whose lifetime count would stay below
    ``MIN_LIFETIME`` are left untouched.
    """
    if video_assigned is None:
        video_assigned = [np.zeros((0, codebook.dim))] * codebook.size
    if len(audio_assigned) != codebook.size or len(video_assigned) != codebook.size:
        raise ConfigError("assignment lists must have one entry per code")
    gamma = codebook.decay
    for i in range(codebook.size):
        a = np.asarray(audio_assigned[i], dtype=np.float64).reshape(-1, codebook.dim)
        v = np.asarray(video_assigned[i], dtype=np.float64).reshape(-1, codebook.dim)
        count = a.shape[0] + v.shape[0]
        new_size = gamma * codebook.cluster_size[i] + (1.0 - gamma) * count
        if new_size < MIN_LIFETIME:
            continue
        new_sum = gamma * codebook.embed_sum[i] + (1.0 - gamma) * (a.sum(axis=0) + v.sum(axis=0))
        codebook.cluster_size[i] = new_size
        codebook.embed_sum[i] = new_sum
        codebook.embeddings[i] = new_sum / new_size
    return codebook


def commitment_loss(features: Tensor, codes_self: Tensor,
                    codes_other: Tensor | None = None, beta: float = 0.25) -> Tensor:
    """Pull features toward their own codes and, at half weight, toward the
    codes chosen by the paired modality. Mean over timesteps; codes are
    detached so gradient reaches only ``features``."""
    steps = features.shape[0]
    d_self = sub(features, stop_gradient(codes_self))
    loss = scale(sq_norm(d_self), beta / steps)
    if codes_other is not None:
        d_other = sub(features, stop_gradient(codes_other))
        loss = add(loss, scale(sq_norm(d_other), beta / (2.0 * steps)))
    return loss


def perplexity(indices: np.ndarray, size: int) -> float:
    """exp(entropy) of code usage; ``size`` at uniform usage, 1 at collapse."""
    counts = np.bincount(np.asarray(indices, dtype=np.int64).reshape(-1), minlength=size)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))
