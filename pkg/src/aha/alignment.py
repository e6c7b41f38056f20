"""Temporal alignment objectives over quantized unit sequences.

Local sliding alignment scores each timestep of one modality against a
window of the other modality's units and matches a soft target spread over
a small tolerance set, in both directions. Cross-modal predictive coding
runs a causal recurrent aggregator per modality and asks each context to
pick out the other modality's future unit from the whole batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import (ConfigError, Tensor, add, add_scalar, concat, constant, exp, gather, log,
                       matmul, multiply, scale, sigmoid, softmax_cross_entropy_rows, sub, tanh,
                       tensor_sum)


@dataclass(frozen=True)
class LsaConfig:
    """Window radius, positive tolerance, and softmax temperature."""

    radius: int
    n_pos: int
    tau: float = 0.1

    def __post_init__(self):
        if self.radius < 0:
            raise ConfigError("radius must be >= 0")
        if not (0 <= self.n_pos <= self.radius):
            raise ConfigError("n_pos must lie in [0, radius]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


def radius_from_window(window: int) -> int:
    """Window width W -> radius (W - 1) // 2; width 5 gives radius 2."""
    if window < 1 or window % 2 == 0:
        raise ConfigError("window width must be a positive odd integer")
    return (window - 1) // 2


def local_scope(t: int, length: int, radius: int) -> np.ndarray:
    """Indices j with |t - j| <= radius, clamped to [0, length)."""
    if not (0 <= t < length):
        raise ConfigError(f"timestep {t} outside sequence of length {length}")
    return np.arange(max(0, t - radius), min(length, t + radius + 1))


def soft_target(t: int, length: int, n_pos: int) -> np.ndarray:
    """Uniform distribution over the clamped tolerance set, as a length-T row."""
    members = local_scope(t, length, n_pos)
    row = np.zeros(length)
    row[members] = 1.0 / len(members)
    return row


def scope_mask(length: int, radius: int) -> np.ndarray:
    """(T, T) boolean matrix of |t - j| <= radius."""
    idx = np.arange(length)
    return np.abs(idx[:, None] - idx[None, :]) <= radius


def target_matrix(length: int, n_pos: int) -> np.ndarray:
    return np.stack([soft_target(t, length, n_pos) for t in range(length)])


NORM_EPS = 1e-3  # softening inside the norm: rows scale by 1/sqrt(|x|^2 + eps)


def l2_normalize_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Row-wise soft L2 normalization, differentiable through the norm.

    The eps floor keeps gradients bounded when a unit row is (near) zero,
    e.g. when the zero code is selected; it is part of the alignment
    contract and shared with the value-level probability helper.
    """
    ss = tensor_sum(multiply(x, x), axis=-1, keepdims=True)
    inv = exp(scale(log(add_scalar(ss, eps)), -0.5))
    expanded = matmul(inv, constant(np.ones((1, x.shape[-1]))))
    return multiply(x, expanded)


def alignment_prob(a_unit: np.ndarray, v_unit: np.ndarray, t: int,
                   config: LsaConfig) -> np.ndarray:
    """Masked softmax of A_t against V_j over the local scope (value level)."""
    a = np.asarray(a_unit, dtype=np.float64)
    v = np.asarray(v_unit, dtype=np.float64)
    a = a / np.sqrt((a * a).sum(axis=-1, keepdims=True) + NORM_EPS)
    v = v / np.sqrt((v * v).sum(axis=-1, keepdims=True) + NORM_EPS)
    scope = local_scope(t, a.shape[0], config.radius)
    logits = (v[scope] @ a[t]) / config.tau
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    out = np.zeros(a.shape[0])
    out[scope] = p
    return out


def _masked_bidirectional_ce(a_n: Tensor, v_n: Tensor, valid: np.ndarray,
                             targets: np.ndarray, tau: float) -> Tensor:
    s_av = scale(matmul(a_n, v_n, transpose_b=True), 1.0 / tau)
    s_va = scale(matmul(v_n, a_n, transpose_b=True), 1.0 / tau)
    ce_av = softmax_cross_entropy_rows(s_av, targets, valid=valid)
    ce_va = softmax_cross_entropy_rows(s_va, targets, valid=valid)
    return scale(add(ce_av, ce_va), 0.5)


def lsa_loss(a_unit: Tensor, v_unit: Tensor, config: LsaConfig) -> Tensor:
    """Bidirectional windowed cross-entropy between unit sequences."""
    if a_unit.shape != v_unit.shape:
        raise ValueError(f"unit shapes differ: {a_unit.shape} vs {v_unit.shape}")
    length = a_unit.shape[0]
    a_n = l2_normalize_rows(a_unit)
    v_n = l2_normalize_rows(v_unit)
    return _masked_bidirectional_ce(a_n, v_n, scope_mask(length, config.radius),
                                    target_matrix(length, config.n_pos), config.tau)


@lru_cache(maxsize=4)
def _block_mask_and_targets(batch: int, length: int, radius: int, n_pos: int):
    valid = np.kron(np.eye(batch, dtype=bool), scope_mask(length, radius))
    targets = np.kron(np.eye(batch), target_matrix(length, n_pos))
    return valid, targets


def lsa_loss_batched(a_unit: Tensor, v_unit: Tensor, config: LsaConfig,
                     batch: int, length: int) -> Tensor:
    """Mean per-sequence lsa_loss over a flattened batch, in one graph.

    Cross-sequence pairs are masked out, so this equals averaging
    ``lsa_loss`` over the individual sequences.
    """
    if a_unit.shape != v_unit.shape:
        raise ValueError(f"unit shapes differ: {a_unit.shape} vs {v_unit.shape}")
    if a_unit.shape[0] != batch * length:
        raise ValueError("unit rows must equal batch * length")
    valid, targets = _block_mask_and_targets(batch, length, config.radius, config.n_pos)
    a_n = l2_normalize_rows(a_unit)
    v_n = l2_normalize_rows(v_unit)
    return _masked_bidirectional_ce(a_n, v_n, valid, targets, config.tau)


# ---------------------------------------------------------------------------
# Cross-modal predictive coding.
# ---------------------------------------------------------------------------

class GruCell:
    """Single gated recurrent cell; strictly causal when stepped in order."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        def mat(rows, cols):
            return Tensor(rng.normal(scale=1.0 / math.sqrt(rows), size=(rows, cols)),
                          requires_grad=True)

        self.d_in = d_in
        self.d_hidden = d_hidden
        self.wxr, self.whr = mat(d_in, d_hidden), mat(d_hidden, d_hidden)
        self.wxz, self.whz = mat(d_in, d_hidden), mat(d_hidden, d_hidden)
        self.wxc, self.whc = mat(d_in, d_hidden), mat(d_hidden, d_hidden)
        self.br = Tensor(np.zeros(d_hidden), requires_grad=True)
        self.bz = Tensor(np.zeros(d_hidden), requires_grad=True)
        self.bc = Tensor(np.zeros(d_hidden), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.wxr, self.whr, self.br, self.wxz, self.whz, self.bz,
                self.wxc, self.whc, self.bc]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        r = sigmoid(add(add(matmul(x, self.wxr), matmul(h, self.whr)), self.br))
        z = sigmoid(add(add(matmul(x, self.wxz), matmul(h, self.whz)), self.bz))
        c = tanh(add(add(matmul(x, self.wxc), matmul(multiply(r, h), self.whc)), self.bc))
        keep = multiply(sub(constant(np.ones(z.shape)), z), h)
        return add(keep, multiply(z, c))


@dataclass
class CpcState:
    """Per-modality causal aggregators plus per-step projection matrices."""

    cells_video: list[GruCell]
    cells_audio: list[GruCell]
    w_step_video: list[Tensor]  # (context, unit-dim) per prediction step
    w_step_audio: list[Tensor]
    horizon: int = 1

    @classmethod
    def build(cls, unit_dim: int, hidden: int, context: int, horizon: int,
              rng: np.random.Generator, layers: int = 1) -> "CpcState":
        if horizon < 1:
            raise ConfigError("prediction horizon must be >= 1")
        if layers < 1:
            raise ConfigError("need at least one recurrent layer")

        def build_cells():
            dims = [unit_dim] + [hidden] * (layers - 1) + [context]
            return [GruCell(dims[i], dims[i + 1], rng) for i in range(layers)]

        def build_proj():
            return [Tensor(rng.normal(scale=1.0 / math.sqrt(context), size=(context, unit_dim)),
                           requires_grad=True)
                    for _ in range(horizon)]

        return cls(build_cells(), build_cells(), build_proj(), build_proj(), horizon)

    @property
    def context_dim(self) -> int:
        return self.cells_video[-1].d_hidden

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for cell in self.cells_video + self.cells_audio:
            out.extend(cell.parameters())
        out.extend(self.w_step_video)
        out.extend(self.w_step_audio)
        return out


def _contexts(units: Tensor, cells: list[GruCell], batch: int, length: int) -> Tensor:
    """Causal contexts for (batch*length, D) rows ordered sequence-major."""
    if units.shape[0] != batch * length:
        raise ConfigError("unit rows must equal batch * length")
    hs = [Tensor(np.zeros((batch, c.d_hidden))) for c in cells]
    outputs: list[Tensor] = []
    for t in range(length):
        rows = np.arange(batch) * length + t
        x = gather(units, rows)
        for i, cell in enumerate(cells):
            hs[i] = cell.step(x, hs[i])
            x = hs[i]
        outputs.append(hs[-1])
    stacked = concat(outputs, axis=0)  # row t*batch + b
    perm = np.arange(batch)[:, None] * 1 + np.arange(length)[None, :] * batch
    return gather(stacked, perm.reshape(-1))


def cpc_contexts(units: Tensor, cells: list[GruCell]) -> Tensor:
    """Causal contexts h_t for a single (T, D) unit sequence."""
    return _contexts(units, cells, batch=1, length=units.shape[0])


def _directional_cpc(contexts: Tensor, projections: list[Tensor], targets: Tensor,
                     batch: int, length: int, horizon: int) -> Tensor:
    per_step = []
    candidates = targets  # every timestep of every sequence competes
    for s in range(1, horizon + 1):
        anchor_rows = (np.arange(batch)[:, None] * length
                       + np.arange(length - s)[None, :]).reshape(-1)
        pred = matmul(gather(contexts, anchor_rows), projections[s - 1])
        logits = matmul(pred, candidates, transpose_b=True)
        onehot = np.zeros((anchor_rows.size, batch * length))
        onehot[np.arange(anchor_rows.size), anchor_rows + s] = 1.0
        per_step.append(softmax_cross_entropy_rows(logits, onehot))
    total = per_step[0]
    for extra in per_step[1:]:
        total = add(total, extra)
    return scale(total, 1.0 / len(per_step))


def cpc_loss(h_video: Tensor, h_audio: Tensor, a_unit: Tensor, v_unit: Tensor,
             state: CpcState, batch: int, length: int) -> Tensor:
    """Symmetric InfoNCE: video context predicts future audio units and
    vice versa, against all other timesteps in the batch."""
    if length <= state.horizon:
        raise ValueError(f"sequence length {length} must exceed horizon {state.horizon}")
    l_va = _directional_cpc(h_video, state.w_step_video, a_unit, batch, length, state.horizon)
    l_av = _directional_cpc(h_audio, state.w_step_audio, v_unit, batch, length, state.horizon)
    return scale(add(l_va, l_av), 0.5)
