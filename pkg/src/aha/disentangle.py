"""Adversarial decoupler for the modality-specific branch.

A conditional discriminator scores (specific-feature, semantic-unit) pairs;
the specific encoder fights it through a gradient reversal whose strength
ramps up on a sigmoid schedule. Anchor timesteps are sampled in proportion
to the local change rate of the semantic units so the critic concentrates
on transitions rather than static stretches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (ConfigError, Tensor, add, concat, gradient_reversal, matmul, scale,
                       softmax_cross_entropy_rows, tanh)


@dataclass
class GrlSchedule:
    """Reversal-strength ramp over training steps p = 0..n_max."""

    n_max: int
    lambda_max: float = 1.0
    p: int = 0

    def __post_init__(self):
        if self.n_max <= 0:
            raise ConfigError("n_max must be positive")


def grl_lambda(schedule: GrlSchedule) -> float:
    """lambda_max * (2 / (1 + exp(-10 p / n_max)) - 1)."""
    frac = schedule.p / schedule.n_max
    return schedule.lambda_max * (2.0 / (1.0 + math.exp(-10.0 * frac)) - 1.0)


def semantic_velocity(v_unit: np.ndarray) -> np.ndarray:
    """Per-step change rate ||V_{t+1} - V_t||_2; length T-1."""
    v = np.asarray(v_unit, dtype=np.float64)
    if v.shape[0] < 2:
        raise ValueError("semantic velocity needs at least two timesteps")
    return np.linalg.norm(np.diff(v, axis=0), axis=-1)


def sample_weights(delta: np.ndarray, eps: float) -> np.ndarray:
    """delta_t / (sum(delta) + eps); nonnegative, sums just below 1."""
    delta = np.asarray(delta, dtype=np.float64)
    return delta / (delta.sum() + eps)


def velocity_sample(delta: np.ndarray, eps: float, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` distinct timesteps with probability proportional to
    velocity; falls back to uniform when all velocities vanish. When fewer
    than ``count`` timesteps have positive weight, the remainder is filled
    uniformly from the zero-weight ones."""
    delta = np.asarray(delta, dtype=np.float64)
    n = delta.shape[0]
    if count > n:
        raise ConfigError(f"cannot draw {count} of {n} timesteps without replacement")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    total = delta.sum()
    if total < 1e-9:
        return np.sort(rng.choice(n, size=count, replace=False))
    positive = np.flatnonzero(delta > 0)
    if len(positive) <= count:
        chosen = list(positive)
        rest = np.setdiff1d(np.arange(n), positive)
        extra = rng.choice(rest, size=count - len(positive), replace=False)
        chosen.extend(extra.tolist())
        return np.sort(np.asarray(chosen, dtype=np.int64))
    p = delta / total
    return np.sort(rng.choice(n, size=count, replace=False, p=p))


def default_anchor_count(length: int, ratio: float) -> int:
    """ceil(ratio * (T - 1)) anchors per sequence."""
    return int(math.ceil(ratio * (length - 1)))


class Discriminator:
    """Two-layer scoring head over [specific ; unit] concatenations."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, tau: float = 0.1):
        if tau <= 0:
            raise ConfigError("temperature must be positive")
        self.in_dim = in_dim
        self.hidden = hidden
        self.tau = tau
        self.w1 = Tensor(rng.normal(scale=1.0 / math.sqrt(in_dim), size=(in_dim, hidden)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(scale=1.0 / math.sqrt(hidden), size=(hidden, 1)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def score(self, pairs: Tensor) -> Tensor:
        """(N, in_dim) pair rows -> (N, 1) scores."""
        h = tanh(add(matmul(pairs, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


def adv_contrastive_loss(disc: Discriminator, v_spec_anchors: Tensor,
                         unit_candidates: Sequence[Tensor], lam: float) -> Tensor:
    """InfoNCE over a candidate set of semantic units, positive first.

    ``v_spec_anchors`` is (M, D_spec); each entry of ``unit_candidates`` is
    an (M, D_unit) column of the candidate matrix -- column 0 holds the
    matched units, the rest hold same-timestep units from other sequences.
    The specific features pass through gradient reversal before scoring.
    """
    m = len(unit_candidates)
    if m < 2:
        raise ConfigError("adversarial loss needs at least one negative candidate")
    reversed_spec = gradient_reversal(v_spec_anchors, lam)
    cols = [disc.score(concat([reversed_spec, cand], axis=-1)) for cand in unit_candidates]
    logits = scale(concat(cols, axis=-1), 1.0 / disc.tau)
    targets = np.zeros((v_spec_anchors.shape[0], m))
    targets[:, 0] = 1.0
    return softmax_cross_entropy_rows(logits, targets)


def discriminator_update(disc: Discriminator, v_spec_values: np.ndarray,
                         unit_candidate_values: Sequence[np.ndarray],
                         optimizer) -> float:
    """One minimization step of the adversarial loss w.r.t. the critic only.

    Features arrive as plain arrays (frozen encoders), so no encoder
    parameter can receive gradient here.
    """
    from .autodiff import backward, constant

    anchors = constant(v_spec_values)
    candidates = [constant(c) for c in unit_candidate_values]
    loss = adv_contrastive_loss(disc, anchors, candidates, lam=0.0)
    backward(loss)
    optimizer.step(disc.parameters())
    return loss.item()
