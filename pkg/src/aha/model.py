"""The full pipeline: encoders, asymmetric quantizer core, decoders,
loss assembly, and the two-phase training step.

One modality (audio by default) is anchored: its features pass through the
whole quantizer stack and its decoder reads the full quantized sum. The
other modality quantizes into the shared prefix only and keeps a separate
continuous specific branch, which an adversarial critic strips of semantic
content. A symmetric stub (both modalities prefix-only, each with its own
specific branch) exists for directional comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import quantizer as qz
from .alignment import (CpcState, LsaConfig, _contexts, cpc_loss, lsa_loss_batched,
                        radius_from_window)
from .autodiff import (ConfigError, Tensor, add, backward, concat, constant, gather, matmul,
                       mse, scale, tanh)
from .config import RunConfig
from .disentangle import (Discriminator, GrlSchedule, adv_contrastive_loss, default_anchor_count,
                          discriminator_update, grl_lambda, semantic_velocity, velocity_sample)
from .optim import Adam, AdamW, warmup_cosine_lr
from .synthdata import PairedSample

MODALITIES = ("audio", "video")


class Mlp:
    """Two-layer per-timestep head: tanh hidden, linear output."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.w1 = Tensor(rng.normal(scale=1.0 / math.sqrt(d_in), size=(d_in, d_hidden)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(d_hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(scale=1.0 / math.sqrt(d_hidden), size=(d_hidden, d_out)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = tanh(add(matmul(x, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class LossBreakdown:
    """Scalar loss components; ``total`` is their literal sum."""

    l_a_recon: float
    l_v_recon: float
    l_vq: float
    l_adv: float
    l_cpc: float
    l_align: float
    total: float

    FIELDS = ("l_a_recon", "l_v_recon", "l_vq", "l_adv", "l_cpc", "l_align", "total")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


@dataclass
class Batch:
    """Flattened paired sequences; row index is item * length + t."""

    x_audio: np.ndarray
    x_video: np.ndarray
    labels: np.ndarray
    batch: int
    length: int


def stack_batch(samples: list[PairedSample]) -> Batch:
    length = samples[0].x_audio.shape[0]
    return Batch(
        x_audio=np.vstack([s.x_audio for s in samples]),
        x_video=np.vstack([s.x_video for s in samples]),
        labels=np.concatenate([s.labels for s in samples]),
        batch=len(samples),
        length=length,
    )


class AhaModel:
    """Model state: encoders, quantizer stack, critics, aggregators, optimizers."""

    def __init__(self, config: RunConfig, rng: np.random.Generator,
                 init_batch: Batch | None = None):
        self.config = config
        self.rng = rng
        self.step = 0
        self._last_perplexities: list[float] = []
        cfg = config

        if cfg.anchor == "symmetric-stub":
            self.anchored: str | None = None
            num_layers = cfg.shared_layers
            self.spec_mods: tuple[str, ...] = ("audio", "video")
        else:
            self.anchored = cfg.anchor
            num_layers = cfg.num_layers
            self.spec_mods = ("video",) if cfg.anchor == "audio" else ("audio",)

        d = cfg.embed_dim
        dims_in = {"audio": cfg.dim_audio, "video": cfg.dim_video}
        self.enc_sem = {m: Mlp(dims_in[m], 2 * d, d, rng) for m in MODALITIES}
        self.enc_spec = {m: Mlp(dims_in[m], 2 * cfg.spec_dim, cfg.spec_dim, rng)
                         for m in self.spec_mods}
        self.dec = {}
        for m in MODALITIES:
            d_dec_in = d if m == self.anchored else d + cfg.spec_dim
            self.dec[m] = Mlp(d_dec_in, 2 * d_dec_in, dims_in[m], rng)
        self.disc = {m: Discriminator(cfg.spec_dim + d, cfg.disc_hidden, rng, tau=cfg.tau)
                     for m in self.spec_mods}
        self.cpc = CpcState.build(d, cfg.cpc_hidden, cfg.cpc_context, cfg.cpc_steps, rng,
                                  layers=cfg.cpc_layers)
        self.lsa = LsaConfig(radius=radius_from_window(cfg.window), n_pos=cfg.n_pos, tau=cfg.tau)
        self.schedule = GrlSchedule(n_max=cfg.total_steps, lambda_max=cfg.lambda_max)

        seed_feats = None
        if init_batch is not None:
            rows = [self.enc_sem[m](constant(getattr(init_batch, f"x_{m}"))).values
                    for m in MODALITIES]
            seed_feats = np.vstack(rows)
        self.stack = qz.RvqStack(
            [qz.init_codebook(cfg.codebook_size, d, rng,
                              seed_features=seed_feats if i < cfg.shared_layers else None,
                              decay=cfg.gamma)
             for i in range(num_layers)],
            shared_prefix=cfg.shared_layers)

        self.opt_main = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.opt_disc = {m: Adam(lr=cfg.grl_lr) for m in self.spec_mods}
        self.steps_per_epoch = max(int(round(0.8 * cfg.n_samples)) // cfg.batch_size, 1)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for m in MODALITIES:
            for i, p in enumerate(self.enc_sem[m].parameters()):
                out.append((f"enc_sem.{m}.{i}", p))
        for m in self.spec_mods:
            for i, p in enumerate(self.enc_spec[m].parameters()):
                out.append((f"enc_spec.{m}.{i}", p))
        for m in MODALITIES:
            for i, p in enumerate(self.dec[m].parameters()):
                out.append((f"dec.{m}.{i}", p))
        for i, p in enumerate(self.cpc.parameters()):
            out.append((f"cpc.{i}", p))
        return out

    def main_parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def disc_parameters(self) -> dict[str, list[Tensor]]:
        return {m: self.disc[m].parameters() for m in self.spec_mods}

    def current_lr(self) -> float:
        cfg = self.config
        warmup = cfg.warmup_epochs * self.steps_per_epoch
        return warmup_cosine_lr(self.step, cfg.total_steps, warmup, cfg.lr, cfg.min_lr)

    def encode_audio(self, x_a: np.ndarray) -> Tensor:
        return self.enc_sem["audio"](constant(x_a))

    def encode_video(self, x_v: np.ndarray) -> tuple[Tensor, Tensor | None]:
        z_sem = self.enc_sem["video"](constant(x_v))
        z_spec = self.enc_spec["video"](constant(x_v)) if "video" in self.spec_mods else None
        return z_sem, z_spec


# ---------------------------------------------------------------------------
# Forward pass.
# ---------------------------------------------------------------------------

@dataclass
class PinnedQuantization:
    """Frozen code selections so the loss is smooth for finite differencing.

    ``deltas`` holds (selected code - residual) per layer, captured from a
    base forward; re-running with these pins makes quantization an affine
    offset, which is exactly the function the straight-through gradient is
    the gradient of.
    """

    indices: dict[str, np.ndarray]
    deltas: dict[str, list[np.ndarray]]
    code_sums_anchor: dict[str, np.ndarray]
    code_sums_full: dict[str, np.ndarray]


@dataclass
class ForwardState:
    x: dict[str, np.ndarray]
    z_sem: dict[str, Tensor]
    z_spec: dict[str, Tensor]
    anchor: dict[str, qz.QuantizedSequence]
    full: dict[str, qz.QuantizedSequence]
    anchor_codes: dict[str, np.ndarray]  # raw code sums: commitment targets
    full_codes: dict[str, np.ndarray]
    batch: int
    length: int


def _encode_pinned(features: Tensor, deltas: list[np.ndarray],
                   indices: np.ndarray) -> qz.QuantizedSequence:
    residual = features
    qs: list[Tensor] = []
    for delta in deltas:
        q = add(residual, constant(delta))
        residual = Tensor(residual.values - q.values)  # gradient-free, as in live encode
        qs.append(q)
    unit = qs[0]
    for q in qs[1:]:
        unit = add(unit, q)
    return qz.QuantizedSequence(indices=indices, per_layer_q=qs, unit=unit,
                                residual_final=residual.values.copy())


def capture_pins(fs: ForwardState) -> PinnedQuantization:
    """Record code selections from a live forward for smooth re-evaluation."""
    deltas = {}
    indices = {}
    for m in MODALITIES:
        seq = fs.full[m]
        deltas[m] = [seq.per_layer_q[i].values - seq.layer_inputs[i]
                     for i in range(len(seq.per_layer_q))]
        indices[m] = seq.indices.copy()
    return PinnedQuantization(indices=indices, deltas=deltas,
                              code_sums_anchor=dict(fs.anchor_codes),
                              code_sums_full=dict(fs.full_codes))


def _forward_features(model: AhaModel, batch: Batch,
                      pins: PinnedQuantization | None = None) -> ForwardState:
    x = {"audio": batch.x_audio, "video": batch.x_video}
    z_sem, z_spec, anchor, full = {}, {}, {}, {}
    anchor_codes, full_codes = {}, {}
    k = model.stack.shared_prefix
    for m in MODALITIES:
        z = model.enc_sem[m](constant(x[m]))
        z_sem[m] = z
        if pins is not None:
            n_layers = len(pins.deltas[m])
            seq = _encode_pinned(z, pins.deltas[m], pins.indices[m])
            if n_layers > k:
                prefix = _encode_pinned(z, pins.deltas[m][:k], pins.indices[m][:, :k])
                anchor[m], full[m] = prefix, seq
            else:
                anchor[m] = full[m] = seq
            anchor_codes[m] = pins.code_sums_anchor[m]
            full_codes[m] = pins.code_sums_full[m]
        elif m == model.anchored:
            anchor[m], full[m] = qz.rvq_encode_audio(model.stack, z)
            anchor_codes[m] = anchor[m].unit.values
            full_codes[m] = full[m].unit.values
        else:
            seq = qz.rvq_encode_video(model.stack, z)
            anchor[m] = full[m] = seq
            anchor_codes[m] = full_codes[m] = seq.unit.values
    for m in model.spec_mods:
        z_spec[m] = model.enc_spec[m](constant(x[m]))
    return ForwardState(x=x, z_sem=z_sem, z_spec=z_spec, anchor=anchor, full=full,
                        anchor_codes=anchor_codes, full_codes=full_codes,
                        batch=batch.batch, length=batch.length)


# ---------------------------------------------------------------------------
# Adversarial anchor planning (value level, drives both training phases).
# ---------------------------------------------------------------------------

@dataclass
class AdvPlan:
    anchor_rows: np.ndarray      # (M,) flat rows into batch*length
    candidate_rows: np.ndarray   # (M, m) flat rows; column 0 is the positive


def plan_adversarial(fs: ForwardState, modality: str, config: RunConfig,
                     rng: np.random.Generator) -> AdvPlan:
    units = fs.anchor[modality].unit.values
    b, t = fs.batch, fs.length
    count = default_anchor_count(t, config.velocity_ratio)
    m = int(round(config.negative_ratio * b))
    m = max(min(m, b), 2)
    anchor_rows = []
    candidate_rows = []
    others = np.arange(b)
    for item in range(b):
        delta = semantic_velocity(units[item * t:(item + 1) * t])
        picks = velocity_sample(delta, config.velocity_eps, count, rng)
        pool = others[others != item]
        for step_idx in picks:
            row = item * t + int(step_idx)
            negatives = rng.choice(pool, size=m - 1, replace=False)
            anchor_rows.append(row)
            candidate_rows.append([row] + [int(o) * t + int(step_idx) for o in negatives])
    return AdvPlan(np.asarray(anchor_rows, dtype=np.int64),
                   np.asarray(candidate_rows, dtype=np.int64))


# ---------------------------------------------------------------------------
# Loss assembly.
# ---------------------------------------------------------------------------

def _reconstruction(model: AhaModel, fs: ForwardState, modality: str) -> Tensor:
    if modality == model.anchored:
        decoder_in = fs.full[modality].unit
    else:
        decoder_in = concat([fs.anchor[modality].unit, fs.z_spec[modality]], axis=-1)
    return mse(model.dec[modality](decoder_in), constant(fs.x[modality]))


def _vq_loss(model: AhaModel, fs: ForwardState) -> Tensor:
    cfg = model.config
    other = {"audio": "video", "video": "audio"}
    total = None
    for m in MODALITIES:
        term = qz.commitment_loss(fs.z_sem[m], constant(fs.anchor_codes[m]),
                                  constant(fs.anchor_codes[other[m]]), beta=cfg.beta)
        total = term if total is None else add(total, term)
    if model.anchored is not None and len(fs.full[model.anchored].per_layer_q) > model.stack.shared_prefix:
        suffix = qz.commitment_loss(fs.z_sem[model.anchored],
                                    constant(fs.full_codes[model.anchored]), None, beta=cfg.beta)
        total = add(total, suffix)
    return total


def _adversarial_loss(model: AhaModel, fs: ForwardState, plans: dict[str, AdvPlan],
                      lam: float) -> Tensor:
    terms = []
    for m in model.spec_mods:
        plan = plans[m]
        spec_anchors = gather(fs.z_spec[m], plan.anchor_rows)
        cols = [gather(fs.anchor[m].unit, plan.candidate_rows[:, j])
                for j in range(plan.candidate_rows.shape[1])]
        terms.append(adv_contrastive_loss(model.disc[m], spec_anchors, cols, lam))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(terms))


def _alignment_loss(model: AhaModel, fs: ForwardState) -> Tensor:
    return lsa_loss_batched(fs.anchor["audio"].unit, fs.anchor["video"].unit,
                            model.lsa, fs.batch, fs.length)


def _cpc_loss(model: AhaModel, fs: ForwardState) -> Tensor:
    a_unit = fs.anchor["audio"].unit
    v_unit = fs.anchor["video"].unit
    h_v = _contexts(v_unit, model.cpc.cells_video, fs.batch, fs.length)
    h_a = _contexts(a_unit, model.cpc.cells_audio, fs.batch, fs.length)
    return cpc_loss(h_v, h_a, a_unit, v_unit, model.cpc, fs.batch, fs.length)


def assemble_losses(model: AhaModel, fs: ForwardState, plans: dict[str, AdvPlan] | None,
                    lam: float) -> tuple[dict[str, Tensor], Tensor]:
    cfg = model.config
    parts = {
        "l_a_recon": lambda: _reconstruction(model, fs, "audio"),
        "l_v_recon": lambda: _reconstruction(model, fs, "video"),
        "l_vq": lambda: _vq_loss(model, fs),
        "l_adv": (lambda: constant(0.0)) if cfg.no_grl
                 else lambda: _adversarial_loss(model, fs, plans, lam),
        "l_cpc": lambda: _cpc_loss(model, fs),
        "l_align": (lambda: constant(0.0)) if cfg.no_align
                   else lambda: _alignment_loss(model, fs),
    }
    losses: dict[str, Tensor] = {}
    for name, build in parts.items():
        try:
            losses[name] = build()
        except ArithmeticError as err:
            raise ArithmeticError(f"while computing {name}: {err}") from err
    total = losses["l_a_recon"]
    for name in ("l_v_recon", "l_vq", "l_adv", "l_cpc", "l_align"):
        total = add(total, losses[name])
    return losses, total


def _breakdown(losses: dict[str, Tensor], total: Tensor) -> LossBreakdown:
    values = {name: t.item() for name, t in losses.items()}
    for name, v in values.items():
        if not math.isfinite(v):
            raise ArithmeticError(f"loss component {name} is non-finite")
    return LossBreakdown(total=total.item(), **values)


def forward_losses(model: AhaModel, batch: Batch,
                   rng: np.random.Generator | None = None) -> LossBreakdown:
    """Pure loss evaluation: no parameter, codebook, or schedule updates.

    Anchor sampling needs randomness; pass ``rng`` to control it, else a
    fixed fresh generator keeps the call deterministic.
    """
    fs = _forward_features(model, batch)
    lam = 0.0 if model.config.no_grl else grl_lambda(model.schedule)
    plans = None
    if not model.config.no_grl:
        local_rng = rng if rng is not None else np.random.default_rng(0)
        plans = {m: plan_adversarial(fs, m, model.config, local_rng) for m in model.spec_mods}
    losses, total = assemble_losses(model, fs, plans, lam)
    return _breakdown(losses, total)


# ---------------------------------------------------------------------------
# Training step: critic phase, main phase, codebook EMA.
# ---------------------------------------------------------------------------

def _ema_statistics(model: AhaModel, fs: ForwardState) -> None:
    """Feed this step's assignments into the codebook EMA.

    Shared layers pool paired features: a code selected by either modality
    absorbs the midpoint of the two time-aligned features, so codes track
    the centroid of the joint distribution and actively pull the modality
    clouds together. Suffix layers see only the anchored modality.
    """
    size = model.stack.layers[0].size
    k = model.stack.shared_prefix
    for layer_idx, codebook in enumerate(model.stack.layers):
        if layer_idx < k:
            feats = {m: fs.full[m].layer_inputs[layer_idx] for m in MODALITIES}
            midpoints = 0.5 * (feats["audio"] + feats["video"])
            pools = {m: qz.assignments(midpoints, fs.full[m].indices[:, layer_idx], size)
                     for m in MODALITIES}
            qz.mm_ema_update(codebook, pools["audio"], pools["video"])
        else:
            anchored = fs.full[model.anchored]
            qz.mm_ema_update(codebook,
                             qz.assignments(anchored.layer_inputs[layer_idx],
                                            anchored.indices[:, layer_idx], size))


def train_step(model: AhaModel, batch: Batch) -> LossBreakdown:
    """One full optimization step.

    Phase 1 updates each critic on frozen features; phase 2 takes one main
    optimizer step on the total loss with gradient reversal active; then
    codebooks absorb this step's assignment statistics and the reversal
    schedule advances.
    """
    cfg = model.config
    lam = 0.0 if cfg.no_grl else grl_lambda(model.schedule)
    fs = _forward_features(model, batch)

    plans = None
    if not cfg.no_grl:
        plans = {m: plan_adversarial(fs, m, cfg, model.rng) for m in model.spec_mods}
        for m in model.spec_mods:
            plan = plans[m]
            spec_vals = fs.z_spec[m].values[plan.anchor_rows]
            unit_vals = fs.anchor[m].unit.values
            cand_vals = [unit_vals[plan.candidate_rows[:, j]]
                         for j in range(plan.candidate_rows.shape[1])]
            if cfg.grl_lr_follows_schedule:
                # keep the minimax balanced as the main lr anneals
                model.opt_disc[m].lr = cfg.grl_lr * (model.current_lr() / cfg.lr)
            for _ in range(cfg.grl_critic_iters):
                discriminator_update(model.disc[m], spec_vals, cand_vals, model.opt_disc[m])

    losses, total = assemble_losses(model, fs, plans, lam)
    result = _breakdown(losses, total)
    backward(total)
    model.opt_main.lr = model.current_lr()
    model.opt_main.step(model.main_parameters())

    _ema_statistics(model, fs)
    model._last_perplexities = shared_layer_perplexities(model, fs)
    model.schedule.p += 1
    model.step += 1
    return result


def shared_layer_perplexities(model: AhaModel, fs: ForwardState) -> list[float]:
    k = model.stack.shared_prefix
    size = model.stack.layers[0].size
    out = []
    for layer_idx in range(k):
        cols = [fs.full[m].indices[:, layer_idx] for m in MODALITIES]
        out.append(qz.perplexity(np.concatenate(cols), size))
    return out
