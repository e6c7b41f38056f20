"""Training runs, cross-modal and leakage probes, and run reports.

A run directory holds the echoed config, one JSON-lines metrics file with
a record per step, periodic and final checkpoints, probe outputs, and the
assembled report. Probes never write to the checkpoint they read.
"""

from __future__ import annotations

import json
import time
import warnings
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, add, backward, constant, matmul, softmax_cross_entropy_rows, tanh
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .disentangle import grl_lambda
from .model import AhaModel, _forward_features, stack_batch, train_step
from .optim import Adam
from .synthdata import Dataset, SceneSpec, generate_dataset

METRICS_FILE = "metrics.jsonl"
FINAL_CHECKPOINT = "checkpoint_final.txt"
REPORT_FILE = "report.json"


def scene_spec(config: RunConfig) -> SceneSpec:
    return SceneSpec(length=config.seq_len, n_classes=config.n_classes,
                     event_min=config.event_min, event_max=config.event_max,
                     dim_audio=config.dim_audio, dim_video=config.dim_video,
                     nuisance_dim=config.nuisance_dim, nuisance_std=config.nuisance_std,
                     noise_std=config.noise_std, seed=config.seed)


def dataset_for(config: RunConfig) -> Dataset:
    return generate_dataset(scene_spec(config), config.n_samples)


class TrainingDiverged(ArithmeticError):
    """A loss component went non-finite; the run was aborted."""


def metrics_record(model: AhaModel, breakdown, lam: float, wall_clock: float) -> dict:
    record = {"step": model.step, "epoch": model.step // model.steps_per_epoch}
    record.update(breakdown.as_dict())
    record["lam"] = lam
    record["lr"] = model.opt_main.lr
    record["perplexity"] = model._last_perplexities
    record["wall_clock"] = wall_clock
    return record


def run_training(config: RunConfig, out_dir) -> tuple[Path, Path]:
    """Train per config; returns (final checkpoint path, metrics path)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.as_dict(), indent=2, sort_keys=True))

    data = dataset_for(config)
    rng = np.random.default_rng(config.seed)
    init = stack_batch(data.train[:config.batch_size])
    model = AhaModel(config, rng, init_batch=init)

    metrics_path = out / METRICS_FILE
    final_path = out / FINAL_CHECKPOINT
    started = time.time()
    n_train = len(data.train)
    with open(metrics_path, "w", encoding="ascii") as metrics:
        for _ in range(config.total_steps):
            picks = model.rng.choice(n_train, size=min(config.batch_size, n_train),
                                     replace=False)
            batch = stack_batch([data.train[int(i)] for i in picks])
            lam = 0.0 if config.no_grl else grl_lambda(model.schedule)
            try:
                breakdown = train_step(model, batch)
            except ArithmeticError as err:
                metrics.flush()
                raise TrainingDiverged(f"step {model.step}: {err}") from err
            record = metrics_record(model, breakdown, lam, time.time() - started)
            metrics.write(json.dumps(record) + "\n")
            if config.checkpoint_every and model.step % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{model.step:06d}.txt", model)
    save_checkpoint(final_path, model)
    return final_path, metrics_path


# ---------------------------------------------------------------------------
# Feature extraction for probes (read-only).
# ---------------------------------------------------------------------------

def collect_features(model: AhaModel, samples) -> dict[str, np.ndarray]:
    """Frozen per-timestep features: anchor units per modality, specific
    features where the branch exists, and labels."""
    units_a, units_v, labels = [], [], []
    spec_feats: dict[str, list[np.ndarray]] = {m: [] for m in model.spec_mods}
    for sample in samples:
        batch = stack_batch([sample])
        fs = _forward_features(model, batch)
        units_a.append(fs.anchor["audio"].unit.values.copy())
        units_v.append(fs.anchor["video"].unit.values.copy())
        for m in model.spec_mods:
            spec_feats[m].append(fs.z_spec[m].values.copy())
        labels.append(sample.labels)
    out = {
        "audio_units": np.vstack(units_a),
        "video_units": np.vstack(units_v),
        "labels": np.concatenate(labels),
    }
    for m in model.spec_mods:
        out[f"{m}_spec"] = np.vstack(spec_feats[m])
    return out


def fit_linear_probe(x: np.ndarray, y: np.ndarray, n_classes: int,
                     lr: float = 2.0, max_iters: int = 2000,
                     tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray, bool]:
    """Softmax regression by full-batch gradient descent to convergence."""
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    previous = np.inf
    converged = False
    for _ in range(max_iters):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        loss = float(-np.mean(np.log(p[np.arange(len(y)), y] + 1e-300)))
        if previous - loss < tol:
            converged = True
            break
        previous = loss
        g = (p - onehot) / len(y)
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b, converged


def probe_accuracy(w, b, x, y) -> float:
    return float(np.mean((x @ w + b).argmax(axis=1) == y))


def cmg_probe(checkpoint_path, direction: str, dataset: Dataset | None = None) -> dict:
    """Train a linear head on one modality's units, evaluate zero-shot on the
    other modality's units from held-out samples."""
    if direction not in ("v2a", "a2v"):
        raise ad.ConfigError(f"direction must be v2a or a2v, got {direction!r}")
    model = load_checkpoint(checkpoint_path)
    data = dataset if dataset is not None else dataset_for(model.config)
    train_feats = collect_features(model, data.train)
    probe_feats = collect_features(model, data.probe)
    source, target = (("video_units", "audio_units") if direction == "v2a"
                      else ("audio_units", "video_units"))
    w, b, converged = fit_linear_probe(train_feats[source], train_feats["labels"],
                                       model.config.n_classes)
    if not converged:
        warnings.warn(f"cmg probe ({direction}) did not converge; reporting anyway")
    return {
        "direction": direction,
        "accuracy": probe_accuracy(w, b, probe_feats[target], probe_feats["labels"]),
        "source_accuracy": probe_accuracy(w, b, probe_feats[source], probe_feats["labels"]),
        "converged": converged,
    }


class MlpProbe:
    """Two-layer classifier used as a deliberately stronger leakage adversary."""

    def __init__(self, d_in: int, hidden: int, n_classes: int, rng: np.random.Generator):
        self.w1 = Tensor(rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, hidden)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, n_classes)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(n_classes), requires_grad=True)

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, x: Tensor) -> Tensor:
        h = tanh(add(matmul(x, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


def fit_mlp_probe(x: np.ndarray, y: np.ndarray, n_classes: int, seed: int = 0,
                  hidden: int = 64, epochs: int = 300, lr: float = 3e-3,
                  tol: float = 1e-6) -> tuple[MlpProbe, bool]:
    rng = np.random.default_rng(seed)
    probe = MlpProbe(x.shape[1], hidden, n_classes, rng)
    opt = Adam(lr=lr)
    onehot = np.eye(n_classes)[y]
    xt = constant(x)
    previous = np.inf
    converged = False
    for _ in range(epochs):
        loss = softmax_cross_entropy_rows(probe.logits(xt), onehot)
        if previous - loss.item() < tol:
            converged = True
            break
        previous = loss.item()
        backward(loss)
        opt.step(probe.params())
    return probe, converged


def leakage_probe(checkpoint_path, dataset: Dataset | None = None,
                  features: str | None = None) -> dict:
    """Classifier accuracy on the frozen modality-specific branch; lower
    accuracy means less semantic content leaked into it."""
    model = load_checkpoint(checkpoint_path)
    data = dataset if dataset is not None else dataset_for(model.config)
    branch = features
    if branch is None:
        branch = "video_spec" if "video" in model.spec_mods else "audio_spec"
    train_feats = collect_features(model, data.train)
    probe_feats = collect_features(model, data.probe)
    probe, converged = fit_mlp_probe(train_feats[branch], train_feats["labels"],
                                     model.config.n_classes, seed=model.config.seed)
    if not converged:
        warnings.warn("leakage probe did not converge; reporting anyway")
    logits = probe.logits(constant(probe_feats[branch])).values
    return {
        "branch": branch,
        "accuracy": float(np.mean(logits.argmax(axis=1) == probe_feats["labels"])),
        "converged": converged,
    }


# ---------------------------------------------------------------------------
# Reporting.
# ---------------------------------------------------------------------------

def read_metrics(path) -> list[dict]:
    with open(path, encoding="ascii") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def emit_report(run_dir) -> dict:
    """Summarize a run directory; missing inputs are an error naming them."""
    run = Path(run_dir)
    metrics_path = run / METRICS_FILE
    missing = [str(p) for p in (metrics_path,) if not p.exists()]
    if missing:
        raise FileNotFoundError(f"emit_report: missing inputs: {missing}")
    records = read_metrics(metrics_path)
    if not records:
        raise FileNotFoundError(f"emit_report: {metrics_path} is empty")
    config = json.loads((run / "config.json").read_text()) if (run / "config.json").exists() else {}

    tail = records[-max(len(records) // 5, 1):]
    final = records[-1]
    probes = {}
    for probe_file in sorted(run.glob("probe_*.json")) + sorted(run.glob("leakage.json")):
        probes[probe_file.stem] = json.loads(probe_file.read_text())

    report = {
        "steps": len(records),
        "final_losses": {k: final[k] for k in
                         ("l_a_recon", "l_v_recon", "l_vq", "l_adv", "l_cpc", "l_align", "total")},
        "lambda_start": records[0]["lam"],
        "lambda_end": final["lam"],
        "adv_plateau_mean": float(np.mean([r["l_adv"] for r in tail])),
        "adv_plateau_window": len(tail),
        "ablations": {k: config.get(k) for k in ("no_grl", "no_align", "anchor")},
        "probes": probes,
    }
    (run / REPORT_FILE).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
