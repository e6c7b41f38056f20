"""Synthetic paired two-modality sequences with known factorization.

Each sample shares one piecewise-constant semantic class track across both
modalities; every modality adds its own independent nuisance latents and
observation noise. Class and nuisance subspaces are spanned by disjoint
columns of a single random orthonormal basis per modality, so the factors
stay well conditioned and a linear probe on the raw observations can
recover the classes -- the task is solvable before any model touches it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import ConfigError


@dataclass(frozen=True)
class SceneSpec:
    """Shape and difficulty of the generated scenes."""

    length: int = 20          # timesteps per sequence
    n_classes: int = 4
    event_min: int = 3        # class segment duration range, in timesteps
    event_max: int = 8
    dim_audio: int = 32
    dim_video: int = 32
    nuisance_dim: int = 8
    nuisance_std: float = 0.35  # latent scale; keeps class displacement dominant
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.length < 2:
            raise ConfigError("length must be >= 2")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if not (1 <= self.event_min <= self.event_max):
            raise ConfigError("event duration range invalid")
        if self.nuisance_dim < 0 or self.noise_std < 0 or self.nuisance_std < 0:
            raise ConfigError("nuisance_dim, nuisance_std and noise_std must be nonnegative")
        for dim in (self.dim_audio, self.dim_video):
            if dim < self.n_classes + self.nuisance_dim:
                raise ConfigError("observed dim too small for class + nuisance subspaces")


@dataclass
class PairedSample:
    """One paired sequence with its ground-truth factors."""

    x_audio: np.ndarray     # (T, dim_audio)
    x_video: np.ndarray     # (T, dim_video)
    labels: np.ndarray      # (T,) ints
    nuisance_audio: np.ndarray  # (T, nuisance_dim)
    nuisance_video: np.ndarray


@lru_cache(maxsize=8)
def _mixing(spec: SceneSpec):
    """Per-seed orthonormal class/nuisance mixing matrices for both modalities."""
    rng = np.random.default_rng([spec.seed, 0x5EED])
    out = {}
    for name, dim in (("audio", spec.dim_audio), ("video", spec.dim_video)):
        basis, _ = np.linalg.qr(rng.normal(size=(dim, spec.n_classes + spec.nuisance_dim)))
        out[name] = (basis[:, :spec.n_classes], basis[:, spec.n_classes:])
    return out


def _class_track(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    labels = np.empty(spec.length, dtype=np.int64)
    t = 0
    previous = -1
    while t < spec.length:
        duration = int(rng.integers(spec.event_min, spec.event_max + 1))
        # consecutive segments always change class, so observed run lengths
        # respect the configured duration range; the marginal stays uniform
        choices = [c for c in range(spec.n_classes) if c != previous]
        cls = int(choices[rng.integers(len(choices))])
        labels[t:t + duration] = cls
        previous = cls
        t += duration
    return labels


def generate_sample(spec: SceneSpec, index: int) -> PairedSample:
    """Deterministic for a given (spec.seed, index)."""
    if index < 0:
        raise ConfigError("sample index must be nonnegative")
    rng = np.random.default_rng([spec.seed, index])
    labels = _class_track(spec, rng)
    onehot = np.zeros((spec.length, spec.n_classes))
    onehot[np.arange(spec.length), labels] = 1.0
    mix = _mixing(spec)
    sample = {}
    nuisances = {}
    for name in ("audio", "video"):
        class_cols, nuis_cols = mix[name]
        nuis = spec.nuisance_std * rng.normal(size=(spec.length, spec.nuisance_dim))
        noise = rng.normal(size=(spec.length, class_cols.shape[0]))
        sample[name] = onehot @ class_cols.T + nuis @ nuis_cols.T + spec.noise_std * noise
        nuisances[name] = nuis
    return PairedSample(sample["audio"], sample["video"], labels,
                        nuisances["audio"], nuisances["video"])


@dataclass
class Dataset:
    """Memory-resident samples with an 80/20 train/probe split by index."""

    spec: SceneSpec
    samples: list[PairedSample]
    train_idx: np.ndarray
    probe_idx: np.ndarray

    @property
    def train(self) -> list[PairedSample]:
        return [self.samples[i] for i in self.train_idx]

    @property
    def probe(self) -> list[PairedSample]:
        return [self.samples[i] for i in self.probe_idx]


def generate_dataset(spec: SceneSpec, n_samples: int) -> Dataset:
    if n_samples < 2:
        raise ConfigError("need at least two samples to split")
    samples = [generate_sample(spec, i) for i in range(n_samples)]
    cut = int(round(0.8 * n_samples))
    return Dataset(spec, samples,
                   train_idx=np.arange(cut),
                   probe_idx=np.arange(cut, n_samples))


def dump_dataset(dataset: Dataset, path) -> None:
    """Self-describing columnar text dump for cross-implementation checks."""
    fields = [
        ("x_audio", (dataset.spec.length, dataset.spec.dim_audio)),
        ("x_video", (dataset.spec.length, dataset.spec.dim_video)),
        ("labels", (dataset.spec.length,)),
        ("nuisance_audio", (dataset.spec.length, dataset.spec.nuisance_dim)),
        ("nuisance_video", (dataset.spec.length, dataset.spec.nuisance_dim)),
    ]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"samples {len(dataset.samples)}\n")
        for name, shape in fields:
            fh.write(f"field {name} shape {' '.join(str(s) for s in shape)}\n")
        for i, s in enumerate(dataset.samples):
            fh.write(f"sample {i}\n")
            for name, _ in fields:
                arr = getattr(s, name.replace("x_", "x_"))
                flat = np.asarray(arr).reshape(-1)
                fh.write(" ".join(repr(float(v)) if arr.dtype.kind == "f" else str(int(v))
                                  for v in flat) + "\n")
