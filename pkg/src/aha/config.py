"""Run configuration: one flat record of every tunable, plus profiles.

Field defaults follow the published training recipe at full scale; the
``desk`` profile shrinks widths and batch so a complete run takes seconds
on one CPU core. Config files are flat ``key = value`` text whose keys must
match field names exactly; unknown keys abort.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from .autodiff import ConfigError

ANCHOR_MODES = ("audio", "video", "symmetric-stub")
SEED_ENV_VAR = "AHA_SEED"


@dataclass
class RunConfig:
    # representation widths
    codebook_size: int = 512
    embed_dim: int = 512
    spec_dim: int = 512            # modality-specific branch width
    shared_layers: int = 1         # semantic anchor depth k
    audio_extra_layers: int = 3    # suffix layers beyond the anchor

    # predictive coding
    cpc_hidden: int = 256
    cpc_context: int = 256
    cpc_steps: int = 1
    cpc_layers: int = 1            # single gated recurrent layer by default

    # adversarial decoupler
    velocity_ratio: float = 0.4    # fraction of transitions sampled as anchors
    negative_ratio: float = 0.75   # candidate set size = round(ratio * batch)
    tau: float = 0.1               # shared softmax temperature
    lambda_max: float = 1.0
    velocity_eps: float = 1e-8
    disc_hidden: int = 128
    grl_lr: float = 1e-4
    grl_critic_iters: int = 1  # critic gradient steps inside the phase-1 update
    grl_lr_follows_schedule: bool = False  # scale critic lr with the main decay

    # alignment
    window: int = 5                # local window width; radius = (window-1)/2
    n_pos: int = 1

    # quantizer
    gamma: float = 0.99            # EMA decay
    beta: float = 0.25             # commitment coefficient

    # optimization
    batch_size: int = 96
    lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    total_steps: int = 800
    checkpoint_every: int = 200

    # synthetic data
    seq_len: int = 20
    n_classes: int = 4
    dim_audio: int = 32
    dim_video: int = 32
    nuisance_dim: int = 8
    nuisance_std: float = 0.35
    noise_std: float = 0.1
    event_min: int = 3
    event_max: int = 8
    n_samples: int = 100
    seed: int = 0

    # ablations
    no_grl: bool = False
    no_align: bool = False
    anchor: str = "audio"

    def __post_init__(self):
        if self.anchor not in ANCHOR_MODES:
            raise ConfigError(f"anchor must be one of {ANCHOR_MODES}, got {self.anchor!r}")
        if self.shared_layers < 1:
            raise ConfigError("shared_layers must be >= 1")
        if self.audio_extra_layers < 0:
            raise ConfigError("audio_extra_layers must be >= 0")
        if not (0 < self.negative_ratio <= 1):
            raise ConfigError("negative_ratio must lie in (0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 to supply negatives")

    @property
    def num_layers(self) -> int:
        return self.shared_layers + self.audio_extra_layers

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


PROFILES: dict[str, dict] = {
    "paper": {},
    "desk": {
        "codebook_size": 32,
        "embed_dim": 16,
        "spec_dim": 16,
        "cpc_hidden": 32,
        "cpc_context": 32,
        "disc_hidden": 64,
        "batch_size": 16,
        "total_steps": 800,
        "checkpoint_every": 200,
        "lr": 1e-3,
        "n_samples": 100,
    },
}


def _coerce(name: str, raw: str, target_type: type):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {name}: cannot parse {raw!r} as bool")
    try:
        return target_type(raw)
    except ValueError as err:
        raise ConfigError(f"config key {name}: {err}") from err


def parse_config_file(path) -> dict:
    """Read flat ``key = value`` text; '#' starts a comment; unknown keys abort."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in dataclasses.fields(RunConfig)}
    out: dict = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def build_config(config_path=None, profile: str | None = None,
                 overrides: dict | None = None) -> RunConfig:
    """Layer defaults < profile < config file < explicit overrides < seed env var."""
    if profile is not None and profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged: dict = {}
    if profile:
        merged.update(PROFILES[profile])
    if config_path is not None:
        merged.update(parse_config_file(config_path))
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        merged["seed"] = int(env_seed)
    return RunConfig(**merged)
