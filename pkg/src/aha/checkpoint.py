"""Versioned self-describing checkpoint container.

Plain text: a magic line, a JSON metadata line (config, counters, RNG
state), then named arrays with shape headers and one space-separated row of
``repr`` decimals per line. ``repr`` of a float64 round-trips bit-exactly,
so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import ConfigError
from .config import RunConfig
from .model import MODALITIES, AhaModel, stack_batch
from .optim import Adam

MAGIC = "AHA-CHECKPOINT"
VERSION = 1


def _named_arrays(model: AhaModel) -> list[tuple[str, np.ndarray]]:
    arrays: list[tuple[str, np.ndarray]] = [(name, p.values)
                                            for name, p in model.named_parameters()]
    for m in model.spec_mods:
        for i, p in enumerate(model.disc[m].parameters()):
            arrays.append((f"disc.{m}.{i}", p.values))
    for li, cb in enumerate(model.stack.layers):
        arrays.append((f"stack.{li}.embeddings", cb.embeddings))
        arrays.append((f"stack.{li}.cluster_size", cb.cluster_size))
        arrays.append((f"stack.{li}.embed_sum", cb.embed_sum))
    for i, (m1, v1) in enumerate(zip(model.opt_main.m, model.opt_main.v)):
        arrays.append((f"opt_main.m.{i}", m1))
        arrays.append((f"opt_main.v.{i}", v1))
    for mod in model.spec_mods:
        opt = model.opt_disc[mod]
        for i, (m1, v1) in enumerate(zip(opt.m, opt.v)):
            arrays.append((f"opt_disc.{mod}.m.{i}", m1))
            arrays.append((f"opt_disc.{mod}.v.{i}", v1))
    return arrays


def _format_array(name: str, arr: np.ndarray) -> str:
    arr2 = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    head = f"array {name} {arr.ndim} {' '.join(str(s) for s in arr.shape)}"
    rows = [" ".join(repr(float(v)) for v in row) for row in arr2]
    return "\n".join([head] + rows)


def save_checkpoint(path, model: AhaModel) -> None:
    meta = {
        "config": model.config.as_dict(),
        "step": model.step,
        "schedule_p": model.schedule.p,
        "opt_main_t": model.opt_main.t,
        "opt_disc_t": {m: model.opt_disc[m].t for m in model.spec_mods},
        "rng_state": model.rng.bit_generator.state,
    }
    lines = [f"{MAGIC} {VERSION}", "meta " + json.dumps(meta, sort_keys=True)]
    for name, arr in _named_arrays(model):
        lines.append(_format_array(name, arr))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _parse_arrays(lines: list[str], start: int) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    i = start
    while i < len(lines):
        line = lines[i]
        if line == "end":
            break
        if not line.startswith("array "):
            raise ConfigError(f"checkpoint: unexpected line {i + 1}: {line[:40]!r}")
        _, name, ndim, *shape = line.split()
        shape = tuple(int(s) for s in shape)
        n_rows = shape[0] if shape else 1
        if int(ndim) <= 1:
            n_rows = 1
        rows = []
        for r in range(n_rows):
            rows.append([float(v) for v in lines[i + 1 + r].split()])
        arr = np.array(rows, dtype=np.float64)
        arrays[name] = arr.reshape(shape)
        i += 1 + n_rows
    else:
        raise ConfigError("checkpoint: missing end marker")
    return arrays


def load_checkpoint(path) -> AhaModel:
    """Rebuild a model in the exact state it was saved in."""
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MAGIC):
        raise ConfigError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    if not lines[1].startswith("meta "):
        raise ConfigError(f"{path}: missing metadata line")
    meta = json.loads(lines[1][5:])
    arrays = _parse_arrays(lines, 2)

    config = RunConfig(**meta["config"])
    rng = np.random.default_rng(0)
    model = AhaModel(config, rng, init_batch=None)
    model.step = meta["step"]
    model.schedule.p = meta["schedule_p"]
    model.rng.bit_generator.state = meta["rng_state"]

    consumed = set()

    def take(name: str) -> np.ndarray:
        if name not in arrays:
            raise ConfigError(f"{path}: checkpoint missing array {name!r}")
        consumed.add(name)
        return arrays[name]

    for name, p in model.named_parameters():
        p.values = take(name)
    for m in model.spec_mods:
        for i, p in enumerate(model.disc[m].parameters()):
            p.values = take(f"disc.{m}.{i}")
    for li, cb in enumerate(model.stack.layers):
        cb.embeddings = take(f"stack.{li}.embeddings")
        cb.cluster_size = take(f"stack.{li}.cluster_size")
        cb.embed_sum = take(f"stack.{li}.embed_sum")

    def load_opt(opt: Adam, prefix: str, t: int) -> None:
        opt.t = t
        opt.m, opt.v = [], []
        i = 0
        while f"{prefix}.m.{i}" in arrays:
            opt.m.append(take(f"{prefix}.m.{i}"))
            opt.v.append(take(f"{prefix}.v.{i}"))
            i += 1

    load_opt(model.opt_main, "opt_main", meta["opt_main_t"])
    for mod in model.spec_mods:
        load_opt(model.opt_disc[mod], f"opt_disc.{mod}", meta["opt_disc_t"][mod])

    unused = set(arrays) - consumed
    if unused:
        raise ConfigError(f"{path}: unrecognized arrays {sorted(unused)[:5]}")
    return model
