"""Array archives, line-delimited records, and checkpoint persistence.

Archives are plain ``.npz`` files (named n-dimensional arrays with dtype and
shape headers). Records are JSONL, one object per line, append-only with a
monotone ``step`` field. A checkpoint is a directory holding ``params.npz``
(named parameter tensors), ``manifest.json`` (config hash, step count, extras)
and optionally ``optim.npz`` with optimizer and RNG state for resuming.

Zip containers embed timestamps, so byte-level comparison of archives is not
reproducible; ``archive_hash`` hashes names, dtypes, shapes and raw array
bytes instead and is the canonical identity of an archive's content.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch


class ConfigHashMismatch(RuntimeError):
    """Artifact was produced under a different configuration."""


class RecordOrderError(RuntimeError):
    """Record step index went backwards."""


# ---------------------------------------------------------------------------
# array archives


def save_archive(path: str | Path, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{k: np.asarray(v) for k, v in arrays.items()})
    return path


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


def arrays_hash(arrays: Mapping[str, np.ndarray]) -> str:
    """Content hash over names, dtypes, shapes and raw bytes, order-free."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def archive_hash(path: str | Path) -> str:
    return arrays_hash(load_archive(path))


# ---------------------------------------------------------------------------
# records


class RecordWriter:
    """Append-only JSONL writer enforcing monotone step indices."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._last_step = -1
        if self.path.exists():
            existing = read_records(self.path)
            if existing:
                self._last_step = int(existing[-1].get("step", -1))

    def append(self, record: Mapping) -> None:
        step = int(record.get("step", self._last_step + 1))
        if step < self._last_step:
            raise RecordOrderError(f"step {step} < last recorded step {self._last_step}")
        self._last_step = step
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(dict(record), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def state_dict_to_arrays(state: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def arrays_to_state_dict(arrays: Mapping[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}


def save_checkpoint(
    ckpt_dir: str | Path,
    params: Mapping[str, torch.Tensor],
    manifest: Mapping,
    optim: Mapping[str, np.ndarray] | None = None,
) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_archive(ckpt_dir / "params.npz", state_dict_to_arrays(params))
    with open(ckpt_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(dict(manifest), fh, indent=2, sort_keys=True)
    if optim is not None:
        save_archive(ckpt_dir / "optim.npz", optim)
    return ckpt_dir


def load_checkpoint(
    ckpt_dir: str | Path,
    expected_config_hash: str | None = None,
    force: bool = False,
) -> tuple[dict[str, torch.Tensor], dict, dict[str, np.ndarray] | None]:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if expected_config_hash is not None and not force:
        found = manifest.get("config_hash")
        if found != expected_config_hash:
            raise ConfigHashMismatch(
                f"checkpoint {ckpt_dir} has config hash {found!r}, "
                f"expected {expected_config_hash!r} (pass force to override)"
            )
    params = arrays_to_state_dict(load_archive(ckpt_dir / "params.npz"))
    optim = None
    if (ckpt_dir / "optim.npz").exists():
        optim = load_archive(ckpt_dir / "optim.npz")
    return params, manifest, optim


def checkpoint_content_hash(ckpt_dir: str | Path) -> str:
    """Hash of parameter content plus manifest, independent of zip metadata."""
    ckpt_dir = Path(ckpt_dir)
    h = hashlib.sha256()
    h.update(archive_hash(ckpt_dir / "params.npz").encode())
    with open(ckpt_dir / "manifest.json", "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def module_params_hash(module: torch.nn.Module) -> str:
    return arrays_hash(state_dict_to_arrays(module.state_dict()))


def optimizer_state_to_arrays(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    """Flatten an Adam-family optimizer state into named arrays."""
    out: dict[str, np.ndarray] = {}
    state = opt.state_dict()
    out["__meta__"] = np.frombuffer(
        json.dumps(state["param_groups"], sort_keys=True).encode("utf-8"), dtype=np.uint8
    ).copy()
    for pid, pstate in state["state"].items():
        for key, val in pstate.items():
            if isinstance(val, torch.Tensor):
                out[f"state.{pid}.{key}"] = val.detach().cpu().numpy()
            else:
                out[f"state.{pid}.{key}"] = np.asarray(val)
    return out


def arrays_to_optimizer_state(arrays: Mapping[str, np.ndarray]) -> dict:
    groups = json.loads(bytes(arrays["__meta__"]).decode("utf-8"))
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if name == "__meta__":
            continue
        _, pid, key = name.split(".", 2)
        entry = state.setdefault(int(pid), {})
        arr = np.asarray(arr)
        if arr.ndim == 0 and key == "step":
            entry[key] = torch.tensor(arr)
        else:
            entry[key] = torch.from_numpy(arr)
    return {"state": state, "param_groups": groups}
