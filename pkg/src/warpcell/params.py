"""Walking nested parameter dataclasses and saving them as checkpoints."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .tensor import load_tensor, save_tensor


def named_arrays(obj, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten every ndarray reachable through dataclass fields, keyed by dotted path."""
    out: dict[str, np.ndarray] = {}
    if obj is None:
        return out
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if isinstance(val, np.ndarray):
            out[key] = val
        elif dataclasses.is_dataclass(val):
            out.update(named_arrays(val, key + "."))
    return out


def map_arrays(fn, obj):
    """Copy of ``obj`` with ``fn`` applied to every array leaf."""
    if obj is None:
        return None
    changes = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, np.ndarray):
            changes[f.name] = fn(val)
        elif dataclasses.is_dataclass(val):
            changes[f.name] = map_arrays(fn, val)
    return dataclasses.replace(obj, **changes)


def zeros_like(obj):
    return map_arrays(np.zeros_like, obj)


def copy_params(obj):
    return map_arrays(np.copy, obj)


def save_arrays(directory, arrays: dict[str, np.ndarray]) -> None:
    """Write one ``.ten`` blob per array plus a ``manifest.txt`` index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in arrays.items():
        fname = name.replace("/", "_") + ".ten"
        save_tensor(directory / fname, arr)
        lines.append(f"{name} {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_arrays(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    out = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if line.strip():
            name, fname = line.split()
            out[name] = load_tensor(directory / fname)
    return out


def assign_arrays(obj, arrays: dict[str, np.ndarray]) -> None:
    """Copy ``arrays`` into the matching leaves of ``obj`` in place."""
    leaves = named_arrays(obj)
    missing = set(leaves) - set(arrays)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, leaf in leaves.items():
        if arrays[name].shape != leaf.shape:
            raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {leaf.shape}")
        leaf[...] = arrays[name]
