"""Checkpoint files: a version tag plus a flat map of parameter paths to arrays.

The container is numpy's .npz, which round-trips float64 arrays bit-exactly.
Parameter entries are stored under "p:<path>" and free-form metadata strings
under "meta:<key>"; "__version__" tags the layout.
"""

from __future__ import annotations

import numpy as np

from densecc.autodiff import Tensor

FORMAT_VERSION = "densecc-checkpoint-1"


def save_params(path, named: dict[str, Tensor], meta: dict[str, str] | None = None) -> None:
    payload: dict[str, np.ndarray] = {"__version__": np.array(FORMAT_VERSION)}
    for name, tensor in named.items():
        payload[f"p:{name}"] = np.ascontiguousarray(tensor.data)
    for key, value in (meta or {}).items():
        payload[f"meta:{key}"] = np.array(value)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_params(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with np.load(path, allow_pickle=False) as archive:
        version = str(archive["__version__"])
        if version != FORMAT_VERSION:
            raise ValueError(f"checkpoint format {version!r} not supported (expected {FORMAT_VERSION!r})")
        params: dict[str, np.ndarray] = {}
        meta: dict[str, str] = {}
        for key in archive.files:
            if key.startswith("p:"):
                params[key[2:]] = np.asarray(archive[key], dtype=np.float64)
            elif key.startswith("meta:"):
                meta[key[5:]] = str(archive[key])
    return params, meta


def restore_into(named: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter map, validating coverage and shapes."""
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise ValueError(f"checkpoint does not match model: missing={missing} unexpected={extra}")
    for name, tensor in named.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}")
        tensor.data = arr.copy()
