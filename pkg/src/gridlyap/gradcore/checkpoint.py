"""JSON checkpoints for trained parameter sets.

Layout: ``{"version": 1, "arch": {...}, "parameters": {name: flat list},
"rng_seed": int, "episode": int}``.  Array shapes live in
``arch["shapes"]``.  Floats are serialized with Python's shortest
round-trip repr, so save -> load is bit-exact for float64 payloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    arch: dict
    parameters: dict[str, np.ndarray]
    rng_seed: int
    episode: int


def save_checkpoint(
    path,
    arch: dict,
    parameters: dict[str, np.ndarray],
    rng_seed: int,
    episode: int,
) -> None:
    arch = dict(arch)
    arch["shapes"] = {k: list(np.shape(v)) for k, v in parameters.items()}
    doc = {
        "version": CHECKPOINT_SCHEMA_VERSION,
        "arch": arch,
        "parameters": {
            k: np.asarray(v, dtype=np.float64).ravel().tolist()
            for k, v in parameters.items()
        },
        "rng_seed": int(rng_seed),
        "episode": int(episode),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValidationError(f"{path}: unknown checkpoint version {version!r}")
    arch = doc.get("arch")
    if not isinstance(arch, dict):
        raise ValidationError(f"{path}: arch: missing or not an object")
    shapes = arch.get("shapes", {})
    params = {}
    for name, flat in doc.get("parameters", {}).items():
        arr = np.asarray(flat, dtype=np.float64)
        if name in shapes:
            arr = arr.reshape(shapes[name])
        params[name] = arr
    return Checkpoint(
        arch=arch,
        parameters=params,
        rng_seed=int(doc.get("rng_seed", 0)),
        episode=int(doc.get("episode", 0)),
    )
