"""Checkpoint directories: one ``.f32`` file per tensor plus ``model.json``."""
from __future__ import annotations

import hashlib
import os
import random
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .io import read_f32, read_json, write_f32, write_json


class NumericalError(RuntimeError):
    """A loss or parameter became non-finite during training."""


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; return a dedicated torch generator."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def state_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(directory: str | os.PathLike, module: torch.nn.Module, config: dict,
                    **metadata: Any) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy()
        fname = f"{name}.f32"
        write_f32(directory / fname, arr.astype(np.float32))
        tensors[name] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
    write_json(directory / "model.json", {"config": config, "tensors": tensors, **metadata})


def load_state(directory: str | os.PathLike) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return ``(model.json contents, state_dict)``."""
    directory = Path(directory)
    info = read_json(directory / "model.json")
    state = {}
    for name, spec in info["tensors"].items():
        arr, _ = read_f32(directory / spec["file"])
        t = torch.from_numpy(arr.reshape(spec["shape"]))
        if spec["dtype"].startswith("int"):
            t = t.to(torch.int64)
        state[name] = t
    return info, state


def check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite {what}: {value.detach().flatten()[:4].tolist()}")
