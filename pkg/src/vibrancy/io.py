"""Array and table persistence.

Arrays are stored as raw little-endian float32 (``<name>.f32``) next to a JSON
sidecar (``<name>.meta.json``) holding at least ``shape`` and ``dtype``. Every
write goes through a temporary file followed by ``os.replace`` so a crash never
leaves a half-written artifact behind.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

F32 = np.dtype("<f4")


def _sidecar(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name[: -len(".f32")] + ".meta.json")


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | os.PathLike) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_f32(path: str | os.PathLike, array: np.ndarray, **meta: Any) -> None:
    """Write ``array`` as ``.f32`` plus its sidecar.

    Extra keyword arguments (``start_time``, ``step_hours``, ``bbox``...) are
    stored verbatim in the sidecar.
    """
    path = Path(path)
    if path.suffix != ".f32":
        raise ValueError(f"expected a .f32 path, got {path}")
    arr = np.ascontiguousarray(np.asarray(array, dtype=F32))
    atomic_write_bytes(path, arr.tobytes(order="C"))
    sidecar = {"shape": list(arr.shape), "dtype": "f32"}
    sidecar.update({k: v for k, v in meta.items() if v is not None})
    write_json(_sidecar(path), sidecar)


def read_f32(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    """Return ``(array, sidecar)`` for a ``.f32`` file."""
    path = Path(path)
    meta = read_json(_sidecar(path))
    if meta.get("dtype", "f32") != "f32":
        raise ValueError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    shape = tuple(int(s) for s in meta["shape"])
    raw = path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * F32.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: {len(raw)} bytes on disk, shape {shape} needs {expected}")
    arr = np.frombuffer(raw, dtype=F32).reshape(shape).copy()
    return arr, meta


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    lines: list[str] = []

    class _Sink:
        def write(self, s: str) -> None:
            lines.append(s)

    writer = csv.writer(_Sink(), lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, "".join(lines))


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(root: str | os.PathLike, exclude: Sequence[str] = ("manifest.json",)) -> str:
    """Hash every file below ``root`` (names and contents, sorted)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        if p.name in exclude or p.name.startswith("."):
            continue
        h.update(str(p.relative_to(root)).encode())
        h.update(file_sha256(p).encode())
    return h.hexdigest()
