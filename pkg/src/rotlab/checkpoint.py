"""Checkpoint container: a JSON manifest plus one raw little-endian float64 blob per tensor."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_checkpoint(path: str | Path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> str:
    """Write a checkpoint directory atomically; returns its content hash.

    The content hash covers the manifest, which in turn lists every blob's
    sha256, so equal hashes mean bit-identical checkpoints.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / "tensors").mkdir()
        entries = []
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            blob = arr.tobytes()
            rel = f"tensors/{name}.f64"
            (tmp / rel).write_bytes(blob)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                            "path": rel, "sha256": sha256_bytes(blob)})
        manifest = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta, "tensors": entries}
        text = _dump(manifest)
        (tmp / MANIFEST).write_text(text)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return sha256_bytes(text.encode())


def load_checkpoint(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns ``(manifest, tensors)``."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    if kind is not None and manifest["kind"] != kind:
        raise ValueError(f"{path} holds a {manifest['kind']!r} checkpoint, expected {kind!r}")
    tensors = {}
    for e in manifest["tensors"]:
        blob = (path / e["path"]).read_bytes()
        if sha256_bytes(blob) != e["sha256"]:
            raise ValueError(f"tensor {e['name']} fails its checksum")
        tensors[e["name"]] = np.frombuffer(blob, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return manifest, tensors


def checkpoint_hash(path: str | Path) -> str:
    return sha256_file(Path(path) / MANIFEST)


def write_atomic(path: str | Path, text: str) -> str:
    """Write text via temp file + rename, plus a ``.sha256`` sidecar; returns the hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = sha256_bytes(text.encode())
    for target, body in ((path, text), (path.with_name(path.name + ".sha256"), f"{digest}  {path.name}\n")):
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        with os.fdopen(fd, "w", newline="") as f:
            f.write(body)
        os.replace(tmp, target)
    return digest
