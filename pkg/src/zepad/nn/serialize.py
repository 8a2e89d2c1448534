"""Checkpoint persistence: npz array container plus a JSON manifest.

Every checkpoint is a pair of files, ``<stem>.npz`` holding the arrays
and ``<stem>.json`` holding provenance (architecture id, epoch, seed,
loss weight, config hash, branch role).  Writes go through a temp file
and an atomic rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import Module
from .models import build_encoder


def weights_hash(module: Module) -> str:
    """SHA-256 over all parameters and buffers in sorted key order."""
    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        h.update(key.encode())
        h.update(np.ascontiguousarray(state[key]).tobytes())
    return h.hexdigest()


def atomic_write_bytes(path: Path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str):
    atomic_write_bytes(Path(path), text.encode())


def save_checkpoint(path: str | Path, module: Module, manifest: Optional[dict] = None):
    """Write module weights to <path>.npz and its manifest to <path>.json."""
    path = Path(path)
    if path.suffix == ".npz":
        path = path.with_suffix("")
    import io

    buf = io.BytesIO()
    np.savez(buf, **module.state_dict())
    atomic_write_bytes(path.with_suffix(".npz"), buf.getvalue())
    info = dict(manifest or {})
    info.setdefault("architecture", getattr(module, "arch_id", module.__class__.__name__))
    info["weights_sha256"] = weights_hash(module)
    atomic_write_text(path.with_suffix(".json"), json.dumps(info, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path, module: Optional[Module] = None,
                    dtype=np.float32) -> tuple[Module, dict]:
    """Load a checkpoint; builds the module from the manifest if not given."""
    path = Path(path)
    if path.suffix == ".npz":
        path = path.with_suffix("")
    manifest = json.loads(path.with_suffix(".json").read_text())
    if module is None:
        module = build_encoder(manifest["architecture"], dtype=dtype)
    with np.load(path.with_suffix(".npz")) as z:
        module.load_state_dict({k: z[k] for k in z.files})
    return module, manifest
