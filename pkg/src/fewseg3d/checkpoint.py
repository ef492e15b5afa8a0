"""Versioned checkpoint container: named weight arrays + a JSON meta manifest."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .errors import FormatError

CKPT_FORMAT = "fewseg3d-ckpt"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict):
    """Write named float arrays plus a meta dict (kind, hyperparams) to an npz."""
    header = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "meta": meta}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    payload = {f"arr/{k}": np.asarray(v) for k, v in arrays.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __header__=blob, **payload)
    return path


def load_checkpoint(path):
    """Read (arrays, meta); raises FormatError on a bad header or version."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint: missing file {path}")
    with np.load(path) as z:
        if "__header__" not in z:
            raise FormatError("checkpoint: missing __header__ entry")
        try:
            header = json.loads(bytes(z["__header__"]).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"checkpoint: unreadable header ({e})") from e
        if header.get("format") != CKPT_FORMAT:
            raise FormatError(f"checkpoint: format field {header.get('format')!r}")
        if header.get("version") != CKPT_VERSION:
            raise FormatError(f"checkpoint: version {header.get('version')} "
                              f"(expected {CKPT_VERSION})")
        arrays = {k[4:]: z[k] for k in z.files if k.startswith("arr/")}
    return arrays, header["meta"]


def params_digest(arrays: dict) -> str:
    """Order-independent sha256 over array names, dtypes, shapes and bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
