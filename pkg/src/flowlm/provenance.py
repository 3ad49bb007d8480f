"""Content digests, so artifacts record what they were built from rather than where."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def checkpoint_digest(path: str | os.PathLike) -> str:
    p = Path(path)
    return hashlib.sha256((file_digest(p / "manifest.json") + file_digest(p / "weights.bin")).encode()).hexdigest()[:16]


def file_ref(path: str | os.PathLike) -> dict:
    return {"file": os.path.basename(os.fspath(path)), "digest": file_digest(path)}
