"""Self-describing checkpoint containers with content digests."""
from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch

FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, meta: dict, state: dict) -> str:
    """Write ``{kind, meta, state}`` with ``torch.save`` and return its sha256.

    ``torch.save`` output is byte-stable for identical tensors, so the digest
    identifies the trained parameters.
    """
    buf = io.BytesIO()
    torch.save({"format": FORMAT_VERSION, "kind": kind, "meta": meta, "state": state}, buf)
    data = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, kind: str | None = None) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if kind is not None and blob.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {blob.get('kind')!r}")
    return blob


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
