"""Versioned ``.npz`` artifacts: named arrays plus a JSON metadata blob."""
from __future__ import annotations

import hashlib
import json

import numpy as np

FORMAT_VERSION = 1


class ArtifactError(ValueError):
    """Artifact is missing, of the wrong kind, or from an incompatible version."""


def save(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    header = {"kind": kind, "version": FORMAT_VERSION, "meta": meta or {}}
    payload = {f"a_{k}": np.asarray(v) for k, v in arrays.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                 **payload)


def load(path, kind: str) -> tuple[dict, dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            arrays = {k[2:]: z[k] for k in z.files if k.startswith("a_")}
    except FileNotFoundError:
        raise
    except (KeyError, ValueError, OSError) as exc:
        raise ArtifactError(f"{path}: not a thermosoc artifact ({exc})") from None
    if header.get("kind") != kind:
        raise ArtifactError(f"{path}: expected a {kind!r} artifact, found {header.get('kind')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"{path}: artifact version {header.get('version')} != {FORMAT_VERSION}")
    return arrays, header["meta"]


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
