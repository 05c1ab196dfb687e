"""Checkpoint directories: ``manifest.json`` plus ``blobs.bin``.

The blob file is the concatenation of raw little-endian float32 arrays in
row-major order; the manifest indexes them by name with shape, byte offset and
length, and carries the config echo, frozen-component fingerprints, the step
count and RNG state.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, CorruptBlobError, FingerprintMismatchError, VersionMismatchError

FORMAT_VERSION = "msmedcap-ckpt/1"
MANIFEST = "manifest.json"
BLOBS = "blobs.bin"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    fingerprints: dict[str, str] = field(default_factory=dict)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    chunks = []
    offset = 0
    for name in sorted(ckpt.params):
        a = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        raw = a.tobytes()
        index[name] = {"shape": list(a.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": FORMAT_VERSION,
        "config": ckpt.config,
        "blobs": index,
        "fingerprints": ckpt.fingerprints,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    # blobs first; the manifest rename is the commit point
    _atomic_write(path / BLOBS, b"".join(chunks))
    _atomic_write(path / MANIFEST, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return path


def load_checkpoint(path: str | Path, live_fingerprints: dict[str, str] | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    `live_fingerprints` maps component name to the digest of the component in
    the current process; each must equal the recorded digest.
    """
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise ArtifactError(f"no checkpoint at {path} (missing {MANIFEST})")
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path / MANIFEST}: unreadable manifest ({exc.msg})") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {manifest.get('version')!r}, expected {FORMAT_VERSION!r}")
    try:
        raw = (path / BLOBS).read_bytes()
    except FileNotFoundError:
        raise CorruptBlobError(f"{path}: missing {BLOBS}") from None
    params = {}
    for name, entry in manifest["blobs"].items():
        shape = tuple(entry["shape"])
        off, length = entry["offset"], entry["length"]
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if length != expected or off < 0 or off + length > len(raw):
            raise CorruptBlobError(f"{path}: corrupt blob {name!r} (need {expected} bytes at {off}, file has {len(raw)})")
        params[name] = np.frombuffer(raw, dtype="<f4", count=length // 4, offset=off).reshape(shape).astype(np.float32)
    fingerprints = manifest.get("fingerprints", {})
    for key, live in (live_fingerprints or {}).items():
        if fingerprints.get(key) != live:
            raise FingerprintMismatchError(
                f"{path}: fingerprint of {key!r} does not match the live component "
                f"(recorded {str(fingerprints.get(key))[:12]}, live {live[:12]})"
            )
    return Checkpoint(
        params=params,
        config=manifest.get("config", {}),
        fingerprints=fingerprints,
        step=manifest.get("step", 0),
        rng_state=manifest.get("rng_state", {}),
        meta=manifest.get("meta", {}),
    )
