"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"CMKGCKPT"
    version    u32
    hdr_len    u32      followed by hdr_len bytes of UTF-8 JSON header
                        (format, version, config, config_hash, model state,
                        parameter manifest in declared order)
    tensors    per parameter, in manifest order:
                 ndim u32, shape u32 * ndim, data float64 * prod(shape)
    sections   repeated: name_len u32, name, body_len u64, body (UTF-8 JSON);
               "memory" holds the rehearsal bank, "trainer" the run state
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import DualStreamModel
from .errors import VersionError
from .memory import MemoryBank

MAGIC = b"CMKGCKPT"
VERSION = 1


def _section(name: str, obj) -> bytes:
    body = json.dumps(obj, separators=(",", ":"), sort_keys=True).encode("utf-8")
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(body)) + body


def encode_checkpoint(model: DualStreamModel, config: dict | None = None, config_hash: str = "",
                      sections: dict | None = None) -> bytes:
    header = {
        "format": "cmkg-checkpoint",
        "version": VERSION,
        "config": config or {},
        "config_hash": config_hash,
        "model": model.state(),
        "params": [[name, list(p.shape), p.tag] for name, p in model.params.items()],
    }
    hdr = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hdr)), hdr]
    for p in model.params.values():
        parts.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    for name, obj in (sections or {}).items():
        parts.append(_section(name, obj))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray], dict]:
    """-> (header, name -> array, section name -> object)."""
    if blob[:8] != MAGIC:
        raise VersionError("not a cmkg checkpoint (bad magic)")
    if len(blob) < 16:
        raise VersionError("truncated checkpoint header")
    version, hdr_len = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 16
    try:
        header = json.loads(blob[pos : pos + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VersionError(f"corrupt checkpoint header: {e}") from None
    if header.get("format") != "cmkg-checkpoint" or header.get("version") != version:
        raise VersionError("checkpoint header does not match its version field")
    pos += hdr_len
    arrays: dict[str, np.ndarray] = {}
    try:
        for name, shape, _tag in header["params"]:
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            got = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            if list(got) != list(shape):
                raise VersionError(f"parameter {name}: stored shape {got} != manifest {shape}")
            n = int(np.prod(got)) if ndim else 1
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(got).astype(np.float64)
            pos += 8 * n
        sections = {}
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            sname = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (blen,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            sections[sname] = json.loads(blob[pos : pos + blen].decode("utf-8"))
            pos += blen
    except (struct.error, ValueError) as e:
        if isinstance(e, VersionError):
            raise
        raise VersionError(f"truncated or corrupt checkpoint body: {e}") from None
    return header, arrays, sections


def save_model(path, model: DualStreamModel, config: dict | None = None, config_hash: str = "") -> None:
    Path(path).write_bytes(encode_checkpoint(model, config, config_hash))


def load_model(path) -> DualStreamModel:
    header, arrays, _ = decode_checkpoint(Path(path).read_bytes())
    return DualStreamModel.from_state(header["model"], arrays)


def save_checkpoint(path, trainer) -> None:
    """Model + memory bank + run state at a task boundary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = {"trainer": _asdict(trainer.cfg), "encoder": _asdict(trainer.ecfg), "distill": _asdict(trainer.dcfg)}
    sections = {"memory": trainer.memory.to_dict(), "trainer": trainer.state_dict()}
    path.write_bytes(encode_checkpoint(trainer.model, config, trainer.config_hash, sections))


def restore_checkpoint(path, trainer) -> None:
    """Load a task-boundary checkpoint into a freshly constructed trainer."""
    header, arrays, sections = decode_checkpoint(Path(path).read_bytes())
    if trainer.config_hash and header.get("config_hash") != trainer.config_hash:
        raise VersionError("checkpoint was written under a different configuration")
    trainer.model = DualStreamModel.from_state(header["model"], arrays)
    trainer.memory = MemoryBank.from_dict(sections["memory"])
    trainer.load_state_dict(sections["trainer"])


def _asdict(obj) -> dict:
    import dataclasses

    return dataclasses.asdict(obj)
