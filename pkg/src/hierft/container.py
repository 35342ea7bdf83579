"""Framing shared by corpus and checkpoint files.

Layout: 8-byte little-endian manifest length, UTF-8 JSON manifest, then a raw
payload whose length the manifest declares under ``payload_bytes``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

from .errors import CorruptionError, FormatError

_HEADER = struct.Struct("<Q")


def dumps_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def write(path, manifest: dict, payload: bytes):
    manifest = dict(manifest, payload_bytes=len(payload))
    head = dumps_manifest(manifest)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def read(path, kind: str, version: int) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptionError(f"{path}: file too short for a header")
    (n,) = _HEADER.unpack_from(raw)
    if _HEADER.size + n > len(raw):
        raise CorruptionError(f"{path}: manifest length {n} exceeds file size {len(raw)}")
    try:
        manifest = json.loads(raw[_HEADER.size:_HEADER.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable manifest ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != kind:
        raise FormatError(f"{path}: not a {kind} file")
    if manifest.get("version") != version:
        raise FormatError(f"{path}: {kind} version {manifest.get('version')!r}, expected {version}")
    payload = raw[_HEADER.size + n:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CorruptionError(
            f"{path}: payload is {len(payload)} bytes but the manifest declares {manifest.get('payload_bytes')}")
    return manifest, payload
