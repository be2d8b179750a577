"""Append-only command log.

Each record is framed as ``[u32 body_len][32-byte sha256(body)][body]`` where
body is the canonical serialization of one command record. Replaying the
records through a node's ``apply`` rebuilds its state.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
from pathlib import Path
from typing import Any, Protocol

from umafed.core import canonical_deserialize, canonical_serialize
from umafed.errors import CorruptLog, UnsupportedValue

logger = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
_PREFIX = _LEN.size + 32


class Journal:
    def __init__(self, path: str | os.PathLike[str], *, fsync: bool = False) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._fh = open(self.path, "ab")

    def append(self, record: Any) -> None:
        body = canonical_serialize(record)
        frame = _LEN.pack(len(body)) + hashlib.sha256(body).digest() + body
        with self._lock:
            self._fh.write(frame)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self) -> "Journal":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def read_journal(path: str | os.PathLike[str], *, repair: bool = False) -> list[Any]:
    """Read every intact record.

    A torn or corrupt tail raises :class:`CorruptLog` carrying the byte offset
    and the records before it. With ``repair`` the file is truncated at that
    offset instead and the intact records are returned.
    """
    path = Path(path)
    if not path.exists():
        return []
    data = path.read_bytes()
    records: list[Any] = []
    offset = 0
    while offset < len(data):
        problem = None
        if offset + _PREFIX > len(data):
            problem = "truncated record header"
        else:
            (length,) = _LEN.unpack_from(data, offset)
            checksum = data[offset + 4 : offset + _PREFIX]
            body = data[offset + _PREFIX : offset + _PREFIX + length]
            if len(body) < length:
                problem = "truncated record body"
            elif hashlib.sha256(body).digest() != checksum:
                problem = "record digest mismatch"
            else:
                try:
                    records.append(canonical_deserialize(body))
                except UnsupportedValue:
                    problem = "record body does not decode"
        if problem is not None:
            if not repair:
                raise CorruptLog(f"{path}: {problem} at offset {offset}", offset, records)
            logger.warning("truncating %s at offset %d: %s", path, offset, problem)
            with open(path, "r+b") as fh:
                fh.truncate(offset)
            return records
        offset += _PREFIX + length
    return records


class Replayable(Protocol):
    def apply(self, cmd: dict[str, Any]) -> None: ...


def persist_replay(node: Replayable, path: str | os.PathLike[str], *, repair: bool = False) -> int:
    """Apply every logged command to a freshly constructed node; returns the count."""
    records = read_journal(path, repair=repair)
    for record in records:
        node.apply(record)
    return len(records)
