"""
Append-only operation log.

The log file is a sequence of frames:

    [u32 length][payload bytes][u64 FNV-1a of payload]

big-endian, payload = UTF-8 JSON of one operation entry
({"seq": n, "op": "upsert", "doc": {...}} or {"seq": n, "op": "delete",
"key": {"type": ..., "id": ...}}).

A frame cut short by a crash is dropped (and the file truncated back to the
last whole frame) when the log is reopened. A whole frame whose digest does
not match is corruption and raises CorruptFrame.
"""

import json
import logging
import os
import struct
import threading
from pathlib import Path

from modules.errors import CorruptFrame
from utils.fnv import fnv1a_64

logger = logging.getLogger(__name__)

LENGTH = struct.Struct(">I")
DIGEST = struct.Struct(">Q")


def encode_frame(entry: dict) -> bytes:
    payload = json.dumps(entry, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return LENGTH.pack(len(payload)) + payload + DIGEST.pack(fnv1a_64(payload))


def decode_frames(data: bytes) -> tuple[list[dict], int]:
    """
    Decode every whole frame in `data`.
    Returns (entries, end offset of the last whole frame).
    """
    entries = []
    pos = 0
    while True:
        if pos + LENGTH.size > len(data):
            break
        (length,) = LENGTH.unpack_from(data, pos)
        end = pos + LENGTH.size + length + DIGEST.size
        if end > len(data):
            break
        payload = data[pos + LENGTH.size: pos + LENGTH.size + length]
        (expected,) = DIGEST.unpack_from(data, pos + LENGTH.size + length)
        if fnv1a_64(payload) != expected:
            raise CorruptFrame(f"Frame at byte {pos} failed its digest check")
        try:
            entries.append(json.loads(payload.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptFrame(f"Frame at byte {pos} is not valid JSON: {e}") from None
        pos = end
    return entries, pos


class OpLog:
    def __init__(self, path: Path, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.touch()
        self._fh = open(self.path, "ab")

    def read_all(self) -> list[dict]:
        with self._lock:
            data = self.path.read_bytes()
            entries, good_end = decode_frames(data)
            if good_end < len(data):
                logger.warning(
                    "Op log %s has a torn tail (%d bytes), truncating",
                    self.path, len(data) - good_end,
                )
                self._fh.close()
                with open(self.path, "r+b") as f:
                    f.truncate(good_end)
                self._fh = open(self.path, "ab")
            return entries

    def append(self, entry: dict) -> None:
        frame = encode_frame(entry)
        with self._lock:
            self._fh.write(frame)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())

    def reset(self) -> None:
        """Drop every frame; called once a snapshot covers them."""
        with self._lock:
            self._fh.close()
            with open(self.path, "wb"):
                pass
            self._fh = open(self.path, "ab")

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()
