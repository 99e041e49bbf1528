"""
applylog.py

Append-only log of applied writes, one per physical server. Each record is the same canonical
encoding used on the wire, framed with a 4-byte length, so the file is just a sequence of frames.

Without a path the log lives in memory only (the simulator's default); with one, every append is also
written to disk and the log is replayed on open. A half-written final frame (a crash mid-append) is
dropped (and cut from the file) on open.
"""

import logging
import os
from enum import StrEnum
from pathlib import Path

from src import codec
from src.core import SchemaKey
from src.state import AppliedWrite, KeyState

logger = logging.getLogger(__name__)

BATCH_SIZE = 64


class FsyncPolicy(StrEnum):
    always = "always"
    batched = "batched"
    never = "never"


class ApplyLog:
    def __init__(self, path: Path | None = None, fsync: FsyncPolicy = FsyncPolicy.batched) -> None:
        self.path = path
        self.fsync = fsync
        self.entries: list[AppliedWrite] = []
        self._fd = -1
        self._unsynced = 0

        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if path.exists():
                data = path.read_bytes()
                frames = list(codec.read_frames(data))
                self.entries = [codec.decode_applied_write(b) for b in frames]
                valid = sum(codec.FRAME_HEADER.size + len(b) for b in frames)
                if valid < len(data):
                    logger.warning(f"Dropping {len(data) - valid} bytes of a torn append at the end of {path}")
                    os.truncate(path, valid)
                logger.info(f"Loaded {len(self.entries)} applied writes from {path}")
            self._fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND)

    def append(self, entry: AppliedWrite) -> None:
        self.entries.append(entry)
        if self._fd < 0:
            return

        os.write(self._fd, codec.frame(codec.encode_applied_write(entry)))
        self._unsynced += 1
        match self.fsync:
            case FsyncPolicy.always:
                self.sync()
            case FsyncPolicy.batched if self._unsynced >= BATCH_SIZE:
                self.sync()
            case _:
                pass

    def sync(self) -> None:
        if self._fd >= 0 and self._unsynced:
            os.fsync(self._fd)
            self._unsynced = 0

    def close(self) -> None:
        if self._fd >= 0:
            if self.fsync is not FsyncPolicy.never:
                self.sync()
            os.close(self._fd)
            self._fd = -1

    def replay(self) -> dict[SchemaKey, KeyState]:
        """Committed state implied by the log: the last value and version written per key, and the largest token."""

        state: dict[SchemaKey, KeyState] = {}
        for entry in self.entries:
            prior = state.get(entry.key)
            ks = KeyState(entry.value, entry.version, prior.max_seen if prior else None)
            if entry.token is not None:
                ks.observe(entry.token)
            state[entry.key] = ks
        return state

    def __len__(self) -> int:
        return len(self.entries)
