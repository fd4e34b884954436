"""Pass-by-reference parameter transfer with per-edge byte accounting.

Parameters are stored once with :meth:`ParamStore.put` and travel through the
control plane as small :class:`ProxyRef` handles. A transfer is recorded in
the :class:`TransferLedger` only when a consumer resolves the reference, and
only along topology edges.
"""

from __future__ import annotations

import csv
import io
import os
import threading
import time
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

from hflight import model as _model
from hflight.model import ParamVector


class StoreClosedError(RuntimeError):
    pass


class UnknownKeyError(KeyError):
    pass


class IllegalEdgeError(RuntimeError):
    """A node resolved a proxy produced by a node it is not adjacent to."""


@dataclass(frozen=True)
class ProxyRef:
    key: str
    byte_size: int
    header_size: int
    producer: str

    @property
    def payload_size(self) -> int:
        return self.byte_size - self.header_size


@dataclass(frozen=True)
class Transfer:
    src: str
    dst: str
    bytes: int
    round: int
    timestamp_ns: int
    header_bytes: int = 0


class Connector:
    tag = "abstract"

    def put(self, blob: bytes) -> str:
        raise NotImplementedError

    def get(self, key: str) -> bytes:
        raise NotImplementedError

    def evict(self, key: str) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InMemoryConnector(Connector):
    tag = "in-memory"

    def __init__(self):
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, blob: bytes) -> str:
        key = uuid.uuid4().hex
        with self._lock:
            self._blobs[key] = bytes(blob)
        return key

    def get(self, key: str) -> bytes:
        with self._lock:
            try:
                return self._blobs[key]
            except KeyError:
                raise UnknownKeyError(key) from None

    def evict(self, key: str) -> None:
        with self._lock:
            self._blobs.pop(key, None)

    def __len__(self) -> int:
        return len(self._blobs)

    def __reduce__(self):
        raise TypeError("an in-memory connector cannot cross a process boundary; use SharedFileConnector")


class SharedFileConnector(Connector):
    """One file per key under ``run_dir``; usable from several processes."""

    tag = "shared-file"

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.run_dir / f"{key}.bin"

    def put(self, blob: bytes) -> str:
        key = uuid.uuid4().hex
        tmp = self.run_dir / f".{key}.tmp"
        tmp.write_bytes(blob)
        os.replace(tmp, self._path(key))
        return key

    def get(self, key: str) -> bytes:
        try:
            return self._path(key).read_bytes()
        except FileNotFoundError:
            raise UnknownKeyError(key) from None

    def evict(self, key: str) -> None:
        try:
            self._path(key).unlink()
        except FileNotFoundError:
            pass

    def __len__(self) -> int:
        return sum(1 for _ in self.run_dir.glob("*.bin"))


class TransferLedger:
    """Append-only, thread-safe log of resolved transfers."""

    def __init__(self, entries: Iterable[Transfer] = ()):
        self._entries: list[Transfer] = list(entries)
        self._lock = threading.Lock()

    def append(self, entry: Transfer) -> None:
        if entry.bytes <= 0:
            raise ValueError("transfers must move a positive number of bytes")
        with self._lock:
            self._entries.append(entry)

    def extend(self, entries: Iterable[Transfer]) -> None:
        for e in entries:
            self.append(e)

    def snapshot(self) -> list[Transfer]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.snapshot())

    def total_bytes(
        self,
        round: int | None = None,
        edge: tuple[str, str] | None = None,
        include_headers: bool = False,
    ) -> int:
        total = 0
        for e in self.snapshot():
            if round is not None and e.round != round:
                continue
            if edge is not None and (e.src, e.dst) != tuple(edge):
                continue
            total += e.bytes + (e.header_bytes if include_headers else 0)
        return total

    def edges(self) -> set[tuple[str, str]]:
        return {(e.src, e.dst) for e in self.snapshot()}

    def to_csv(self, clock_offset_ns: int | None = None) -> str:
        """CSV with columns from,to,bytes,round,timestamp (ISO-8601 UTC)."""
        if clock_offset_ns is None:
            clock_offset_ns = wall_clock_offset_ns()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["from", "to", "bytes", "round", "timestamp"])
        for e in self.snapshot():
            writer.writerow([e.src, e.dst, e.bytes, e.round, iso8601(e.timestamp_ns, clock_offset_ns)])
        return buf.getvalue()

    def __getstate__(self):
        return {"_entries": self.snapshot()}

    def __setstate__(self, state):
        self._entries = state["_entries"]
        self._lock = threading.Lock()


def wall_clock_offset_ns() -> int:
    return time.time_ns() - time.monotonic_ns()


def iso8601(monotonic_ns: int, offset_ns: int) -> str:
    wall = (monotonic_ns + offset_ns) / 1e9
    return datetime.fromtimestamp(wall, tz=timezone.utc).isoformat(timespec="microseconds")


class ParamStore:
    """Proxy store over a connector, restricted to the given adjacency."""

    def __init__(
        self,
        connector: Connector | None = None,
        adjacency: Iterable[tuple[str, str]] | None = None,
        ledger: TransferLedger | None = None,
    ):
        self.connector = connector if connector is not None else InMemoryConnector()
        self.adjacency = frozenset(adjacency) if adjacency is not None else None
        self.ledger = ledger if ledger is not None else TransferLedger()
        self._closed = False

    @classmethod
    def for_topology(cls, topology, connector: Connector | None = None) -> ParamStore:
        return cls(connector, topology.adjacent_pairs())

    def scoped(self) -> ParamStore:
        """Same connector and adjacency, with a fresh ledger for one job."""
        return ParamStore(self.connector, self.adjacency, TransferLedger())

    def __getstate__(self):
        return {"connector": self.connector, "adjacency": self.adjacency, "_closed": self._closed}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self.ledger = TransferLedger()

    def put(self, params: ParamVector, producer: str) -> ProxyRef:
        """Store ``params`` at single precision; no transfer is logged yet."""
        if self._closed:
            raise StoreClosedError("store is closed")
        blob = _model.encode(params)
        header = len(_model.encode_header(params))
        key = self.connector.put(blob)
        return ProxyRef(key, len(blob), header, producer)

    def resolve(self, ref: ProxyRef, consumer: str, round: int = 0) -> ParamVector:
        if self._closed:
            raise StoreClosedError("store is closed")
        if consumer != ref.producer and self.adjacency is not None:
            if (ref.producer, consumer) not in self.adjacency:
                raise IllegalEdgeError(f"{consumer!r} is not adjacent to producer {ref.producer!r}")
        blob = self.connector.get(ref.key)
        params = _model.decode(blob)
        if consumer != ref.producer:
            self.ledger.append(
                Transfer(ref.producer, consumer, ref.payload_size, round, time.monotonic_ns(), ref.header_size)
            )
        return params

    def evict(self, refs: Iterable[ProxyRef]) -> None:
        for ref in refs:
            self.connector.evict(ref.key)

    def close(self) -> None:
        self._closed = True
        self.connector.close()
