"""Durable, versioned storage of knowledge records.

Layout under the store root::

    tasks/<percent-encoded task_id>.journal   one append-only journal per task
    snapshots.json                            snapshot index

A journal is a sequence of pretty-printed JSON records in version order,
which keeps the evolution history of a task human-diffable. Records are
hashed over their canonical serialization (no timestamps), so snapshot
ids are a pure function of the latest-record set.

Writes append under a per-task thread lock plus an exclusive file lock;
readers never take locks. A torn tail left by an interrupted write is
detected on load and ignored (and repaired by the next put), so a
reopened store contains each record either fully or not at all.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping
from urllib.parse import quote, unquote

from .errors import RetrospectError
from .model import KnowledgeRecord, Provenance, content_hash, plan_from_dict, plan_to_dict

logger = logging.getLogger(__name__)

_JOURNAL_SUFFIX = ".journal"


class NotFound(RetrospectError):
    """No such task, version, or snapshot."""


class ParentMissing(RetrospectError):
    """An evolved record references a parent version the store does not hold."""


class VersionConflict(RetrospectError):
    """The incoming version does not extend the task's version chain."""


class StoreIntegrityError(RetrospectError):
    """A stored record no longer matches its recorded content hash."""


def record_to_dict(record: KnowledgeRecord) -> dict:
    return {
        "task_id": record.task_id,
        "instruction": record.instruction,
        "plan": plan_to_dict(record.plan),
        "provenance": record.provenance.value,
        "version": record.version,
        "parent_version": record.parent_version,
        "producer_model": record.producer_model,
        "critique_digest": record.critique_digest,
    }


def record_from_dict(data: dict) -> KnowledgeRecord:
    return KnowledgeRecord(
        task_id=data["task_id"],
        instruction=data["instruction"],
        plan=plan_from_dict(data["plan"]),
        provenance=Provenance(data["provenance"]),
        version=data["version"],
        parent_version=data["parent_version"],
        producer_model=data["producer_model"],
        critique_digest=data["critique_digest"],
    )


def canonical_record_text(record: KnowledgeRecord) -> str:
    """Hash-stable serialization of one record."""
    return json.dumps(record_to_dict(record), indent=2, sort_keys=True, ensure_ascii=False)


def record_hash(record: KnowledgeRecord) -> str:
    return content_hash(canonical_record_text(record).encode("utf-8"))


def _scan_journal(text: str) -> tuple[list[dict], int, bool]:
    """Decode consecutive JSON records; returns (records, valid_end, torn_tail)."""
    decoder = json.JSONDecoder()
    records: list[dict] = []
    index = 0
    valid_end = 0
    length = len(text)
    while True:
        while index < length and text[index] in " \t\r\n":
            index += 1
        if index >= length:
            return records, length, False
        try:
            obj, end = decoder.raw_decode(text, index)
        except json.JSONDecodeError:
            return records, valid_end, True
        records.append(obj)
        index = end
        valid_end = end


@dataclass(frozen=True)
class SnapshotEntry:
    version: int
    record_sha256: str


@dataclass(frozen=True)
class Snapshot:
    """Frozen view of the latest record per task at freeze time."""

    snapshot_id: str
    created_at: str
    records: Mapping[str, SnapshotEntry]

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", dict(self.records))


def _snapshot_id(entries: Mapping[str, SnapshotEntry]) -> str:
    payload = {
        task_id: {"version": entry.version, "sha256": entry.record_sha256}
        for task_id, entry in sorted(entries.items())
    }
    return content_hash(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8"))


class KnowledgeStore:
    """Append-only store of knowledge records with snapshot isolation."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._tasks_dir = self.root / "tasks"
        self._tasks_dir.mkdir(parents=True, exist_ok=True)
        self._snapshot_index = self.root / "snapshots.json"
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    # -- paths and locks --

    def _journal_path(self, task_id: str) -> Path:
        return self._tasks_dir / (quote(task_id, safe="") + _JOURNAL_SUFFIX)

    def _task_lock(self, task_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(task_id, threading.Lock())

    # -- reads (lock-free) --

    def task_ids(self) -> list[str]:
        return sorted(
            unquote(path.name[: -len(_JOURNAL_SUFFIX)])
            for path in self._tasks_dir.glob(f"*{_JOURNAL_SUFFIX}")
        )

    def __contains__(self, task_id: str) -> bool:
        return self._journal_path(task_id).exists()

    def _load_records(self, task_id: str) -> list[KnowledgeRecord]:
        path = self._journal_path(task_id)
        if not path.exists():
            raise NotFound(f"no knowledge for task {task_id!r}")
        text = path.read_text(encoding="utf-8")
        raw_records, _, torn = _scan_journal(text)
        if torn:
            logger.warning("journal for task %s has a torn tail; ignoring the partial record", task_id)
        records = [record_from_dict(raw) for raw in raw_records]
        records.sort(key=lambda record: record.version)
        return records

    def history(self, task_id: str) -> tuple[KnowledgeRecord, ...]:
        return tuple(self._load_records(task_id))

    def get_latest(self, task_id: str) -> KnowledgeRecord:
        records = self._load_records(task_id)
        if not records:
            raise NotFound(f"no knowledge for task {task_id!r}")
        return records[-1]

    def get_version(self, task_id: str, version: int) -> KnowledgeRecord:
        for record in self._load_records(task_id):
            if record.version == version:
                return record
        raise NotFound(f"task {task_id!r} has no version {version}")

    # -- writes --

    def _append(self, handle, payload: bytes) -> None:
        # Isolated so fault-injection tests can interrupt a write mid-way.
        handle.write(payload)
        handle.flush()
        os.fsync(handle.fileno())

    def put(self, record: KnowledgeRecord) -> int:
        """Append a record; returns the stored version.

        The incoming version must extend the chain: version 1 into an
        empty journal, otherwise latest + 1 with an existing parent.
        """
        path = self._journal_path(record.task_id)
        with self._task_lock(record.task_id):
            with open(path, "a+b") as handle:
                fcntl.flock(handle.fileno(), fcntl.LOCK_EX)
                handle.seek(0)
                text = handle.read().decode("utf-8")
                raw_records, valid_end, torn = _scan_journal(text)
                existing = sorted(raw["version"] for raw in raw_records)

                if record.version in existing:
                    raise VersionConflict(
                        f"task {record.task_id!r} already has version {record.version}"
                    )
                if record.parent_version is not None and record.parent_version not in existing:
                    raise ParentMissing(
                        f"task {record.task_id!r} has no parent version {record.parent_version}"
                    )
                latest = existing[-1] if existing else 0
                if record.version != latest + 1:
                    raise VersionConflict(
                        f"task {record.task_id!r} latest is {latest}, cannot append version {record.version}"
                    )

                if torn:
                    logger.warning(
                        "repairing torn journal tail for task %s before append", record.task_id
                    )
                    handle.truncate(valid_end)
                prefix = b"\n" if torn and valid_end > 0 else b""
                payload = prefix + canonical_record_text(record).encode("utf-8") + b"\n"
                self._append(handle, payload)
        return record.version

    # -- snapshots --

    def freeze_snapshot(self) -> Snapshot:
        """Pin the latest record of every task; returns the (persisted) snapshot."""
        entries: dict[str, SnapshotEntry] = {}
        for task_id in self.task_ids():
            records = self._load_records(task_id)
            if not records:
                continue
            latest = records[-1]
            entries[task_id] = SnapshotEntry(version=latest.version, record_sha256=record_hash(latest))
        snapshot_id = _snapshot_id(entries)

        index = self._read_snapshot_index()
        if snapshot_id in index:
            created_at = index[snapshot_id]["created_at"]
        else:
            created_at = datetime.now(timezone.utc).isoformat()
            index[snapshot_id] = {
                "created_at": created_at,
                "records": {
                    task_id: {"version": entry.version, "sha256": entry.record_sha256}
                    for task_id, entry in sorted(entries.items())
                },
            }
            self._write_snapshot_index(index)
        return Snapshot(snapshot_id=snapshot_id, created_at=created_at, records=entries)

    def _read_snapshot_index(self) -> dict:
        if not self._snapshot_index.exists():
            return {}
        return json.loads(self._snapshot_index.read_text(encoding="utf-8"))

    def _write_snapshot_index(self, index: dict) -> None:
        tmp = self._snapshot_index.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(index, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        tmp.replace(self._snapshot_index)

    def load_snapshot(self, snapshot_id: str) -> Snapshot:
        index = self._read_snapshot_index()
        if snapshot_id not in index:
            raise NotFound(f"no snapshot {snapshot_id!r}")
        raw = index[snapshot_id]
        return Snapshot(
            snapshot_id=snapshot_id,
            created_at=raw["created_at"],
            records={
                task_id: SnapshotEntry(version=entry["version"], record_sha256=entry["sha256"])
                for task_id, entry in raw["records"].items()
            },
        )

    def snapshot_ids(self) -> list[str]:
        return sorted(self._read_snapshot_index())

    def read_at(self, snapshot: Snapshot, task_id: str) -> KnowledgeRecord:
        """The record pinned at freeze time, verified against its stored hash."""
        entry = snapshot.records.get(task_id)
        if entry is None:
            raise NotFound(f"snapshot {snapshot.snapshot_id} holds no task {task_id!r}")
        record = self.get_version(task_id, entry.version)
        actual = record_hash(record)
        if actual != entry.record_sha256:
            raise StoreIntegrityError(
                f"task {task_id!r} v{entry.version}: stored hash {entry.record_sha256} != {actual}"
            )
        return record

    def verify_snapshot(self, snapshot: Snapshot) -> None:
        """Re-hash every referenced record; raises StoreIntegrityError on mismatch."""
        for task_id in sorted(snapshot.records):
            self.read_at(snapshot, task_id)

    # -- transfer --

    def import_store(self, other: "KnowledgeStore", producer_model: str | None = None) -> int:
        """Import latest records from another store; returns the count inserted.

        Tasks absent here get the other store's full history verbatim.
        For tasks already present, the other store's latest plan is
        layered on top as a new evolved version (producer tag and
        critique digest preserved).
        """
        imported = 0
        for task_id in other.task_ids():
            try:
                latest = other.get_latest(task_id)
            except NotFound:
                continue
            if producer_model is not None and latest.producer_model != producer_model:
                continue
            if task_id not in self:
                for record in other.history(task_id):
                    self.put(record)
                    imported += 1
                continue
            local_latest = self.get_latest(task_id)
            layered = KnowledgeRecord(
                task_id=task_id,
                instruction=latest.instruction,
                plan=latest.plan,
                provenance=Provenance.EVOLVED,
                version=local_latest.version + 1,
                parent_version=local_latest.version,
                producer_model=latest.producer_model,
                critique_digest=latest.critique_digest,
            )
            self.put(layered)
            imported += 1
        return imported

    def all_latest(self) -> Iterable[KnowledgeRecord]:
        for task_id in self.task_ids():
            try:
                yield self.get_latest(task_id)
            except NotFound:
                continue
