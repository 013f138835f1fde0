"""Durable storage for the coordination service: a content-addressed blob
directory plus an embedded sqlite database holding the event log and jobs."""
from __future__ import annotations

import hashlib
import json
import os
import sqlite3
import tempfile
import threading
import time
from pathlib import Path

from ..errors import UnknownIdError


class BlobStore:
    """Content-addressed blobs on disk; writes are temp-file + rename."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, ref: str) -> Path:
        if not ref or any(c not in "0123456789abcdef" for c in ref):
            raise UnknownIdError(f"malformed blob ref {ref!r}")
        return self.root / ref[:2] / ref

    def put(self, data: bytes) -> str:
        ref = hashlib.sha256(data).hexdigest()
        path = self._path(ref)
        if path.exists():
            return ref
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return ref

    def get(self, ref: str) -> bytes:
        path = self._path(ref)
        if not path.exists():
            raise UnknownIdError(f"unknown blob {ref!r}")
        return path.read_bytes()

    def has(self, ref: str) -> bool:
        try:
            return self._path(ref).exists()
        except UnknownIdError:
            return False


class Database:
    """Sqlite-backed event log and job table. One writer lock; sqlite commits
    per mutation give restart durability."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(str(self.path), check_same_thread=False)
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute("PRAGMA synchronous=FULL")
        with self._conn:
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS events ("
                " seq INTEGER PRIMARY KEY, kind TEXT NOT NULL,"
                " at REAL NOT NULL, data TEXT NOT NULL)")
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS jobs ("
                " job_id TEXT PRIMARY KEY, fingerprint TEXT UNIQUE, kind TEXT,"
                " status TEXT, detail TEXT, created_at REAL, updated_at REAL)")

    def close(self) -> None:
        self._conn.close()

    # -- events -------------------------------------------------------------

    def append_event(self, event: dict) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO events (seq, kind, at, data) VALUES (?, ?, ?, ?)",
                (event["seq"], event["kind"], event["at"],
                 json.dumps(event["data"], sort_keys=True)))

    def load_events(self) -> list[dict]:
        cur = self._conn.execute("SELECT seq, kind, at, data FROM events ORDER BY seq")
        return [{"seq": seq, "kind": kind, "at": at, "data": json.loads(data)}
                for seq, kind, at, data in cur.fetchall()]

    # -- jobs ---------------------------------------------------------------

    def create_job(self, job_id: str, fingerprint: str, kind: str) -> None:
        now = time.time()
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO jobs (job_id, fingerprint, kind, status, detail,"
                " created_at, updated_at) VALUES (?, ?, ?, 'pending', '{}', ?, ?)",
                (job_id, fingerprint, kind, now, now))

    def update_job(self, job_id: str, status: str, detail: dict) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "UPDATE jobs SET status = ?, detail = ?, updated_at = ? WHERE job_id = ?",
                (status, json.dumps(detail, sort_keys=True), time.time(), job_id))

    def get_job(self, job_id: str) -> dict:
        cur = self._conn.execute(
            "SELECT job_id, kind, status, detail, created_at, updated_at"
            " FROM jobs WHERE job_id = ?", (job_id,))
        row = cur.fetchone()
        if row is None:
            raise UnknownIdError(f"unknown job {job_id!r}")
        return self._job_row(row)

    def find_job(self, fingerprint: str) -> dict | None:
        cur = self._conn.execute(
            "SELECT job_id, kind, status, detail, created_at, updated_at"
            " FROM jobs WHERE fingerprint = ?", (fingerprint,))
        row = cur.fetchone()
        return None if row is None else self._job_row(row)

    def interrupt_unfinished_jobs(self) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "UPDATE jobs SET status = 'error',"
                " detail = '{\"error\": \"interrupted by service restart\"}'"
                " WHERE status IN ('pending', 'running')")

    @staticmethod
    def _job_row(row) -> dict:
        job_id, kind, status, detail, created_at, updated_at = row
        return {"job_id": job_id, "kind": kind, "status": status,
                "detail": json.loads(detail), "created_at": created_at,
                "updated_at": updated_at}
