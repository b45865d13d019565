"""Mock enterprise ingestion endpoint.

HTTP API:
  POST /v1/ingest   NDJSON body, X-Batch-Id header (content hash). Appends
                    each record to its session file exactly once; duplicate
                    batch ids are acked without re-appending, so gateway
                    retries under at-least-once delivery are safe.
  GET  /v1/sessions Lists stored sessions.
  GET  /v1/export   Labeled dataset rows: feature records joined to the
                    nearest ground-truth label second per session.

Storage is flat NDJSON per session: desk-scale, diff-able, deterministic.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .errors import DsmError

log = logging.getLogger(__name__)


class MalformedBatch(DsmError):
    pass


class NoSessions(DsmError):
    pass


class SinkStore:
    """Session files plus the batch-id index; safe for concurrent ingests."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._session_locks: dict = {}
        self._batch_index_path = self.data_dir / "_batches.txt"
        self.seen_batches = set()
        if self._batch_index_path.exists():
            self.seen_batches = set(self._batch_index_path.read_text().split())
        self.ingested_batches = 0
        self.duplicate_batches = 0

    def _session_lock(self, session: str) -> threading.Lock:
        with self._lock:
            return self._session_locks.setdefault(session, threading.Lock())

    def session_path(self, session: str) -> Path:
        safe = "".join(c for c in session if c.isalnum() or c in "-_.")
        if not safe or safe.startswith("_"):
            raise MalformedBatch(f"bad session id {session!r}")
        return self.data_dir / f"{safe}.ndjson"

    def ingest(self, batch_id: str, body: bytes) -> dict:
        """Validate fully, then append each record once. Duplicate batch ids ack
        without re-appending."""
        if not batch_id:
            raise MalformedBatch("missing X-Batch-Id")
        docs = []
        for i, line in enumerate(body.decode("utf-8").splitlines()):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except ValueError as exc:
                raise MalformedBatch(f"line {i}: {exc}") from exc
            if not isinstance(doc, dict) or "session" not in doc:
                raise MalformedBatch(f"line {i}: record must be an object with a 'session'")
            self.session_path(str(doc["session"]))  # validates the id
            docs.append(doc)

        with self._lock:
            duplicate = batch_id in self.seen_batches
            if not duplicate:
                self.seen_batches.add(batch_id)
        if duplicate:
            self.duplicate_batches += 1
            return {"ok": True, "batch_id": batch_id, "appended": 0, "duplicate": True}

        by_session: dict = {}
        for doc in docs:
            by_session.setdefault(str(doc["session"]), []).append(doc)
        for session, rows in by_session.items():
            with self._session_lock(session):
                with open(self.session_path(session), "a", encoding="utf-8") as f:
                    for doc in rows:
                        f.write(json.dumps(doc, ensure_ascii=False, separators=(",", ":")) + "\n")
        with self._lock:
            with open(self._batch_index_path, "a", encoding="utf-8") as f:
                f.write(batch_id + "\n")
        self.ingested_batches += 1
        return {"ok": True, "batch_id": batch_id, "appended": len(docs), "duplicate": False}

    def sessions(self) -> list:
        return sorted(p.stem for p in self.data_dir.glob("*.ndjson") if not p.stem.startswith("_"))

    def read_session(self, session: str) -> list:
        path = self.session_path(session)
        if not path.exists():
            return []
        rows = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
        return rows

    def export(self, session: str | None = None) -> list:
        """Labeled dataset: one row per feature record, label = nearest label
        second (ties break to the earlier label). Deterministic order."""
        names = [session] if session else self.sessions()
        names = [n for n in names if self.session_path(n).exists()]
        if not names:
            raise NoSessions(session or "<all>")
        out = []
        for name in sorted(names):
            docs = self.read_session(name)
            features = [d for d in docs if d.get("role") == "features"]
            labels = [d for d in docs if d.get("role") == "label"]
            if not labels:
                continue
            labels.sort(key=lambda d: d["t_us"])
            label_ts = [d["t_us"] for d in labels]
            for doc in sorted(features, key=lambda d: d["t_us"]):
                t = doc["t_us"]
                nearest = min(
                    range(len(labels)), key=lambda i: (abs(label_ts[i] - t), label_ts[i])
                )
                label_doc = labels[nearest]
                out.append(
                    {
                        "features": doc["values"],
                        "label": int(label_doc["values"].get("defect", 0)),
                        "risk_true": label_doc["values"].get("risk_true"),
                        "session_id": name,
                        "t_us": t,
                    }
                )
        out.sort(key=lambda r: (r["session_id"], r["t_us"]))
        return out


class _Handler(BaseHTTPRequestHandler):
    store: SinkStore = None  # set by server factory

    def log_message(self, fmt, *args):
        log.debug("sink: " + fmt, *args)

    def _reply(self, status: int, doc: dict) -> None:
        payload = json.dumps(doc, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_POST(self):
        parsed = urlparse(self.path)
        if parsed.path != "/v1/ingest":
            self._reply(404, {"ok": False, "error": "not found"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        body = self.rfile.read(length)
        batch_id = self.headers.get("X-Batch-Id", "")
        try:
            self._reply(200, self.store.ingest(batch_id, body))
        except MalformedBatch as exc:
            self._reply(400, {"ok": False, "error": str(exc)})

    def do_GET(self):
        parsed = urlparse(self.path)
        if parsed.path == "/v1/sessions":
            self._reply(200, {"ok": True, "sessions": self.store.sessions()})
            return
        if parsed.path == "/v1/export":
            params = parse_qs(parsed.query)
            session = params.get("session", [None])[0]
            try:
                rows = self.store.export(session)
            except NoSessions as exc:
                self._reply(404, {"ok": False, "error": f"no sessions: {exc}"})
                return
            self._reply(200, {"ok": True, "records": rows})
            return
        self._reply(404, {"ok": False, "error": "not found"})


class CloudSink:
    """Threaded HTTP server wrapper around a SinkStore."""

    def __init__(self, data_dir, host: str = "127.0.0.1", port: int = 0):
        self.store = SinkStore(data_dir)
        handler = type("BoundHandler", (_Handler,), {"store": self.store})
        self.server = ThreadingHTTPServer((host, port), handler)
        self.host = host
        self.port = self.server.server_address[1]
        self._thread = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        log.info("cloud sink listening on %s", self.url)

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"
