"""Batching cloud uplink with content-hash idempotency and retries.

Records are queued as JSON docs, flushed as NDJSON batches to the sink's
ingest endpoint with X-Batch-Id = sha256 of the body. The sink deduplicates
on that id, so retrying a possibly-delivered batch is always safe.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging

import requests

log = logging.getLogger(__name__)


def default_transport(url: str, data: bytes, headers: dict, timeout: float = 10.0) -> int:
    response = requests.post(url, data=data, headers=headers, timeout=timeout)
    return response.status_code


class CloudUplink:
    """Single-worker uplink: batches post sequentially, in enqueue order."""

    def __init__(self, sink_url: str, gateway_id: str = "gw1", batch_size: int = 100,
                 transport=None, max_retries: int = 50, retry_delay_s: float = 0.05):
        self.sink_url = sink_url.rstrip("/")
        self.gateway_id = gateway_id
        self.batch_size = batch_size
        self.transport = transport or default_transport
        self.max_retries = max_retries
        self.retry_delay_s = retry_delay_s
        self._pending: list = []
        self._lock = asyncio.Lock()
        self.batches_sent = 0
        self.records_sent = 0
        self.retries = 0
        self.sent_docs: list = []  # accounting for fault-injection checks

    async def enqueue(self, doc: dict) -> None:
        self._pending.append(doc)
        if len(self._pending) >= self.batch_size:
            await self.flush()

    async def flush(self) -> None:
        async with self._lock:
            while self._pending:
                batch = self._pending[: self.batch_size]
                del self._pending[: self.batch_size]
                await self._post_batch(batch)

    async def _post_batch(self, docs: list) -> None:
        body = "".join(
            json.dumps(d, ensure_ascii=False, separators=(",", ":"), allow_nan=False) + "\n"
            for d in docs
        ).encode("utf-8")
        batch_id = hashlib.sha256(body).hexdigest()
        headers = {
            "X-Batch-Id": batch_id,
            "X-Gateway-Id": self.gateway_id,
            "Content-Type": "application/x-ndjson",
        }
        url = f"{self.sink_url}/v1/ingest"
        for attempt in range(self.max_retries):
            try:
                status = await asyncio.to_thread(self.transport, url, body, headers)
            except Exception as exc:
                status = None
                log.debug("uplink attempt %d failed: %s", attempt, exc)
            if status is not None and 200 <= status < 300:
                self.batches_sent += 1
                self.records_sent += len(docs)
                self.sent_docs.extend(docs)
                return
            self.retries += 1
            await asyncio.sleep(self.retry_delay_s)
        raise ConnectionError(f"uplink gave up on batch {batch_id[:12]} after {self.max_retries} tries")

    @property
    def pending(self) -> int:
        return len(self._pending)
