"""Operator panel backend: WebSocket frame push plus command forwarding.

Every record emitted to the hmi target becomes one frame carrying the
latest per-channel feature readouts, machine parameters, risk state, and
the current recommendation. Inbound JSON commands ({"cmd": "set_params",
"args": {...}, "req_id": ...}) are forwarded to the machine's cmd topic;
acks seen on the machine's events topic are pushed back to all clients.

The same port also serves the static frontend shell for plain HTTP GETs.
"""

from __future__ import annotations

import asyncio
import http
import json
import logging
from pathlib import Path

from ..core import NODE_CHANNEL, TopicKind, channel_topic, node_topic

log = logging.getLogger(__name__)

CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript",
    ".css": "text/css",
    ".json": "application/json",
    ".svg": "image/svg+xml",
}


class HmiHub:
    """Aggregates scored records into frames and owns the WebSocket server."""

    def __init__(
        self,
        broker=None,
        site: str = "plant1",
        machine_node: str = "machine",
        host: str = "127.0.0.1",
        port: int = 0,
        static_dir=None,
    ):
        self.broker = broker
        self.site = site
        self.machine_node = machine_node
        self.host = host
        self.port = port
        self.static_dir = Path(static_dir) if static_dir else None
        self.clients: set = set()
        self.latest_frame: dict | None = None
        self.frames_sent = 0
        self.frame_log: list = []
        self._server = None
        self._ack_task = None
        self._ack_sub = None

    # ------------------------------------------------------------------
    # frame building
    # ------------------------------------------------------------------

    def build_frame(self, record) -> dict:
        """One frame per emitted record: channel readouts split out of the
        joined prefixed names, plus risk and recommendation state."""
        channels: dict = {}
        machine: dict = {}
        extra: dict = {}
        for name, value in record.values.items():
            if "." in name:
                channel, _, feature = name.partition(".")
                if channel == "machine_status":
                    machine[feature] = value
                else:
                    channels.setdefault(channel, {})[feature] = value
            else:
                extra[name] = value
        frame = {
            "t_us": record.t_us,
            "channels": {c: channels[c] for c in sorted(channels)},
            "machine": machine,
            "risk": record.values.get("risk"),
            "risk_alarm": bool(record.values.get("risk_alarm", 0.0)),
            "model_version": record.tags.get("model_version", ""),
        }
        if "rec_feed_mm_s" in record.values:
            frame["recommendation"] = {
                "spindle_rpm": record.values["rec_spindle_rpm"],
                "feed_mm_s": record.values["rec_feed_mm_s"],
                "predicted_risk": record.values["rec_risk"],
            }
        if extra:
            frame["extra"] = {k: extra[k] for k in sorted(extra) if not k.startswith("rec_")}
        return frame

    async def handle_record(self, record) -> None:
        frame = self.build_frame(record)
        self.latest_frame = frame
        self.frame_log.append(frame)
        await self.broadcast({"type": "frame", **frame})

    async def broadcast(self, doc: dict) -> None:
        if not self.clients:
            return
        payload = json.dumps(doc, ensure_ascii=False, separators=(",", ":"))
        living = set()
        for ws in self.clients:
            try:
                await ws.send(payload)
                living.add(ws)
            except Exception:
                pass
        self.clients = living
        self.frames_sent += 1

    # ------------------------------------------------------------------
    # server lifecycle
    # ------------------------------------------------------------------

    async def start(self) -> None:
        import websockets

        self._server = await websockets.serve(
            self._handle_client, self.host, self.port, process_request=self._process_request
        )
        self.port = next(iter(self._server.sockets)).getsockname()[1]
        if self.broker is not None:
            self._ack_sub = self.broker.subscribe_local(
                channel_topic(self.site, self.machine_node, NODE_CHANNEL, TopicKind.EVENTS)
            )
            self._ack_task = asyncio.create_task(self._relay_acks())

    async def stop(self) -> None:
        if self._ack_task:
            self._ack_task.cancel()
            try:
                await self._ack_task
            except asyncio.CancelledError:
                pass
        if self._ack_sub is not None and self.broker is not None:
            self.broker.unsubscribe_local(self._ack_sub)
        if self._server:
            self._server.close()
            await self._server.wait_closed()

    @property
    def ws_url(self) -> str:
        return f"ws://{self.host}:{self.port}/ws"

    def _process_request(self, connection, request):
        """Serve the static shell for non-WebSocket requests."""
        path = request.path.split("?")[0]
        if request.headers.get("Upgrade", "").lower() == "websocket":
            return None
        if self.static_dir is None:
            return connection.respond(http.HTTPStatus.NOT_FOUND, "no static dir\n")
        rel = "index.html" if path in ("/", "") else path.lstrip("/")
        target = (self.static_dir / rel).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) or not target.is_file():
            return connection.respond(http.HTTPStatus.NOT_FOUND, "not found\n")
        body = target.read_bytes()
        response = connection.respond(http.HTTPStatus.OK, "")
        response.body = body
        response.headers["Content-Type"] = CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        response.headers["Content-Length"] = str(len(body))
        return response

    async def _handle_client(self, ws) -> None:
        self.clients.add(ws)
        try:
            if self.latest_frame is not None:
                await ws.send(json.dumps({"type": "frame", **self.latest_frame}))
            async for text in ws:
                await self._handle_command(ws, text)
        except Exception:
            pass
        finally:
            self.clients.discard(ws)

    async def _handle_command(self, ws, text) -> None:
        try:
            doc = json.loads(text)
        except ValueError:
            await ws.send(json.dumps({"type": "error", "error": "malformed command"}))
            return
        if doc.get("cmd") != "set_params":
            await ws.send(json.dumps({"type": "error", "error": f"unknown cmd {doc.get('cmd')!r}",
                                      "req_id": doc.get("req_id")}))
            return
        topic = node_topic(self.site, self.machine_node, TopicKind.CMD)
        await self.broker.publish_local(topic, json.dumps(doc).encode("utf-8"), qos=1)

    async def _relay_acks(self) -> None:
        while True:
            item = await self._ack_sub.get()
            if item is None:
                return
            _, payload = item
            try:
                doc = json.loads(payload)
            except ValueError:
                continue
            if doc.get("type") == "ack":
                await self.broadcast({"type": "ack", **doc})
