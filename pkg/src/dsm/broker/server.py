"""Asyncio pub/sub broker for the edge gateway.

The routing core runs on the event loop as a single serialized authority:
connection readers hand packets to it, in-process subscribers (the dataflow
engine) receive through bounded queues with backpressure. QoS 1 inbound is
acknowledged after fan-out; QoS 1 outbound is tracked per session and
redelivered with the dup flag until acked, with eviction after repeated
failures.

A tiny plaintext metrics endpoint and the clock-sync responder ride along.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import dataclass, field

from ..core import NODE_CHANNEL, TOPIC_PREFIX, TOPIC_VERSION
from . import packets as pk
from .matching import BadFilter, TopicFilter, match_topic

log = logging.getLogger(__name__)

SYNC_FILTER = f"{TOPIC_PREFIX}/{TOPIC_VERSION}/+/+/{NODE_CHANNEL}/sync"


def wall_clock_us() -> int:
    return int(time.time() * 1_000_000)


@dataclass
class BrokerConfig:
    host: str = "127.0.0.1"
    port: int = 0  # 0 = ephemeral
    metrics_port: int | None = None
    qos1_timeout_s: float = 2.0
    qos1_max_cycles: int = 5
    local_queue_size: int = 1024


class LocalSubscription:
    """In-process subscription backed by a bounded FIFO queue."""

    def __init__(self, filt: TopicFilter, qos: int, maxsize: int):
        self.filter = filt
        self.qos = qos
        self.queue: asyncio.Queue = asyncio.Queue(maxsize=maxsize)
        self.closed = False

    async def get(self):
        """Next (topic, payload) or None after close."""
        item = await self.queue.get()
        return item

    async def close(self):
        self.closed = True
        await self.queue.put(None)


class RemoteSession:
    def __init__(self, client_id: str, writer: asyncio.StreamWriter, broker: "Broker"):
        self.client_id = client_id
        self.writer = writer
        self.broker = broker
        self.subscriptions: list = []  # [(TopicFilter, qos)]
        self.inflight: dict = {}  # packet_id -> [Publish, deadline, cycles]
        self.next_packet_id = 1
        self.connected_at = time.time()
        self.closing = False
        self.write_lock = asyncio.Lock()

    def alloc_packet_id(self) -> int:
        for _ in range(0xFFFF):
            pid = self.next_packet_id
            self.next_packet_id = pid % 0xFFFF + 1
            if pid not in self.inflight:
                return pid
        raise pk.ProtocolError("no free packet ids")

    async def send(self, packet) -> None:
        data = pk.encode(packet)
        async with self.write_lock:
            self.writer.write(data)
            await self.writer.drain()
        self.broker.metrics["bytes_out"] += len(data)


class Broker:
    def __init__(self, config: BrokerConfig | None = None, clock_us=wall_clock_us):
        self.config = config or BrokerConfig()
        self.clock_us = clock_us
        self.sessions: dict = {}  # client_id -> RemoteSession
        self.local_subs: list = []
        self.metrics = {
            "connections_total": 0,
            "connections_active": 0,
            "messages_routed": 0,
            "deliveries": 0,
            "redeliveries": 0,
            "bytes_in": 0,
            "bytes_out": 0,
            "sync_responses": 0,
            "sync_malformed": 0,
            "evictions": 0,
        }
        self._server = None
        self._metrics_server = None
        self._redelivery_task = None
        self._sync_task = None
        self._sync_sub = None
        self.port = None
        self.metrics_port = None

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle_connection, self.config.host, self.config.port
        )
        self.port = self._server.sockets[0].getsockname()[1]
        if self.config.metrics_port is not None:
            self._metrics_server = await asyncio.start_server(
                self._handle_metrics, self.config.host, self.config.metrics_port
            )
            self.metrics_port = self._metrics_server.sockets[0].getsockname()[1]
        self._redelivery_task = asyncio.create_task(self._redelivery_loop())
        self._sync_sub = self.subscribe_local(SYNC_FILTER, qos=0)
        self._sync_task = asyncio.create_task(self._sync_responder())
        log.info("broker listening on %s:%d", self.config.host, self.port)

    async def stop(self) -> None:
        for task in (self._redelivery_task, self._sync_task):
            if task:
                task.cancel()
                try:
                    await task
                except asyncio.CancelledError:
                    pass
        for session in list(self.sessions.values()):
            await self._close_session(session)
        for server in (self._server, self._metrics_server):
            if server:
                server.close()
                await server.wait_closed()

    @property
    def address(self) -> str:
        return f"{self.config.host}:{self.port}"

    # ------------------------------------------------------------------
    # in-process subscription (used by the dataflow engine)
    # ------------------------------------------------------------------

    def subscribe_local(self, filt: str, qos: int = 0, maxsize: int | None = None) -> LocalSubscription:
        sub = LocalSubscription(
            TopicFilter.parse(filt), min(qos, 1), maxsize or self.config.local_queue_size
        )
        self.local_subs.append(sub)
        return sub

    def unsubscribe_local(self, sub: LocalSubscription) -> None:
        if sub in self.local_subs:
            self.local_subs.remove(sub)

    async def publish_local(self, topic: str, payload: bytes, qos: int = 0) -> int:
        """Publish from inside the gateway process; returns delivery count."""
        return await self._route(topic, payload, qos)

    # ------------------------------------------------------------------
    # routing core
    # ------------------------------------------------------------------

    async def _route(self, topic: str, payload: bytes, qos: int) -> int:
        self.metrics["messages_routed"] += 1
        deliveries = 0
        for sub in list(self.local_subs):
            if not sub.closed and match_topic(sub.filter, topic):
                # bounded queue: the routing core blocks rather than drops
                await sub.queue.put((topic, bytes(payload)))
                deliveries += 1
        for session in list(self.sessions.values()):
            if session.closing:
                continue
            best_qos = None
            for filt, sub_qos in session.subscriptions:
                if match_topic(filt, topic):
                    best_qos = sub_qos if best_qos is None else max(best_qos, sub_qos)
            if best_qos is None:
                continue
            out_qos = min(qos, best_qos)
            publish = pk.Publish(topic, bytes(payload), qos=out_qos)
            if out_qos > 0:
                publish.packet_id = session.alloc_packet_id()
                deadline = time.monotonic() + self.config.qos1_timeout_s
                session.inflight[publish.packet_id] = [publish, deadline, 0]
            try:
                await session.send(publish)
            except (ConnectionError, OSError):
                await self._close_session(session)
                continue
            deliveries += 1
        self.metrics["deliveries"] += deliveries
        return deliveries

    # ------------------------------------------------------------------
    # remote connections
    # ------------------------------------------------------------------

    async def _handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        session = None
        try:
            first = await pk.read_packet(reader)
            if not isinstance(first, pk.Connect):
                writer.close()
                return
            self.metrics["bytes_in"] += 2 + len(first.client_id)
            if not first.client_id:
                await _write(writer, pk.Connack(return_code=pk.CONNACK_REFUSED_ID))
                writer.close()
                return
            # same client id evicts the previous session before the new CONNACK
            old = self.sessions.get(first.client_id)
            if old is not None:
                self.metrics["evictions"] += 1
                await self._close_session(old)
            session = RemoteSession(first.client_id, writer, self)
            self.sessions[first.client_id] = session
            self.metrics["connections_total"] += 1
            self.metrics["connections_active"] += 1
            await session.send(pk.Connack(session_present=False, return_code=pk.CONNACK_ACCEPTED))

            while True:
                packet = await pk.read_packet(reader)
                if packet is None:
                    break
                await self._handle_packet(session, packet)
                if isinstance(packet, pk.Disconnect):
                    break
        except pk.ProtocolError as exc:
            log.warning("protocol error from %s: %s", session.client_id if session else "?", exc)
        except (ConnectionError, OSError, asyncio.IncompleteReadError):
            pass
        finally:
            if session is not None and self.sessions.get(session.client_id) is session:
                await self._close_session(session)

    async def _handle_packet(self, session: RemoteSession, packet) -> None:
        if isinstance(packet, pk.Publish):
            self.metrics["bytes_in"] += len(packet.payload) + len(packet.topic) + 4
            if len(packet.payload) > pk.MAX_PAYLOAD:
                raise pk.ProtocolError("payload too large")
            await self._route(packet.topic, packet.payload, packet.qos)
            if packet.qos == 1:
                await session.send(pk.Puback(packet.packet_id))
        elif isinstance(packet, pk.Puback):
            session.inflight.pop(packet.packet_id, None)
        elif isinstance(packet, pk.Subscribe):
            codes = []
            for topic, qos in packet.topics:
                try:
                    filt = TopicFilter.parse(topic)
                    granted = min(qos, 1)
                    session.subscriptions.append((filt, granted))
                    codes.append(granted)
                except BadFilter:
                    codes.append(0x80)
            await session.send(pk.Suback(packet.packet_id, codes))
        elif isinstance(packet, pk.Unsubscribe):
            for topic in packet.topics:
                session.subscriptions = [
                    (f, q) for f, q in session.subscriptions if f.render() != topic
                ]
            await session.send(pk.Unsuback(packet.packet_id))
        elif isinstance(packet, pk.Pingreq):
            await session.send(pk.Pingresp())
        elif isinstance(packet, pk.Disconnect):
            pass
        else:
            raise pk.ProtocolError(f"unexpected packet {type(packet).__name__}")

    async def _close_session(self, session: RemoteSession) -> None:
        if session.closing:
            return
        session.closing = True
        if self.sessions.get(session.client_id) is session:
            del self.sessions[session.client_id]
            self.metrics["connections_active"] -= 1
        try:
            session.writer.close()
            await session.writer.wait_closed()
        except (ConnectionError, OSError):
            pass

    # ------------------------------------------------------------------
    # QoS1 redelivery
    # ------------------------------------------------------------------

    async def _redelivery_loop(self) -> None:
        interval = max(self.config.qos1_timeout_s / 4, 0.01)
        while True:
            await asyncio.sleep(interval)
            now = time.monotonic()
            for session in list(self.sessions.values()):
                evict = False
                for pid, entry in list(session.inflight.items()):
                    publish, deadline, cycles = entry
                    if now < deadline:
                        continue
                    if cycles + 1 >= self.config.qos1_max_cycles:
                        evict = True
                        break
                    publish.dup = True
                    entry[1] = now + self.config.qos1_timeout_s
                    entry[2] = cycles + 1
                    self.metrics["redeliveries"] += 1
                    try:
                        await session.send(publish)
                    except (ConnectionError, OSError):
                        evict = True
                        break
                if evict:
                    self.metrics["evictions"] += 1
                    await self._close_session(session)

    # ------------------------------------------------------------------
    # clock-sync responder: request {"req": t1} -> response with t2, t3
    # ------------------------------------------------------------------

    async def _sync_responder(self) -> None:
        while True:
            item = await self._sync_sub.get()
            if item is None:
                return
            topic, payload = item
            t2 = self.clock_us()
            try:
                doc = json.loads(payload.decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                self.metrics["sync_malformed"] += 1
                continue
            if "rsp" in doc:
                continue  # our own responses echo back on the same topic
            t1 = doc.get("req")
            if not isinstance(t1, int):
                self.metrics["sync_malformed"] += 1
                continue
            t3 = self.clock_us()
            rsp = {"rsp": {"t1": t1, "t2": t2, "t3": t3}, "req_id": doc.get("req_id")}
            self.metrics["sync_responses"] += 1
            await self.publish_local(topic, json.dumps(rsp).encode("utf-8"), qos=0)

    # ------------------------------------------------------------------
    # metrics endpoint (plaintext exposition)
    # ------------------------------------------------------------------

    async def _handle_metrics(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            await reader.readline()  # request line; headers ignored
            body = self.render_metrics()
            writer.write(
                b"HTTP/1.1 200 OK\r\nContent-Type: text/plain; version=0.0.4\r\n"
                + f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n".encode()
                + body
            )
            await writer.drain()
        finally:
            writer.close()

    def render_metrics(self) -> bytes:
        lines = []
        for name, value in sorted(self.metrics.items()):
            lines.append(f"dsm_broker_{name} {value}")
        return ("\n".join(lines) + "\n").encode("utf-8")


async def _write(writer: asyncio.StreamWriter, packet) -> None:
    writer.write(pk.encode(packet))
    await writer.drain()
