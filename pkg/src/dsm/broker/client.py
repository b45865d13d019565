"""Minimal asyncio MQTT 3.1.1 client for nodes and tooling.

Supports QoS 0/1 publish (awaiting the PUBACK), wildcard subscriptions
dispatched to per-subscription queues, and ping. A test hook can drop
outbound PUBACKs to exercise the broker's redelivery path.
"""

from __future__ import annotations

import asyncio
import logging

from ..aio import await_timeout
from ..errors import DsmError
from . import packets as pk
from .matching import TopicFilter, match_topic

log = logging.getLogger(__name__)


class ConnectionFailed(DsmError):
    pass


class ClientSubscription:
    def __init__(self, filt: TopicFilter, qos: int = 0):
        self.filter = filt
        self.qos = qos
        self.queue: asyncio.Queue = asyncio.Queue()

    async def get(self):
        return await self.queue.get()

    def get_nowait(self):
        return self.queue.get_nowait()


class MqttClient:
    def __init__(self, host: str, port: int, client_id: str, ack_filter=None):
        """`ack_filter(packet_id) -> bool` decides whether to send a PUBACK
        for an inbound QoS1 publish (test hook; default always acks)."""
        self.host = host
        self.port = port
        self.client_id = client_id
        self.ack_filter = ack_filter
        self.reader = None
        self.writer = None
        self.subscriptions: list = []
        self._pending_acks: dict = {}  # packet_id -> Future (for our QoS1 publishes)
        self._pending_subacks: dict = {}
        self._next_packet_id = 1
        self._reader_task = None
        self._write_lock = asyncio.Lock()
        self.connected = False
        self.received_dups = 0

    async def connect(self, timeout: float = 5.0) -> None:
        try:
            self.reader, self.writer = await await_timeout(
                asyncio.open_connection(self.host, self.port), timeout
            )
        except (ConnectionError, OSError, asyncio.TimeoutError) as exc:
            raise ConnectionFailed(f"{self.host}:{self.port}: {exc}") from exc
        await self._send(pk.Connect(self.client_id))
        ack = await await_timeout(pk.read_packet(self.reader), timeout)
        if not isinstance(ack, pk.Connack) or ack.return_code != pk.CONNACK_ACCEPTED:
            raise ConnectionFailed(f"connect refused: {ack}")
        self.connected = True
        self._reader_task = asyncio.create_task(self._read_loop())

    async def disconnect(self) -> None:
        if self.writer is not None and self.connected:
            try:
                await self._send(pk.Disconnect())
            except (ConnectionError, OSError):
                pass
        await self._teardown()

    async def _teardown(self) -> None:
        self.connected = False
        if self._reader_task is not None:
            self._reader_task.cancel()
            try:
                await self._reader_task
            except (asyncio.CancelledError, Exception):
                pass
            self._reader_task = None
        if self.writer is not None:
            try:
                self.writer.close()
                await self.writer.wait_closed()
            except (ConnectionError, OSError):
                pass
            self.writer = None
        for future in self._pending_acks.values():
            if not future.done():
                future.set_exception(ConnectionFailed("connection lost"))
        self._pending_acks.clear()

    def _alloc_packet_id(self) -> int:
        pid = self._next_packet_id
        self._next_packet_id = pid % 0xFFFF + 1
        return pid

    async def _send(self, packet) -> None:
        async with self._write_lock:
            self.writer.write(pk.encode(packet))
            await self.writer.drain()

    async def publish(self, topic: str, payload: bytes, qos: int = 0, timeout: float = 5.0) -> None:
        """Publish; at QoS 1 waits for the broker's PUBACK."""
        if not self.connected:
            raise ConnectionFailed("not connected")
        publish = pk.Publish(topic, payload, qos=qos)
        if qos > 0:
            publish.packet_id = self._alloc_packet_id()
            future = asyncio.get_running_loop().create_future()
            self._pending_acks[publish.packet_id] = future
            await self._send(publish)
            try:
                await await_timeout(future, timeout)
            finally:
                self._pending_acks.pop(publish.packet_id, None)
        else:
            await self._send(publish)

    async def subscribe(self, filt: str, qos: int = 0, timeout: float = 5.0) -> ClientSubscription:
        sub = ClientSubscription(TopicFilter.parse(filt))
        sub.qos = qos
        self.subscriptions.append(sub)
        await self._send_subscribe(sub.filter.render(), qos, timeout)
        return sub

    async def _send_subscribe(self, filt: str, qos: int, timeout: float) -> None:
        pid = self._alloc_packet_id()
        future = asyncio.get_running_loop().create_future()
        self._pending_subacks[pid] = future
        await self._send(pk.Subscribe(pid, [(filt, qos)]))
        await await_timeout(future, timeout)

    async def resubscribe_all(self, timeout: float = 5.0) -> None:
        """Re-send SUBSCRIBE for every live subscription (after a reconnect).
        Subscription objects and their queues stay stable."""
        for sub in self.subscriptions:
            await self._send_subscribe(sub.filter.render(), getattr(sub, "qos", 0), timeout)

    async def ping(self, timeout: float = 5.0) -> None:
        await self._send(pk.Pingreq())

    async def _read_loop(self) -> None:
        try:
            while True:
                packet = await pk.read_packet(self.reader)
                if packet is None:
                    break
                if isinstance(packet, pk.Publish):
                    if packet.dup:
                        self.received_dups += 1
                    if packet.qos == 1:
                        ack_ok = self.ack_filter is None or self.ack_filter(packet.packet_id)
                        if ack_ok:
                            await self._send(pk.Puback(packet.packet_id))
                    for sub in self.subscriptions:
                        if match_topic(sub.filter, packet.topic):
                            sub.queue.put_nowait((packet.topic, packet.payload, packet.dup))
                elif isinstance(packet, pk.Puback):
                    future = self._pending_acks.get(packet.packet_id)
                    if future and not future.done():
                        future.set_result(True)
                elif isinstance(packet, pk.Suback):
                    future = self._pending_subacks.pop(packet.packet_id, None)
                    if future and not future.done():
                        if any(c == 0x80 for c in packet.return_codes):
                            future.set_exception(ConnectionFailed("subscription refused"))
                        else:
                            future.set_result(True)
                elif isinstance(packet, (pk.Pingresp, pk.Unsuback)):
                    pass
        except (ConnectionError, OSError, asyncio.CancelledError):
            pass
        finally:
            self.connected = False
            for future in self._pending_acks.values():
                if not future.done():
                    future.set_exception(ConnectionFailed("connection lost"))
