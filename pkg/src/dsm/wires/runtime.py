"""Pipeline runtime: stages as independent workers over bounded queues.

Start opens every stage in topological order (a bad stage aborts before any
record is consumed), then spawns one driver task per stage. Stop closes the
subscriber inlets and lets end-of-stream cascade through the DAG so every
in-flight record is flushed to its emitter before tasks finish.
"""

from __future__ import annotations

import asyncio
import json
import logging

from ..errors import DsmError
from .graph import GraphSpec
from .records import WireRecord
from .stages import END, STAGE_CLASSES, JoinStage, StartupFailure, SubscriberStage

log = logging.getLogger(__name__)

QUEUE_SIZE = 512


class PipelineContext:
    def __init__(self, broker=None, uplink=None, hmi=None, dead_letter_path=None, base_dir="."):
        self.broker = broker
        self.uplink = uplink
        self.hmi = hmi
        self.dead_letter_path = dead_letter_path
        self.base_dir = base_dir

    def resolve(self, path):
        """Relative stage paths resolve against the run's artifact directory."""
        from pathlib import Path

        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


class Pipeline:
    def __init__(self, spec: GraphSpec, ctx: PipelineContext):
        self.spec = spec
        self.ctx = ctx
        self.stages = {}
        for stage_def in spec.stages:
            cls = STAGE_CLASSES.get(stage_def.kind)
            if cls is None:
                raise StartupFailure(stage_def.id, f"no implementation for kind {stage_def.kind!r}")
            self.stages[stage_def.id] = cls(stage_def.id, stage_def.params, ctx)

        # one queue per (stage, input port); per-edge FIFO holds because each
        # writer enqueues its own records in emit order
        self.queues = {}
        self.writers = {}
        self.out_edges = {}
        for edge in spec.edges:
            key = (edge.to_stage, edge.to_port)
            self.queues.setdefault(key, asyncio.Queue(maxsize=QUEUE_SIZE))
            self.writers[key] = self.writers.get(key, 0) + 1
            self.out_edges.setdefault((edge.from_stage, edge.from_port), []).append(key)

        self.tasks = []
        self.dead_letters = []
        self._busy = {sid: False for sid in self.stages}
        self._started = False
        self._stopped = False

    # ------------------------------------------------------------------

    async def start(self):
        order = self.spec.topo_order()
        opened = []
        try:
            for sid in order:
                await self.stages[sid].open()
                opened.append(sid)
        except StartupFailure:
            for sid in opened:
                await self.stages[sid].close()
            raise
        for sid in order:
            stage = self.stages[sid]
            if isinstance(stage, SubscriberStage):
                task = asyncio.create_task(self._drive_subscriber(stage), name=f"stage-{sid}")
            elif isinstance(stage, JoinStage):
                task = asyncio.create_task(self._drive_join(stage), name=f"stage-{sid}")
            else:
                task = asyncio.create_task(self._drive_simple(stage), name=f"stage-{sid}")
            self.tasks.append(task)
        self._started = True

    async def stop(self):
        if not self._started or self._stopped:
            return
        self._stopped = True
        for stage in self.stages.values():
            if isinstance(stage, SubscriberStage) and stage.subscription is not None:
                self.ctx.broker.unsubscribe_local(stage.subscription)
                await stage.subscription.close()
        await asyncio.gather(*self.tasks)
        if self.ctx.uplink is not None:
            await self.ctx.uplink.flush()
        if self.ctx.dead_letter_path and self.dead_letters:
            with open(self.ctx.dead_letter_path, "w", encoding="utf-8") as f:
                for record in self.dead_letters:
                    f.write(record.dumps() + "\n")

    async def quiesce(self, settle_rounds: int = 3, poll_s: float = 0.005):
        """Wait until no stage is busy and every queue is empty.

        Used as a tick barrier by the orchestrator; requires several
        consecutive quiet polls so multi-hop handoffs settle.
        """
        quiet = 0
        while quiet < settle_rounds:
            await asyncio.sleep(poll_s)
            busy = any(self._busy.values())
            busy = busy or any(
                getattr(s, "dirty", False) for s in self.stages.values()
            )
            queued = any(q.qsize() for q in self.queues.values())
            sub_queued = any(
                isinstance(s, SubscriberStage)
                and s.subscription is not None
                and s.subscription.queue.qsize()
                for s in self.stages.values()
            )
            if busy or queued or sub_queued:
                quiet = 0
            else:
                quiet += 1

    def counters(self) -> dict:
        return {sid: dict(stage.counters) for sid, stage in self.stages.items()}

    def score_stages(self) -> list:
        from .stages import ScoreStage

        return [s for s in self.stages.values() if isinstance(s, ScoreStage)]

    def reload_model(self, path=None) -> str:
        version = None
        for stage in self.score_stages():
            version = stage.reload_model(path)
        if version is None:
            raise DsmError("graph has no score stage")
        return version

    # ------------------------------------------------------------------

    async def _route(self, stage, outs):
        for port, record in outs:
            targets = self.out_edges.get((stage.id, port), [])
            if not targets:
                if port == "dead":
                    self.dead_letters.append(record)
                continue
            for key in targets:
                await self.queues[key].put(record)

    async def _end_downstream(self, stage):
        for (sid, port), targets in self.out_edges.items():
            if sid != stage.id:
                continue
            for key in targets:
                await self.queues[key].put(END)

    def _input_keys(self, stage):
        return [key for key in self.queues if key[0] == stage.id]

    async def _drive_subscriber(self, stage: SubscriberStage):
        try:
            while True:
                item = await stage.subscription.get()
                if item is None:
                    break
                self._busy[stage.id] = True
                try:
                    record = stage.decode(*item)
                    if record is not None:
                        outs = await stage.process("out", record)
                        await self._route(stage, outs)
                finally:
                    self._busy[stage.id] = False
        finally:
            outs = await stage.flush()
            await self._route(stage, outs)
            await self._end_downstream(stage)
            await stage.close()

    async def _drive_simple(self, stage):
        keys = self._input_keys(stage)
        if len(keys) != 1:
            raise StartupFailure(stage.id, f"expected exactly one wired input, got {len(keys)}")
        key = keys[0]
        queue = self.queues[key]
        remaining = self.writers[key]
        port = key[1]
        try:
            while remaining > 0:
                item = await queue.get()
                if item is END:
                    remaining -= 1
                    continue
                self._busy[stage.id] = True
                try:
                    outs = await stage.process(port, item)
                    await self._route(stage, outs)
                finally:
                    self._busy[stage.id] = False
        finally:
            outs = await stage.flush()
            await self._route(stage, outs)
            await self._end_downstream(stage)
            await stage.close()

    async def _drive_join(self, stage: JoinStage):
        # Per-input pullers drain the queues eagerly into the stage's buffers;
        # merge decisions are event-time only, so arrival interleaving cannot
        # change the output. The wake event plus the stage's dirty flag keep
        # quiesce() honest about undecided-but-pending offers.
        wake = asyncio.Event()

        async def pull(port, queue, writers):
            remaining = writers
            while remaining > 0:
                item = await queue.get()
                if item is END:
                    remaining -= 1
                    if remaining == 0:
                        stage.offer(port, END)
                        wake.set()
                    continue
                stage.offer(port, item)
                wake.set()

        pullers = [
            asyncio.create_task(pull(key[1], self.queues[key], self.writers[key]),
                                name=f"join-pull-{stage.id}-{key[1]}")
            for key in self._input_keys(stage)
        ]
        try:
            while True:
                await wake.wait()
                wake.clear()
                self._busy[stage.id] = True
                try:
                    stage.dirty = False
                    outs = stage.ready()
                    await self._route(stage, outs)
                finally:
                    self._busy[stage.id] = False
                if all(inp.closed for inp in stage.inputs.values()) and not stage.dirty:
                    break
        finally:
            await asyncio.gather(*pullers)
            outs = await stage.flush()
            await self._route(stage, outs)
            await self._end_downstream(stage)
            await stage.close()


# ---------------------------------------------------------------------------
# Gateway admin endpoint: model deploy/reload and counters.
# ---------------------------------------------------------------------------

class AdminServer:
    """Tiny HTTP server: POST /v1/model deploys a model (validate then swap),
    GET /v1/model reports the active version, GET /v1/counters the stage
    counters."""

    def __init__(self, pipeline: Pipeline, host="127.0.0.1", port=0, model_path=None):
        self.pipeline = pipeline
        self.host = host
        self.port = port
        self.model_path = model_path  # where deployed model files land
        self._server = None

    async def start(self):
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]

    async def stop(self):
        if self._server:
            self._server.close()
            await self._server.wait_closed()

    @property
    def address(self) -> str:
        return f"http://{self.host}:{self.port}"

    async def _handle(self, reader, writer):
        try:
            request_line = (await reader.readline()).decode("latin-1").strip()
            headers = {}
            while True:
                line = (await reader.readline()).decode("latin-1").strip()
                if not line:
                    break
                name, _, value = line.partition(":")
                headers[name.strip().lower()] = value.strip()
            body = b""
            if "content-length" in headers:
                body = await reader.readexactly(int(headers["content-length"]))
            method, path, *_ = request_line.split(" ")
            status, doc = await self._dispatch(method, path.split("?")[0], body)
            payload = json.dumps(doc).encode("utf-8")
            writer.write(
                f"HTTP/1.1 {status}\r\nContent-Type: application/json\r\n"
                f"Content-Length: {len(payload)}\r\nConnection: close\r\n\r\n".encode()
                + payload
            )
            await writer.drain()
        except (ConnectionError, OSError, asyncio.IncompleteReadError, ValueError):
            pass
        finally:
            writer.close()

    async def _dispatch(self, method, path, body):
        from .. import quality

        if method == "POST" and path == "/v1/model":
            try:
                doc = json.loads(body.decode("utf-8"))
                model = quality.model_from_doc(doc)
            except (ValueError, quality.InvalidModelFile) as exc:
                return "400 Bad Request", {"ok": False, "error": str(exc)}
            if self.model_path:
                quality.save_model(model, self.model_path)
                version = self.pipeline.reload_model(self.model_path)
            else:
                for stage in self.pipeline.score_stages():
                    stage.model = model
                version = model.version
            return "200 OK", {"ok": True, "active_version": version}
        if method == "GET" and path == "/v1/model":
            stages = self.pipeline.score_stages()
            if not stages:
                return "404 Not Found", {"ok": False, "error": "no score stage"}
            return "200 OK", {"ok": True, "active_version": stages[0].model.version}
        if method == "GET" and path == "/v1/counters":
            return "200 OK", {"ok": True, "counters": self.pipeline.counters()}
        return "404 Not Found", {"ok": False, "error": f"no route {method} {path}"}
