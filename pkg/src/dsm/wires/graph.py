"""Graph document loading and validation.

Documents are JSON: {"stages": [{"id", "kind", "params"}...],
"edges": [{"from": "id.port", "to": "id.port"}...]}. Validation reports
every violation, not just the first, and checks acyclicity, port
existence, and port type compatibility.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..errors import DsmError

RECORD = "record"  # the one built-in port datatype


@dataclass(frozen=True)
class PortSpec:
    name: str
    datatype: str = RECORD


@dataclass(frozen=True)
class StageKindSpec:
    kind: str
    required_params: tuple = ()
    # callables (params) -> list[PortSpec]; inputs/outputs may depend on params
    inputs: object = None
    outputs: object = None


def _fixed(*names, datatype=RECORD):
    ports = [PortSpec(n, datatype) for n in names]
    return lambda params: ports


def _join_inputs(params):
    names = params.get("inputs") or []
    return [PortSpec(str(n)) for n in names]


STAGE_KINDS = {
    "subscriber": StageKindSpec("subscriber", ("filter",), _fixed(), _fixed("out")),
    "window": StageKindSpec("window", ("size", "hop"), _fixed("in"), _fixed("out")),
    "feature": StageKindSpec("feature", ("names",), _fixed("in"), _fixed("out")),
    "join": StageKindSpec("join", ("inputs", "tolerance_us"), _join_inputs, _fixed("out")),
    "score": StageKindSpec("score", ("model_path",), _fixed("in"), _fixed("out", "dead")),
    "threshold": StageKindSpec("threshold", ("field", "level"), _fixed("in"), _fixed("out")),
    "emitter": StageKindSpec("emitter", ("target",), _fixed("in"), _fixed()),
    "logger": StageKindSpec("logger", ("path",), _fixed("in"), _fixed()),
}


def register_stage_kind(spec: StageKindSpec) -> None:
    """Extension point (also used by tests to exercise type checking)."""
    STAGE_KINDS[spec.kind] = spec


@dataclass
class StageDef:
    id: str
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class EdgeDef:
    from_stage: str
    from_port: str
    to_stage: str
    to_port: str

    def render(self) -> str:
        return f"{self.from_stage}.{self.from_port} -> {self.to_stage}.{self.to_port}"


@dataclass
class GraphSpec:
    stages: list
    edges: list

    def stage(self, stage_id: str) -> StageDef:
        for s in self.stages:
            if s.id == stage_id:
                return s
        raise KeyError(stage_id)

    def topo_order(self) -> list:
        """Stage ids in a deterministic topological order (Kahn, id tie-break)."""
        indegree = {s.id: 0 for s in self.stages}
        children = {s.id: [] for s in self.stages}
        for e in self.edges:
            indegree[e.to_stage] += 1
            children[e.from_stage].append(e.to_stage)
        ready = sorted(sid for sid, d in indegree.items() if d == 0)
        order = []
        while ready:
            sid = ready.pop(0)
            order.append(sid)
            for child in children[sid]:
                indegree[child] -= 1
                if indegree[child] == 0:
                    ready.append(child)
            ready.sort()
        if len(order) != len(self.stages):
            raise DsmError("graph has a cycle")
        return order


class GraphValidationError(DsmError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


def _parse_endpoint(text: str):
    if not isinstance(text, str) or text.count(".") != 1:
        return None
    stage, port = text.split(".")
    if not stage or not port:
        return None
    return stage, port


def parse_graph(doc) -> GraphSpec:
    """Structural parse without semantic validation."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise GraphValidationError([f"ParseError: {exc}"]) from exc
    if not isinstance(doc, dict) or "stages" not in doc or "edges" not in doc:
        raise GraphValidationError(["ParseError: document must have 'stages' and 'edges'"])
    stages = []
    for i, s in enumerate(doc["stages"]):
        if not isinstance(s, dict) or "id" not in s or "kind" not in s:
            raise GraphValidationError([f"ParseError: stage #{i} must have 'id' and 'kind'"])
        stages.append(StageDef(str(s["id"]), str(s["kind"]), dict(s.get("params") or {})))
    edges = []
    for i, e in enumerate(doc["edges"]):
        src = _parse_endpoint(e.get("from")) if isinstance(e, dict) else None
        dst = _parse_endpoint(e.get("to")) if isinstance(e, dict) else None
        if src is None or dst is None:
            raise GraphValidationError([f"ParseError: edge #{i} must be 'id.port' -> 'id.port'"])
        edges.append(EdgeDef(src[0], src[1], dst[0], dst[1]))
    return GraphSpec(stages, edges)


def validate_graph(spec: GraphSpec) -> list:
    """Return all violations (empty list = valid)."""
    violations = []
    seen = set()
    for s in spec.stages:
        if s.id in seen:
            violations.append(f"DuplicateId: {s.id}")
        seen.add(s.id)

    meta = {}
    for s in spec.stages:
        kind = STAGE_KINDS.get(s.kind)
        if kind is None:
            violations.append(f"UnknownStageKind: {s.id} kind={s.kind!r}")
            continue
        for p in kind.required_params:
            if p not in s.params:
                violations.append(f"MissingParam: {s.id}.{p}")
        try:
            inputs = {p.name: p for p in kind.inputs(s.params)}
            outputs = {p.name: p for p in kind.outputs(s.params)}
        except Exception as exc:
            violations.append(f"BadParams: {s.id}: {exc}")
            continue
        meta[s.id] = (inputs, outputs)
        if s.kind == "join":
            if not isinstance(s.params.get("inputs"), list) or len(s.params.get("inputs", [])) < 2:
                violations.append(f"BadParams: {s.id}: join needs >= 2 inputs")
            tol = s.params.get("tolerance_us")
            if not isinstance(tol, (int, float)) or tol <= 0:
                violations.append(f"BadParams: {s.id}: tolerance_us must be > 0")
        if s.kind == "window":
            size, hop = s.params.get("size"), s.params.get("hop")
            if isinstance(size, int) and isinstance(hop, int) and not (1 <= hop <= size):
                violations.append(f"BadParams: {s.id}: hop must be in [1, size]")

    wired_inputs = set()
    for e in spec.edges:
        if e.from_stage not in meta or e.to_stage not in meta:
            missing = e.from_stage if e.from_stage not in meta else e.to_stage
            violations.append(f"DanglingEdge: {e.render()} (unknown stage {missing})")
            continue
        outputs = meta[e.from_stage][1]
        inputs = meta[e.to_stage][0]
        if e.from_port not in outputs:
            violations.append(f"DanglingEdge: {e.render()} (no output port {e.from_port!r})")
            continue
        if e.to_port not in inputs:
            violations.append(f"DanglingEdge: {e.render()} (no input port {e.to_port!r})")
            continue
        if outputs[e.from_port].datatype != inputs[e.to_port].datatype:
            violations.append(
                f"TypeMismatch: {e.render()} "
                f"({outputs[e.from_port].datatype} -> {inputs[e.to_port].datatype})"
            )
        key = (e.to_stage, e.to_port)
        if key in wired_inputs and spec.stage(e.to_stage).kind != "emitter":
            # multiple writers to one input are allowed only on emitters/loggers
            if spec.stage(e.to_stage).kind not in ("emitter", "logger"):
                violations.append(f"DuplicateEdge: input {e.to_stage}.{e.to_port} wired twice")
        wired_inputs.add(key)

    # every non-source input port must be wired
    for s in spec.stages:
        if s.id not in meta:
            continue
        for name in meta[s.id][0]:
            if (s.id, name) not in wired_inputs:
                violations.append(f"UnwiredInput: {s.id}.{name}")

    cycle = _find_cycle(spec)
    if cycle:
        violations.append("CycleDetected: " + " -> ".join(cycle))
    return violations


def _find_cycle(spec: GraphSpec):
    children = {s.id: [] for s in spec.stages}
    for e in spec.edges:
        if e.from_stage in children and e.to_stage in children:
            children[e.from_stage].append(e.to_stage)
    WHITE, GREY, BLACK = 0, 1, 2
    color = {sid: WHITE for sid in children}
    parent = {}

    for root in sorted(children):
        if color[root] != WHITE:
            continue
        stack = [(root, iter(sorted(children[root])))]
        color[root] = GREY
        while stack:
            sid, it = stack[-1]
            advanced = False
            for child in it:
                if color[child] == WHITE:
                    color[child] = GREY
                    parent[child] = sid
                    stack.append((child, iter(sorted(children[child]))))
                    advanced = True
                    break
                if color[child] == GREY:
                    # walk back to produce the cycle path
                    path = [child, sid]
                    cur = sid
                    while cur != child:
                        cur = parent[cur]
                        path.append(cur)
                    return list(reversed(path))
            if not advanced:
                color[sid] = BLACK
                stack.pop()
    return None


def load_graph(source) -> GraphSpec:
    """Parse and validate a graph document (text, dict, or file path)."""
    if hasattr(source, "read"):
        source = source.read()
    elif isinstance(source, str) and source.lstrip()[:1] not in ("{", "["):
        with open(source, "r", encoding="utf-8") as f:
            source = f.read()
    spec = parse_graph(source)
    violations = validate_graph(spec)
    if violations:
        raise GraphValidationError(violations)
    return spec
