"""Heterogeneous attack-graph model, sequence encoding and serialization.

One :class:`AttackGraph` type serves every role (scene, provenance, forecast
and template graphs).  Nodes carry only an entity attribute and a position
in the chronological node order; labels are kept for display and never read
by any algorithm.
"""
from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_WINDOW = 5


class GraphError(ValueError):
    """Raised when a graph violates a structural invariant."""


class MalformedSequenceError(GraphError):
    pass


class EntityAttr(str, Enum):
    F0 = "F0"  # sensitive files
    F1 = "F1"  # libraries
    F2 = "F2"  # executables and scripts
    F3 = "F3"  # other files
    FR = "FR"  # registry
    P = "P"
    S = "S"

    @property
    def code(self) -> int:
        return _ATTR_ORDER.index(self)

    @classmethod
    def from_code(cls, code: int) -> "EntityAttr":
        return _ATTR_ORDER[code]

    @property
    def is_file(self) -> bool:
        return self in FILE_ATTRS


class EventType(str, Enum):
    Write = "Write"
    Execute = "Execute"
    Read = "Read"
    Send = "Send"
    Receive = "Receive"
    ForkClone = "ForkClone"

    @property
    def code(self) -> int:
        # 0 is reserved for "no edge" in adjacency vectors
        return _EVENT_ORDER.index(self) + 1

    @classmethod
    def from_code(cls, code: int) -> "EventType":
        if code < 1:
            raise ValueError("edge code 0 means 'no edge'")
        return _EVENT_ORDER[code - 1]


_ATTR_ORDER = (EntityAttr.F0, EntityAttr.F1, EntityAttr.F2, EntityAttr.F3,
               EntityAttr.FR, EntityAttr.P, EntityAttr.S)
_EVENT_ORDER = tuple(EventType)

FILE_ATTRS = frozenset({EntityAttr.F0, EntityAttr.F1, EntityAttr.F2,
                        EntityAttr.F3, EntityAttr.FR})
PROC = frozenset({EntityAttr.P})
SOCK = frozenset({EntityAttr.S})

NUM_ATTRS = len(_ATTR_ORDER)           # K + 1
TERMINATOR = NUM_ATTRS                 # K + 1, sequence encodings only
NUM_NODE_CODES = NUM_ATTRS + 1         # K + 2
NUM_EDGE_CODES = len(_EVENT_ORDER) + 1  # P + 1

# (allowed subject attrs, allowed object attrs) per event
EDGE_RULES: dict[EventType, tuple[frozenset, frozenset]] = {
    EventType.Write: (PROC, FILE_ATTRS),
    EventType.Execute: (PROC, FILE_ATTRS),
    EventType.Read: (FILE_ATTRS, PROC),
    EventType.Send: (PROC, SOCK),
    EventType.Receive: (SOCK, PROC),
    EventType.ForkClone: (PROC, PROC),
}


def validate_edge(subject: EntityAttr, event: EventType, obj: EntityAttr) -> bool:
    subjects, objects = EDGE_RULES[EventType(event)]
    return EntityAttr(subject) in subjects and EntityAttr(obj) in objects


def admissible_events(a: EntityAttr, b: EntityAttr) -> list[EventType]:
    """Events allowed with ``a`` as subject and ``b`` as object."""
    return [e for e in EventType if validate_edge(a, e, b)]


# --------------------------------------------------------------------------
# entity classification

_REGISTRY = re.compile(r"^(HKLM|HKCU|HKCR|HKU|HKCC|HKEY_[A-Z_]+)(\\|/|:|$)", re.I)
_IPV4 = re.compile(r"^(\d{1,3})(\.\d{1,3}){3}(:\d{1,5})?$")
_IPV6 = re.compile(r"^\[?[0-9a-f]*:[0-9a-f:]+\]?(:\d{1,5})?$", re.I)
_URL = re.compile(r"^[a-z][a-z0-9+.-]*://", re.I)
_DOMAIN = re.compile(r"^(?:[a-z0-9-]+\.)+([a-z]{2,24})(:\d{1,5})?$", re.I)
_SENSITIVE = re.compile(
    r"(^|[\\/])(passwd|shadow|gshadow|sudoers|master\.passwd|ntds\.dit|sam|"
    r"security|id_rsa|id_dsa|id_ecdsa|id_ed25519|authorized_keys|known_hosts|"
    r"\.bash_history|\.netrc|\.pgpass|credentials|login data|cookies|key3\.db|"
    r"key4\.db|logins\.json|wallet\.dat)$", re.I)
_LIB_EXT = ("dll", "so", "dylib", "ocx", "drv", "ko")
_EXEC_EXT = ("exe", "vbs", "vbe", "bat", "cmd", "ps1", "psm1", "sh", "py",
             "js", "jse", "wsf", "hta", "jar", "msi", "scr", "pif", "elf",
             "bin", "run", "lnk", "apk")
_LIB = re.compile(r"\.(%s)(\.\d+)*$" % "|".join(_LIB_EXT), re.I)
_EXEC = re.compile(r"\.(%s)$" % "|".join(_EXEC_EXT), re.I)
_PROCESS = re.compile(r"^(pid[\s:=#]*\d+|process[\s:=#]*\d+|[a-z][\w-]*)$", re.I)
# extensions that must never be read as a top-level domain
_FILE_EXT = frozenset(_LIB_EXT + _EXEC_EXT + (
    "txt", "doc", "docx", "docm", "xls", "xlsx", "xlsm", "ppt", "pptx", "pdf",
    "rtf", "ini", "cfg", "conf", "log", "dat", "db", "tmp", "zip", "rar",
    "gz", "tar", "bz2", "xz", "7z", "iso", "img", "png", "jpg", "jpeg", "gif",
    "bmp", "xml", "json", "yaml", "yml", "csv", "html", "htm", "php", "asp",
    "aspx", "lock", "bak", "sys", "pem", "key", "crt", "cer", "pfx", "plist",
    "evtx", "pyc", "class", "dmp", "hiv", "reg", "inf", "lnk", "cab", "chm"))


def classify_entity(name: str) -> EntityAttr:
    """Map a raw entity name to its attribute.

    Precedence is FR, S, F0, F1, F2, P, F3; the first matching pattern wins.
    """
    if not name or not name.strip():
        raise ValueError("entity name must be non-empty")
    text = name.strip().strip("'\"")
    if _REGISTRY.match(text):
        return EntityAttr.FR
    if _is_socket(text):
        return EntityAttr.S
    return _classify_path(text, allow_process=True)


def classify_file(name: str) -> EntityAttr:
    """Like :func:`classify_entity` for a name already known to be a file."""
    text = name.strip().strip("'\"")
    if _REGISTRY.match(text):
        return EntityAttr.FR
    attr = _classify_path(text, allow_process=False)
    return attr


def _is_socket(text: str) -> bool:
    if _URL.match(text):
        return True
    m = _IPV4.match(text)
    if m:
        return all(int(p) <= 255 for p in re.findall(r"\d+", text.split(":")[0]))
    if _IPV6.match(text) and text.count(":") >= 2:
        return True
    m = _DOMAIN.match(text)
    return bool(m) and m.group(1).lower() not in _FILE_EXT


def _classify_path(text: str, allow_process: bool) -> EntityAttr:
    if _SENSITIVE.search(text):
        return EntityAttr.F0
    if _LIB.search(text):
        return EntityAttr.F1
    if _EXEC.search(text):
        return EntityAttr.F2
    if allow_process and _PROCESS.match(text) and "/" not in text and "\\" not in text:
        return EntityAttr.P
    return EntityAttr.F3


# --------------------------------------------------------------------------
# graph model

class Role(str, Enum):
    ASG = "ASG"
    APG = "APG"
    AFG = "AFG"
    ATG = "ATG"


@dataclass(frozen=True)
class Node:
    id: str
    attr: EntityAttr
    order_index: int
    label: str = ""
    forecast: bool = False


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    event: EventType
    seq: int
    forecast: bool = False


@dataclass(frozen=True)
class AttackGraph:
    """Immutable attributed multigraph with a chronological node order.

    ``nodes`` are kept sorted by ``order_index`` and ``edges`` by ``seq``.
    Construction validates every invariant and raises :class:`GraphError`.
    """

    nodes: tuple[Node, ...] = ()
    edges: tuple[Edge, ...] = ()
    role: Role = Role.ASG
    provenance: str = ""

    def __post_init__(self):
        nodes = tuple(sorted(self.nodes, key=lambda n: n.order_index))
        edges = tuple(sorted(self.edges, key=lambda e: e.seq))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "role", Role(self.role))
        self._validate()

    def _validate(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise GraphError("duplicate node id")
        if [n.order_index for n in self.nodes] != list(range(len(self.nodes))):
            raise GraphError("order_index values must be a permutation of 0..n-1")
        order = {n.id: n for n in self.nodes}
        seqs = set()
        for e in self.edges:
            if e.src not in order or e.dst not in order:
                raise GraphError(f"edge endpoint missing: {e.src}->{e.dst}")
            if e.src == e.dst:
                raise GraphError(f"self-loop on {e.src}")
            if e.seq < 0 or e.seq in seqs:
                raise GraphError(f"edge seq {e.seq} is negative or duplicated")
            seqs.add(e.seq)
            s, d = order[e.src], order[e.dst]
            if not validate_edge(s.attr, e.event, d.attr):
                raise GraphError(
                    f"edge {s.attr.value} -{e.event.value}-> {d.attr.value} violates event rules")
            if e.event is EventType.ForkClone and s.order_index > d.order_index:
                raise GraphError("a forked process cannot precede its parent in node order")

    # -- construction helpers ---------------------------------------------

    @classmethod
    def from_events(cls, attrs: Mapping[str, EntityAttr],
                    events: Iterable[tuple[str, str, EventType]], *,
                    role: Role = Role.ASG, labels: Mapping[str, str] | None = None,
                    provenance: str = "", forecast_nodes: Iterable[str] = (),
                    forecast_edges: Iterable[int] = ()) -> "AttackGraph":
        """Build a graph from events listed in chronological order.

        Node order is derived by inserting endpoints on first appearance,
        subject before object.  Nodes in ``attrs`` that take part in no event
        are appended afterwards in mapping order.
        """
        labels = labels or {}
        fnodes, fedges = set(forecast_nodes), set(forecast_edges)
        order: dict[str, int] = {}
        edges = []
        for seq, (src, dst, ev) in enumerate(events):
            for nid in (src, dst):
                if nid not in order:
                    order[nid] = len(order)
            edges.append(Edge(src, dst, EventType(ev), seq, seq in fedges))
        for nid in attrs:
            if nid not in order:
                order[nid] = len(order)
        nodes = [Node(nid, EntityAttr(attrs[nid]), idx, labels.get(nid, ""), nid in fnodes)
                 for nid, idx in order.items()]
        return cls(tuple(nodes), tuple(edges), role, provenance)

    def with_role(self, role: Role) -> "AttackGraph":
        return replace(self, role=Role(role))

    # -- views ---------------------------------------------------------------

    @cached_property
    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def out_edges(self) -> dict[str, tuple[Edge, ...]]:
        out: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out[e.src].append(e)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def in_edges(self) -> dict[str, tuple[Edge, ...]]:
        inc: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            inc[e.dst].append(e)
        return {k: tuple(v) for k, v in inc.items()}

    @cached_property
    def degree(self) -> dict[str, int]:
        return {n.id: len(self.out_edges[n.id]) + len(self.in_edges[n.id]) for n in self.nodes}

    def attr(self, node_id: str) -> EntityAttr:
        return self.node_map[node_id].attr

    def events(self) -> list[tuple[str, str, EventType]]:
        return [(e.src, e.dst, e.event) for e in self.edges]

    def attrs(self) -> dict[str, EntityAttr]:
        return {n.id: n.attr for n in self.nodes}

    def structure(self) -> tuple:
        """Label- and seq-free signature: attribute codes in order plus the
        sorted set of (src order, dst order, event code) triples."""
        pos = {n.id: n.order_index for n in self.nodes}
        return (tuple(n.attr.code for n in self.nodes),
                tuple(sorted({(pos[e.src], pos[e.dst], e.event.code) for e in self.edges})))

    def __len__(self) -> int:
        return len(self.nodes)


def insertion_order(g: AttackGraph) -> list[str]:
    """Node ids in first-appearance order of edges sorted by seq."""
    seen: dict[str, None] = {}
    for e in g.edges:
        seen.setdefault(e.src)
        seen.setdefault(e.dst)
    for n in g.nodes:
        seen.setdefault(n.id)
    return list(seen)


def remove_nodes(g: AttackGraph, node_ids: Iterable[str]) -> AttackGraph:
    """Drop nodes and incident edges, compacting ``order_index``."""
    drop = set(node_ids)
    keep = [n for n in g.nodes if n.id not in drop]
    nodes = tuple(replace(n, order_index=i) for i, n in enumerate(keep))
    edges = tuple(e for e in g.edges if e.src not in drop and e.dst not in drop)
    return AttackGraph(nodes, edges, g.role, g.provenance)


# --------------------------------------------------------------------------
# sequence encoding

@dataclass(frozen=True)
class SequenceEncoding:
    """Node-code list plus windowed adjacency vectors.

    ``adj_vectors[i][j]`` is the event code between node ``i`` and node
    ``i-1-j`` (0 when absent); vector ``i`` has length ``min(i, window)``.
    """

    node_codes: tuple[int, ...]
    adj_vectors: tuple[tuple[int, ...], ...]
    window: int = DEFAULT_WINDOW
    dropped_edges: int = 0
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if len(self.node_codes) != len(self.adj_vectors):
            raise ValueError("node_codes and adj_vectors differ in length")

    def __len__(self) -> int:
        return len(self.node_codes)

    @property
    def terminated(self) -> bool:
        return bool(self.node_codes) and self.node_codes[-1] == TERMINATOR

    def with_terminator(self) -> "SequenceEncoding":
        """Append the terminator code with an all-zero adjacency vector."""
        if self.terminated:
            return self
        n = len(self.node_codes)
        return replace(self, node_codes=self.node_codes + (TERMINATOR,),
                       adj_vectors=self.adj_vectors + ((0,) * min(n, self.window),))

    def without_terminator(self) -> "SequenceEncoding":
        if not self.terminated:
            return self
        return replace(self, node_codes=self.node_codes[:-1], adj_vectors=self.adj_vectors[:-1])


def to_sequence(g: AttackGraph, window: int = DEFAULT_WINDOW) -> SequenceEncoding:
    if window < 1:
        raise ValueError("window must be >= 1")
    pos = {n.id: n.order_index for n in g.nodes}
    n = len(g.nodes)
    adj = [[0] * min(i, window) for i in range(n)]
    dropped = 0
    # ascending seq: later parallel edges overwrite earlier ones
    for e in g.edges:
        a, b = pos[e.src], pos[e.dst]
        hi, lo = max(a, b), min(a, b)
        j = hi - 1 - lo
        if j >= window:
            dropped += 1
            continue
        adj[hi][j] = e.event.code
    warnings = ()
    if dropped:
        msg = f"{dropped} edge(s) span more than {window} positions and were not encoded"
        logger.warning(msg)
        warnings = (msg,)
    return SequenceEncoding(tuple(node.attr.code for node in g.nodes),
                            tuple(tuple(v) for v in adj), window, dropped, warnings)


def orient_edge(older: EntityAttr, newer: EntityAttr, event: EventType) -> bool | None:
    """Return True when the older node is the subject, False when the newer
    one is, ``None`` when the event fits neither assignment.  Forks always
    run from the older process to the newer one."""
    if validate_edge(older, event, newer):
        return True
    if event is not EventType.ForkClone and validate_edge(newer, event, older):
        return False
    return None


def from_sequence(s: SequenceEncoding, *, role: Role = Role.ASG,
                  provenance: str = "") -> AttackGraph:
    s = s.without_terminator()
    attrs: dict[str, EntityAttr] = {}
    for i, code in enumerate(s.node_codes):
        if not 0 <= code < NUM_ATTRS:
            raise MalformedSequenceError(f"node code {code} at position {i} out of range")
        attrs[f"n{i}"] = EntityAttr.from_code(code)
    nodes = tuple(Node(nid, a, i) for i, (nid, a) in enumerate(attrs.items()))
    edges = []
    for i, vec in enumerate(s.adj_vectors):
        if len(vec) > min(i, s.window):
            raise MalformedSequenceError(f"adjacency vector {i} is too long")
        for j, code in enumerate(vec):
            if code == 0:
                continue
            if not 0 < code < NUM_EDGE_CODES:
                raise MalformedSequenceError(f"edge code {code} out of range")
            ev = EventType.from_code(code)
            older, newer = f"n{i - 1 - j}", f"n{i}"
            orient = orient_edge(attrs[older], attrs[newer], ev)
            if orient is None:
                raise MalformedSequenceError(
                    f"{ev.value} cannot join {attrs[older].value} and {attrs[newer].value}")
            src, dst = (older, newer) if orient else (newer, older)
            edges.append(Edge(src, dst, ev, len(edges)))
    return AttackGraph(nodes, tuple(edges), role, provenance)


# --------------------------------------------------------------------------
# serialization

def graph_to_dict(g: AttackGraph) -> dict:
    nodes = []
    for n in g.nodes:
        d = {"id": n.id, "attr": n.attr.value, "order_index": n.order_index, "label": n.label}
        if n.forecast:
            d["forecast"] = True
        nodes.append(d)
    edges = []
    for e in g.edges:
        d = {"src": e.src, "dst": e.dst, "event": e.event.value, "seq": e.seq}
        if e.forecast:
            d["forecast"] = True
        edges.append(d)
    return {"version": FORMAT_VERSION, "role": g.role.value, "nodes": nodes,
            "edges": edges, "provenance": g.provenance}


def graph_from_dict(d: Mapping) -> AttackGraph:
    version = d.get("version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise GraphError(f"unsupported graph format version {version}")
    try:
        nodes = tuple(Node(str(n["id"]), EntityAttr(n["attr"]), int(n["order_index"]),
                           n.get("label") or "", bool(n.get("forecast", False)))
                      for n in d["nodes"])
        edges = tuple(Edge(str(e["src"]), str(e["dst"]), EventType(e["event"]), int(e["seq"]),
                           bool(e.get("forecast", False)))
                      for e in d["edges"])
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph document: {exc!r}") from exc
    return AttackGraph(nodes, edges, Role(d.get("role", "ASG")), d.get("provenance", ""))


def dumps_graph(g: AttackGraph) -> str:
    return json.dumps(graph_to_dict(g), indent=2)


def save_graph(g: AttackGraph, path: str | Path) -> None:
    Path(path).write_text(dumps_graph(g) + "\n")


def load_graph(path: str | Path) -> AttackGraph:
    return graph_from_dict(json.loads(Path(path).read_text()))


_COLORS = {EntityAttr.P: "red", EntityAttr.S: "green", EntityAttr.FR: "gray"}


def export_dot(g: AttackGraph, name: str = "G") -> str:
    """Render ``g`` as Graphviz DOT; output is a pure function of ``g``."""
    lines = [f'digraph "{name}" {{']
    for n in g.nodes:
        color = _COLORS.get(n.attr, "blue")
        text = n.attr.value if not n.label else f"{n.attr.value}\\n{_escape(n.label)}"
        style = ', style="dashed"' if n.forecast else ""
        lines.append(f'  "{_escape(n.id)}" [label="{text}", color="{color}"{style}];')
    for e in g.edges:
        style = ', style="dashed"' if e.forecast else ""
        lines.append(f'  "{_escape(e.src)}" -> "{_escape(e.dst)}" '
                     f'[label="{e.event.value}", xlabel="{e.seq}"{style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def graph_stats(graphs: Sequence[AttackGraph]) -> dict[str, float]:
    if not graphs:
        return {"graphs": 0, "mean_nodes": 0.0, "mean_edges": 0.0}
    return {"graphs": len(graphs),
            "mean_nodes": sum(len(g.nodes) for g in graphs) / len(graphs),
            "mean_edges": sum(len(g.edges) for g in graphs) / len(graphs)}


_RANDOM_ATTR_WEIGHTS = {EntityAttr.P: 5, EntityAttr.F0: 1, EntityAttr.F1: 1, EntityAttr.F2: 2,
                        EntityAttr.F3: 2, EntityAttr.FR: 1, EntityAttr.S: 2}


def random_graph(rng: random.Random, n_nodes: int, extra_edges: int = 0, *,
                 max_span: int | None = None, role: Role = Role.ASG) -> AttackGraph:
    """Random connected valid graph grown one node per event.

    Each new node attaches to an earlier node with an admissible event;
    ``extra_edges`` further events join existing pairs.  No node pair gets
    two edges, so the result round-trips through :func:`to_sequence` when
    ``max_span`` is at most the window.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    attrs = {"n0": EntityAttr.P}
    order = ["n0"]
    events: list[tuple[str, str, EventType]] = []
    pairs: set[frozenset] = set()
    kinds, weights = zip(*_RANDOM_ATTR_WEIGHTS.items())
    while len(attrs) < n_nodes:
        new = f"n{len(attrs)}"
        attr = rng.choices(kinds, weights)[0]
        lo = 0 if max_span is None else max(0, len(order) - max_span)
        hosts = [h for h in order[lo:] if _joinable(attrs[h], attr)]
        if not hosts:
            continue
        old = rng.choice(hosts)
        evs = _joining_events(attrs[old], attr)
        if not events:
            # the root must stay first in node order, so it leads the first event
            evs = [ev for ev in evs if validate_edge(attrs[old], ev, attr)]
        ev = rng.choice(evs)
        attrs[new] = attr
        order.append(new)
        src, dst = (old, new) if validate_edge(attrs[old], ev, attr) else (new, old)
        events.append((src, dst, ev))
        pairs.add(frozenset((old, new)))
    pos = {nid: i for i, nid in enumerate(order)}
    for _ in range(extra_edges * 20):
        if extra_edges <= 0:
            break
        a, b = sorted(rng.sample(order, 2), key=pos.get) if len(order) > 1 else (None, None)
        if a is None:
            break
        if frozenset((a, b)) in pairs or (max_span is not None and pos[b] - pos[a] > max_span):
            continue
        evs = _joining_events(attrs[a], attrs[b])
        if not evs:
            continue
        ev = rng.choice(evs)
        src, dst = (a, b) if validate_edge(attrs[a], ev, attrs[b]) else (b, a)
        events.append((src, dst, ev))
        pairs.add(frozenset((a, b)))
        extra_edges -= 1
    return AttackGraph.from_events(attrs, events, role=role)


def _joining_events(older: EntityAttr, newer: EntityAttr) -> list[EventType]:
    return [ev for ev in EventType if orient_edge(older, newer, ev) is not None]


def _joinable(older: EntityAttr, newer: EntityAttr) -> bool:
    return bool(_joining_events(older, newer))
