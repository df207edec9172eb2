"""Graph alignment with multi-hop equivalent semantics.

Scores how much of a query graph (usually a technique template) is present
in a host graph.  Candidate host nodes must share the query node's attribute
and have at least its degree.  A single query edge may be realized in the
host by a chain whose earlier hops all propagate taint (delivery rules) and
whose last hop carries the query edge's event.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .graph import FILE_ATTRS, AttackGraph, Edge, EntityAttr, EventType

LOAD = "Load"


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class DeliveryRule:
    """One suspicious-semantics delivery rule, stated in taint direction.

    ``event`` is an :class:`EventType` or the string ``"Load"``, which is
    matched by Read edges whose source file is a library (F1).
    """

    taint_source: frozenset
    taint_sink: frozenset
    event: EventType | str

    def matches(self, src: EntityAttr, event: EventType, dst: EntityAttr) -> bool:
        if self.event == LOAD:
            return event is EventType.Read and src is EntityAttr.F1 and dst in self.taint_sink
        return event is self.event and src in self.taint_source and dst in self.taint_sink


_P = frozenset({EntityAttr.P})
_S = frozenset({EntityAttr.S})

DEFAULT_RULES: tuple[DeliveryRule, ...] = (
    DeliveryRule(FILE_ATTRS, _P, EventType.Read),
    DeliveryRule(_P, FILE_ATTRS, EventType.Write),
    DeliveryRule(frozenset({EntityAttr.F1}), _P, LOAD),
    DeliveryRule(_S, _P, EventType.Receive),
    DeliveryRule(_P, _S, EventType.Send),
    DeliveryRule(_P, _P, EventType.ForkClone),
)

_CLASS_NAMES = {"F": FILE_ATTRS, "F*": FILE_ATTRS, "P": _P, "S": _S}


def _parse_class(token: str) -> frozenset:
    if token in _CLASS_NAMES:
        return _CLASS_NAMES[token]
    return frozenset({EntityAttr(token)})


def parse_rules(text: str) -> tuple[DeliveryRule, ...]:
    """Parse lines of ``source_class event sink_class``; ``#`` starts a comment."""
    rules = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise AlignmentError(f"rules line {lineno}: expected 3 fields, got {len(parts)}")
        src, ev, dst = parts
        try:
            event = LOAD if ev == LOAD else EventType(ev)
            rules.append(DeliveryRule(_parse_class(src), _parse_class(dst), event))
        except ValueError as exc:
            raise AlignmentError(f"rules line {lineno}: {exc}") from exc
    if not rules:
        raise AlignmentError("rules file defines no rules")
    return tuple(rules)


def load_rules(path: str | Path) -> tuple[DeliveryRule, ...]:
    return parse_rules(Path(path).read_text())


def is_delivery(src: EntityAttr, event: EventType, dst: EntityAttr,
                rules: Sequence[DeliveryRule] = DEFAULT_RULES) -> bool:
    return any(r.matches(src, event, dst) for r in rules)


@dataclass(frozen=True)
class AlignmentConfig:
    fix_threshold: float = 0.3
    interpret_threshold: float = 0.6
    max_hops: int = 4
    max_path_len: int = 8
    max_paths: int = 10_000
    search_branching: int = 4
    search_budget: int = 64
    rules: tuple[DeliveryRule, ...] = DEFAULT_RULES

    def __post_init__(self):
        if not 0.0 <= self.fix_threshold <= 1.0 or not 0.0 <= self.interpret_threshold <= 1.0:
            raise ValueError("thresholds must lie in [0, 1]")
        if min(self.max_hops, self.max_path_len, self.max_paths, self.search_branching,
               self.search_budget) < 1:
            raise ValueError("max_hops, max_path_len, max_paths and search limits must be >= 1")


@dataclass
class AlignmentResult:
    score: float
    fixed: dict[str, str | None]
    node_scores: dict[str, dict[str, float]]
    matched_flows: int
    total_flows: int
    flows: list[tuple[str, str, bool]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "matched_flows": self.matched_flows,
            "total_flows": self.total_flows,
            "fixed": dict(self.fixed),
            "node_scores": {q: dict(v) for q, v in self.node_scores.items()},
            "flows": [{"src": i, "dst": j, "matched": m} for i, j, m in self.flows],
        }


# --------------------------------------------------------------------------
# standalone predicates


def candidates(i: str, gq: AttackGraph, gp: AttackGraph) -> set[str]:
    """Host nodes with the query node's attribute and at least its degree."""
    node = gq.node_map[i]
    need = gq.degree[i]
    return {k.id for k in gp.nodes if k.attr is node.attr and gp.degree[k.id] >= need}


def mhes_equivalent(edge: tuple[EntityAttr, EventType, EntityAttr], path: Sequence[Edge],
                    gp: AttackGraph, rules: Sequence[DeliveryRule] = DEFAULT_RULES) -> bool:
    """Whether a host path carries the same semantics as a single query edge.

    The path must start at the edge's subject attribute, end at its object
    attribute, finish with the same event, and every earlier hop must be a
    delivery rule.
    """
    if not path:
        raise AlignmentError("path must contain at least one edge")
    for a, b in zip(path, path[1:]):
        if a.dst != b.src:
            raise AlignmentError(f"path is disconnected between {a.dst} and {b.src}")
    i_attr, event, j_attr = EntityAttr(edge[0]), EventType(edge[1]), EntityAttr(edge[2])
    if gp.attr(path[0].src) is not i_attr or gp.attr(path[-1].dst) is not j_attr:
        return False
    if path[-1].event is not event:
        return False
    return all(is_delivery(gp.attr(e.src), e.event, gp.attr(e.dst), rules) for e in path[:-1])


# --------------------------------------------------------------------------
# engine


class _Aligner:
    """Caches shared by the scoring functions for one (query, host) pair."""

    def __init__(self, gq: AttackGraph, gp: AttackGraph, cfg: AlignmentConfig):
        self.gq, self.gp, self.cfg = gq, gp, cfg
        self.cands = {n.id: candidates(n.id, gq, gp) for n in gq.nodes}
        self.fixed: dict[str, str | None] = {}
        self._out_paths: dict[str, list[tuple[Edge, ...]]] = {}
        self._in_paths: dict[str, list[tuple[Edge, ...]]] = {}
        self._hop_cache: dict[tuple, dict[str, int]] = {}
        self._deliver = {}
        for e in gp.edges:
            key = (gp.attr(e.src), e.event, gp.attr(e.dst))
            if key not in self._deliver:
                self._deliver[key] = is_delivery(*key, cfg.rules)
        self._qdeliver = {e: is_delivery(gq.attr(e.src), e.event, gq.attr(e.dst), cfg.rules)
                          for e in gq.edges}
        self._reach = self._query_reachability()
        self._score_deps: dict[str, list[str]] = {}
        self._flows: dict[tuple[str, str], set[tuple[str, str]]] = {}

    # -- query side ---------------------------------------------------------

    def _query_reachability(self) -> dict[str, set[str]]:
        reach = {}
        for n in self.gq.nodes:
            seen, todo = set(), [n.id]
            while todo:
                u = todo.pop()
                for e in self.gq.out_edges[u]:
                    if e.dst not in seen:
                        seen.add(e.dst)
                        todo.append(e.dst)
            seen.discard(n.id)
            reach[n.id] = seen
        return reach

    def paths_from(self, i: str) -> list[tuple[Edge, ...]]:
        """Simple query paths starting at ``i`` (capped per endpoint)."""
        if i not in self._out_paths:
            self._out_paths[i] = self._enumerate(i, forward=True)
        return self._out_paths[i]

    def paths_to(self, i: str) -> list[tuple[Edge, ...]]:
        if i not in self._in_paths:
            self._in_paths[i] = self._enumerate(i, forward=False)
        return self._in_paths[i]

    def _enumerate(self, start: str, forward: bool) -> list[tuple[Edge, ...]]:
        gq, cap, limit = self.gq, self.cfg.max_paths, self.cfg.max_path_len
        per_end: dict[str, int] = {}
        found: list[tuple[Edge, ...]] = []
        truncated = False
        stack: list[tuple[str, tuple[Edge, ...], frozenset]] = [(start, (), frozenset({start}))]
        while stack:
            u, path, seen = stack.pop()
            nxt = gq.out_edges[u] if forward else gq.in_edges[u]
            for e in reversed(nxt):
                v = e.dst if forward else e.src
                if v in seen:
                    continue
                p = path + (e,) if forward else (e,) + path
                if per_end.get(v, 0) >= cap:
                    truncated = True
                    continue
                per_end[v] = per_end.get(v, 0) + 1
                found.append(p)
                if len(p) < limit:
                    stack.append((v, p, seen | {v}))
        if truncated:
            found = self._shortest_only(start, forward, found)
        return sorted(found, key=lambda p: (len(p), [e.seq for e in p]))

    def _shortest_only(self, start, forward, found):
        best: dict[str, int] = {}
        for p in found:
            end = p[-1].dst if forward else p[0].src
            best[end] = min(best.get(end, len(p)), len(p))
        return [p for p in found if len(p) == best[p[-1].dst if forward else p[0].src]]

    def cand(self, q: str) -> set[str]:
        f = self.fixed.get(q)
        return {f} if f is not None else self.cands[q]

    # -- host side ----------------------------------------------------------

    def hops_forward(self, anchor: str, qe: Edge) -> dict[str, int]:
        """Shortest equivalent-path length from ``anchor`` to each candidate
        of ``qe``'s destination."""
        targets = frozenset(self.cand(qe.dst))
        key = ("f", anchor, qe.event, targets)
        if key in self._hop_cache:
            return self._hop_cache[key]
        gp, out = self.gp, {}
        frontier, seen = [anchor], {anchor}
        for depth in range(1, self.cfg.max_hops + 1):
            nxt = []
            for h in frontier:
                for e in gp.out_edges[h]:
                    if e.event is qe.event and e.dst in targets and e.dst not in out:
                        out[e.dst] = depth
                    if (depth < self.cfg.max_hops and e.dst not in seen
                            and self._deliver[(gp.attr(e.src), e.event, gp.attr(e.dst))]):
                        seen.add(e.dst)
                        nxt.append(e.dst)
            frontier = nxt
        self._hop_cache[key] = out
        return out

    def hops_backward(self, anchor: str, qe: Edge) -> dict[str, int]:
        """Shortest equivalent-path length from each candidate of ``qe``'s
        source to ``anchor``."""
        sources = frozenset(self.cand(qe.src))
        key = ("b", anchor, qe.event, sources)
        if key in self._hop_cache:
            return self._hop_cache[key]
        gp, out = self.gp, {}
        # the hop into ``anchor`` carries the query event; walk delivery hops back from there
        frontier, seen = [], set()
        for e in gp.in_edges[anchor]:
            if e.event is qe.event and e.src not in seen:
                seen.add(e.src)
                frontier.append(e.src)
        for depth in range(1, self.cfg.max_hops + 1):
            nxt = []
            for h in frontier:
                if h in sources and h not in out:
                    out[h] = depth
                if depth < self.cfg.max_hops:
                    for e in gp.in_edges[h]:
                        if e.src not in seen and self._deliver[(gp.attr(e.src), e.event, gp.attr(e.dst))]:
                            seen.add(e.src)
                            nxt.append(e.src)
            frontier = nxt
        self._hop_cache[key] = out
        return out

    # -- scores ---------------------------------------------------------------

    def edge_score(self, qe: Edge, anchors: Iterable[str], backward: bool = False) -> tuple[float, set[str]]:
        reached: dict[str, int] = {}
        for a in anchors:
            hops = self.hops_backward(a, qe) if backward else self.hops_forward(a, qe)
            for l, h in hops.items():
                if h < reached.get(l, 1 << 30):
                    reached[l] = h
        if not reached:
            return 0.0, set()
        return 1.0 / min(reached.values()), set(reached)

    def path_score(self, path: Sequence[Edge], k: str, backward: bool = False) -> float:
        """Best mean edge score over host realizations of ``path`` anchored at
        ``k`` (its first node, or its last one when walking backward).

        Each realization chains the per-edge equivalent host paths end to
        end; an edge with no realization scores 0 and the chain resumes from
        every candidate of the next query node.
        """
        state = {k: 0.0}
        carry = 0.0
        edges = list(reversed(path)) if backward else list(path)
        for qe in edges:
            nxt: dict[str, float] = {}
            for a, c in state.items():
                hops = self.hops_backward(a, qe) if backward else self.hops_forward(a, qe)
                for l, h in hops.items():
                    v = c + 1.0 / h
                    if v > nxt.get(l, -1.0):
                        nxt[l] = v
            if nxt:
                state = nxt
            else:
                carry = max(state.values(), default=carry)
                state = {l: carry for l in self.cand(qe.src if backward else qe.dst)}
        return max(state.values(), default=carry) / len(path)

    def node_score(self, i: str, k: str) -> float:
        paths = self.paths_from(i)
        if not paths:
            return self.incoming_score(i, k)
        return sum(self.path_score(p, k) for p in paths) / len(paths)

    def incoming_score(self, i: str, k: str) -> float:
        paths = self.paths_to(i)
        if not paths:
            return 0.0
        return sum(self.path_score(p, k, backward=True) for p in paths) / len(paths)

    # -- flows ----------------------------------------------------------------

    def flow_realized(self, i: str, j: str, hi: str, hj: str) -> bool:
        """Whether some query path i=>j is realized by a host path hi=>hj as a
        chain of blocks, each block equivalent to a single edge."""
        key = (i, hi)
        if key not in self._flows:
            self._flows[key] = self._realized_from(i, hi)
        return (j, hj) in self._flows[key]

    def _realized_from(self, i: str, hi: str) -> set[tuple[str, str]]:
        # product-automaton BFS; collects every (query, host) block endpoint
        gp, gq, cap = self.gp, self.gq, self.cfg.max_hops
        start = (hi, i, 0, 0)
        seen = {start}
        todo = deque([start])
        hits: set[tuple[str, str]] = set()
        while todo:
            h, u, hs, qs = todo.popleft()
            for qe in gq.out_edges[u]:
                for he in gp.out_edges[h]:
                    if he.event is qe.event and gp.attr(he.dst) is gq.attr(qe.dst):
                        hits.add((qe.dst, he.dst))
                        st = (he.dst, qe.dst, 0, 0)
                        if st not in seen:
                            seen.add(st)
                            todo.append(st)
                if qs + 1 < cap and self._qdeliver[qe]:
                    st = (h, qe.dst, hs, qs + 1)
                    if st not in seen:
                        seen.add(st)
                        todo.append(st)
            if hs + 1 < cap:
                for he in gp.out_edges[h]:
                    if self._deliver[(gp.attr(he.src), he.event, gp.attr(he.dst))]:
                        st = (he.dst, u, hs + 1, qs)
                        if st not in seen:
                            seen.add(st)
                            todo.append(st)
        return hits

    def consistent(self, i: str, k: str) -> bool:
        for j, hj in self.fixed.items():
            if hj is None or j == i:
                continue
            if k == hj:
                return False
            if j in self._reach[i] and not self.flow_realized(i, j, k, hj):
                return False
            if i in self._reach[j] and not self.flow_realized(j, i, hj, k):
                return False
        return True

    # -- driver -----------------------------------------------------------------

    def run(self) -> AlignmentResult:
        """Limited discrepancy search over fixings: the greedy completion
        first, then completions departing from the preferred candidate at
        exactly 1, 2, ... query nodes, until a perfect score or the budget."""
        self._host_order = {n.id: n.order_index for n in self.gp.nodes}
        self._budget = self.cfg.search_budget
        self._score_cache: dict[tuple, float] = {}
        best = None
        for d in range(len(self.gq.nodes) + 1):
            res = self._probe(0, {}, d)
            if res is not None and (best is None or res.score > best.score):
                best = res
            if best.score == 1.0 or self._budget <= 0:
                break
        return best

    def _cached_score(self, i: str, k: str) -> float:
        # node scores only see the fixings of the nodes on the scored paths
        if i not in self._score_deps:
            paths = self.paths_from(i) or self.paths_to(i)
            self._score_deps[i] = sorted({q for p in paths for e in p for q in (e.src, e.dst)} - {i})
        key = (i, k, tuple(self.fixed.get(q) for q in self._score_deps[i]))
        if key not in self._score_cache:
            self._score_cache[key] = self.node_score(i, k)
        return self._score_cache[key]

    def _choices(self, idx: int) -> tuple[list[str | None], dict[str, float]]:
        """Candidates for query node ``idx`` in preference order."""
        qn = self.gq.nodes[idx]
        i = qn.id
        scored = {k: self._cached_score(i, k) for k in sorted(self.cands[i])}
        eligible = [k for k, s in scored.items() if s > self.cfg.fix_threshold]
        pool = [k for k in eligible if self.consistent(i, k)] or eligible
        if not pool:
            return [None], scored
        top_score = max(scored[k] for k in pool)
        tied = [k for k in pool if scored[k] == top_score]
        incoming = {k: self.incoming_score(i, k) for k in tied}
        top_in = max(incoming.values())
        order = self._host_order
        rank = lambda k: (abs(order[k] - qn.order_index), order[k], k)
        first = sorted((k for k in tied if incoming[k] == top_in), key=rank)
        rest = sorted((k for k in pool if k not in first), key=lambda k: (-scored[k], *rank(k)))
        return first + rest, scored

    def _probe(self, idx: int, node_scores: dict[str, dict[str, float]],
               discrepancies: int) -> AlignmentResult | None:
        gq = self.gq
        if idx == len(gq.nodes):
            self._budget -= 1
            return self._finish(node_scores)
        i = gq.nodes[idx].id
        choices, scored = self._choices(idx)
        node_scores = {**node_scores, i: scored}
        later = len(gq.nodes) - idx - 1
        best = None
        for rank, k in enumerate(choices[:self.cfg.search_branching]):
            left = discrepancies - (rank > 0)
            if left < 0:
                break
            if left > later:
                continue
            self.fixed[i] = k
            res = self._probe(idx + 1, node_scores, left)
            del self.fixed[i]
            if res is not None and (best is None or res.score > best.score):
                best = res
            if (best is not None and best.score == 1.0) or self._budget <= 0:
                break
        return best

    def _finish(self, node_scores: dict[str, dict[str, float]]) -> AlignmentResult:
        gq = self.gq
        fixed = {n.id: self.fixed.get(n.id) for n in gq.nodes}
        flows = []
        for qn in gq.nodes:
            i = qn.id
            for j in sorted(self._reach[i], key=lambda x: gq.node_map[x].order_index):
                hi, hj = fixed[i], fixed[j]
                ok = hi is not None and hj is not None and self.flow_realized(i, j, hi, hj)
                flows.append((i, j, ok))
        matched = sum(1 for f in flows if f[2])
        score = matched / len(flows) if flows else 0.0
        return AlignmentResult(score, fixed, node_scores, matched, len(flows), flows)


# --------------------------------------------------------------------------
# public operations


def edge_score(qe: Edge, k: str, gp: AttackGraph, gq: AttackGraph,
               cfg: AlignmentConfig = AlignmentConfig()) -> float:
    """Best 1/hops over candidates of ``qe``'s destination reachable from ``k``
    by an equivalent host path; 0 when none exists within ``max_hops``."""
    return _Aligner(gq, gp, cfg).edge_score(qe, {k})[0]


def path_score(i: str, j: str, k: str, gp: AttackGraph, gq: AttackGraph,
               cfg: AlignmentConfig = AlignmentConfig()) -> float:
    """Mean over query paths i=>j of the per-path mean edge score."""
    al = _Aligner(gq, gp, cfg)
    paths = [p for p in al.paths_from(i) if p[-1].dst == j]
    if not paths:
        return 0.0
    return sum(al.path_score(p, k) for p in paths) / len(paths)


def node_score(i: str, k: str, gp: AttackGraph, gq: AttackGraph,
               cfg: AlignmentConfig = AlignmentConfig()) -> float:
    return _Aligner(gq, gp, cfg).node_score(i, k)


def align(gq: AttackGraph, gp: AttackGraph, cfg: AlignmentConfig = AlignmentConfig()) -> AlignmentResult:
    """Align query ``gq`` into host ``gp``.

    Query nodes are fixed in node order to their best-scoring candidate
    (above ``fix_threshold``), preferring candidates whose flows agree with
    nodes fixed earlier.  The score is the fraction of query flows (ordered
    pairs joined by a query path) realized between the fixed host nodes.
    """
    if len(gq.nodes) == 0:
        raise AlignmentError("query graph is empty")
    if len(gq.nodes) == 1:
        raise AlignmentError("single-node query graphs carry no flows")
    return _Aligner(gq, gp, cfg).run()


def interpret(afg: AttackGraph, templates: Sequence, cfg: AlignmentConfig = AlignmentConfig()
              ) -> list[tuple[str, float]]:
    """Techniques whose template aligns into ``afg`` above the threshold,
    by descending score then technique id."""
    hits = []
    for t in templates:
        s = align(t.graph, afg, cfg).score
        if s > cfg.interpret_threshold:
            hits.append((t.technique_id, s))
    hits.sort(key=lambda x: (-x[1], x[0]))
    return hits


def save_report(result: AlignmentResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2) + "\n")
