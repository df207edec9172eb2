"""Evaluation procedures: alignment perturbation study, broken-graph
reconstruction, technique precision/recall and response-rule dispatch."""
from __future__ import annotations

import csv
import logging
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import timedelta
from pathlib import Path
from statistics import mean
from typing import Sequence

from .alignment import AlignmentConfig, align, interpret, is_delivery
from .graph import (FILE_ATTRS, AttackGraph, EntityAttr, EventType, GraphError, orient_edge,
                    remove_nodes, validate_edge)

logger = logging.getLogger(__name__)

PERTURBATION_KINDS = ("edge-add", "edge-del", "node-add-random", "node-del-random",
                      "node-add-mhes", "node-del-mhes")


class EvaluationError(ValueError):
    pass


# --------------------------------------------------------------------------
# perturbation


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.count < 0:
            raise ValueError("count must be >= 0")


@dataclass
class PerturbOutcome:
    graph: AttackGraph
    applied: int
    flagged: bool = False
    diagnostics: list[str] = field(default_factory=list)


class _Events:
    """Mutable event-list view of a graph; rebuilt through ``from_events``."""

    def __init__(self, g: AttackGraph):
        self.attrs = {n.id: n.attr for n in g.nodes}
        self.labels = {n.id: n.label for n in g.nodes}
        self.events = [(e.src, e.dst, e.event) for e in g.edges]
        self.role, self.provenance = g.role, g.provenance
        self._fresh = 0

    def fresh_id(self) -> str:
        while True:
            self._fresh += 1
            nid = f"p{self._fresh}"
            if nid not in self.attrs:
                return nid

    def build(self) -> AttackGraph:
        return AttackGraph.from_events(self.attrs, self.events, role=self.role,
                                       labels=self.labels, provenance=self.provenance)

    def order(self) -> dict[str, int]:
        return {n.id: n.order_index for n in self.build().nodes}


def _attempt(ev: _Events, change) -> bool:
    """Apply ``change`` to ``ev``; roll back and report False if the result
    is not a valid graph."""
    snap = (dict(ev.attrs), dict(ev.labels), list(ev.events))
    if change() is False:
        ev.attrs, ev.labels, ev.events = snap
        return False
    try:
        ev.build()
    except GraphError:
        ev.attrs, ev.labels, ev.events = snap
        return False
    return True


def _edge_add(ev: _Events, rng: random.Random) -> bool:
    ids = sorted(ev.attrs)
    if len(ids) < 2:
        return False
    order = ev.order()
    existing = set(ev.events)
    a, b = sorted(rng.sample(ids, 2), key=order.get)
    evs = [e for e in EventType if orient_edge(ev.attrs[a], ev.attrs[b], e) is not None]
    rng.shuffle(evs)
    for e in evs:
        src, dst = (a, b) if orient_edge(ev.attrs[a], ev.attrs[b], e) else (b, a)
        if (src, dst, e) not in existing:
            return _attempt(ev, lambda: ev.events.append((src, dst, e)))
    return False


def _edge_del(ev: _Events, rng: random.Random) -> bool:
    if not ev.events:
        return False
    k = rng.randrange(len(ev.events))

    def change():
        del ev.events[k]
    return _attempt(ev, change)


def _node_add_random(ev: _Events, rng: random.Random) -> bool:
    attr = rng.choice(list(EntityAttr))
    hosts = sorted(h for h in ev.attrs
                   if any(orient_edge(ev.attrs[h], attr, e) is not None for e in EventType))
    if not hosts:
        return False
    old = rng.choice(hosts)
    e = rng.choice([e for e in EventType if orient_edge(ev.attrs[old], attr, e) is not None])
    new = ev.fresh_id()

    def change():
        ev.attrs[new] = attr
        ev.labels[new] = ""
        src, dst = (old, new) if orient_edge(ev.attrs[old], attr, e) else (new, old)
        ev.events.append((src, dst, e))
    return _attempt(ev, change)


def _node_del_random(ev: _Events, rng: random.Random) -> bool:
    if len(ev.attrs) < 2:
        return False
    victim = rng.choice(sorted(ev.attrs))

    def change():
        del ev.attrs[victim]
        ev.labels.pop(victim, None)
        ev.events = [x for x in ev.events if victim not in (x[0], x[1])]
    return _attempt(ev, change)


def mhes_split_sites(ev: _Events) -> list[int]:
    """Event indices ``u -e-> v`` with a process subject, splittable into
    ``u -ForkClone-> x -e-> v``."""
    return [k for k, (s, d, e) in enumerate(ev.events) if ev.attrs[s] is EntityAttr.P]


def mhes_collapse_sites(ev: _Events, rules=None) -> list[str]:
    """Nodes ``x`` whose only edges are a delivery hop ``u -> x`` followed by
    ``x -e-> v``, where ``u -e-> v`` is itself a valid edge."""
    kw = {} if rules is None else {"rules": rules}
    inc, out = defaultdict(list), defaultdict(list)
    for k, (s, d, e) in enumerate(ev.events):
        out[s].append(k)
        inc[d].append(k)
    sites = []
    for x in sorted(ev.attrs):
        if len(inc[x]) != 1 or len(out[x]) != 1:
            continue
        u, _, e1 = ev.events[inc[x][0]]
        _, v, e2 = ev.events[out[x][0]]
        if inc[x][0] > out[x][0] or u == v:
            continue
        if is_delivery(ev.attrs[u], e1, ev.attrs[x], **kw) and validate_edge(ev.attrs[u], e2, ev.attrs[v]):
            sites.append(x)
    return sites


def _node_add_mhes(ev: _Events, rng: random.Random) -> bool:
    sites = mhes_split_sites(ev)
    rng.shuffle(sites)
    for k in sites:
        u, v, e = ev.events[k]
        new = ev.fresh_id()

        def change(k=k, u=u, v=v, e=e, new=new):
            ev.attrs[new] = EntityAttr.P
            ev.labels[new] = ""
            ev.events[k:k + 1] = [(u, new, EventType.ForkClone), (new, v, e)]
        if _attempt(ev, change):
            return True
    return False


def _node_del_mhes(ev: _Events, rng: random.Random) -> bool:
    sites = mhes_collapse_sites(ev)
    rng.shuffle(sites)
    for x in sites:
        def change(x=x):
            k_in = next(k for k, t in enumerate(ev.events) if t[1] == x)
            k_out = next(k for k, t in enumerate(ev.events) if t[0] == x)
            u, v, e = ev.events[k_in][0], ev.events[k_out][1], ev.events[k_out][2]
            ev.events[k_out] = (u, v, e)
            del ev.events[k_in]
            del ev.attrs[x]
            ev.labels.pop(x, None)
        if _attempt(ev, change):
            return True
    return False


_OPS = {"edge-add": _edge_add, "edge-del": _edge_del, "node-add-random": _node_add_random,
        "node-del-random": _node_del_random, "node-add-mhes": _node_add_mhes,
        "node-del-mhes": _node_del_mhes}


def perturb_with_report(g: AttackGraph, spec: PerturbationSpec, max_tries: int = 50) -> PerturbOutcome:
    rng = random.Random(f"{spec.seed}:{spec.kind}")
    ev = _Events(g)
    op = _OPS[spec.kind]
    # MHES operations already scan every site, so one attempt is exhaustive
    tries = 1 if spec.kind.endswith("-mhes") else max_tries
    applied, diags = 0, []
    for _ in range(spec.count):
        if any(op(ev, rng) for _ in range(tries)):
            applied += 1
            continue
        diags.append(f"{spec.kind}: no applicable site after {applied} change(s)")
        break
    for d in diags:
        logger.info(d)
    return PerturbOutcome(ev.build() if applied else g, applied, applied < spec.count, diags)


def perturb(g: AttackGraph, spec: PerturbationSpec) -> AttackGraph:
    """Apply ``spec.count`` perturbations of one kind, deterministically per seed.

    MHES kinds without an applicable site leave the graph unchanged (see
    :func:`perturb_with_report` for the flag).
    """
    return perturb_with_report(g, spec).graph


@dataclass
class PerturbationTable:
    """Mean alignment score per kind and count (averaged over graphs and seeds)."""

    scores: dict[str, dict[int, float]]
    max_count: int
    flagged: int = 0

    def group(self, kinds: Sequence[str], count: int) -> float:
        return mean(self.scores[k][count] for k in kinds)

    def to_rows(self) -> list[dict]:
        return [{"kind": k, "count": c, "score": self.scores[k][c]}
                for k in PERTURBATION_KINDS for c in range(self.max_count + 1)]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", *range(self.max_count + 1)])
            for k in PERTURBATION_KINDS:
                w.writerow([k, *(f"{self.scores[k][c]:.6f}" for c in range(self.max_count + 1))])


GROUPS = {
    "mhes-node": ("node-add-mhes", "node-del-mhes"),
    "random-node": ("node-add-random", "node-del-random"),
    "edge": ("edge-add", "edge-del"),
    "node": ("node-add-random", "node-del-random"),
    "additions": ("edge-add", "node-add-random", "node-add-mhes"),
    "deletions": ("edge-del", "node-del-random", "node-del-mhes"),
}

ORDERINGS = (("mhes-node", "random-node"), ("edge", "node"), ("additions", "deletions"))


def perturbation_study(graphs: Sequence[AttackGraph], max_count: int, seeds: Sequence[int],
                       cfg: AlignmentConfig = AlignmentConfig()) -> PerturbationTable:
    """Score each original graph (query) against its perturbed copies (host)."""
    scores: dict[str, dict[int, float]] = {}
    flagged = 0
    for kind in PERTURBATION_KINDS:
        scores[kind] = {}
        for count in range(max_count + 1):
            vals = []
            for gi, g in enumerate(graphs):
                for s in seeds:
                    out = perturb_with_report(g, PerturbationSpec(kind, count, s * 7919 + gi))
                    flagged += out.flagged
                    vals.append(align(g, out.graph, cfg).score)
            scores[kind][count] = mean(vals)
    return PerturbationTable(scores, max_count, flagged)


def check_orderings(table: PerturbationTable) -> list[tuple[str, int, float, float, bool]]:
    """(ordering, count, lhs, rhs, holds) for every ordering and count >= 1;
    strict at count >= 2."""
    out = []
    for hi, lo in ORDERINGS:
        for c in range(1, table.max_count + 1):
            a, b = table.group(GROUPS[hi], c), table.group(GROUPS[lo], c)
            ok = a > b if c >= 2 else a >= b
            out.append((f"{hi}>={lo}", c, a, b, ok))
    return out


# --------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconstructionRecord:
    graph_id: str
    deleted: int
    broken_score: float
    afg_score: float
    original_techniques: list[str]
    broken_techniques: list[str]
    afg_techniques: list[str]
    generated_nodes: int
    generated_edges: int
    stop_reason: str = ""


def _ids(hits) -> list[str]:
    return [tid for tid, _ in hits]


def break_graph(g: AttackGraph, templates, cfg: AlignmentConfig = AlignmentConfig(),
                max_del: int = 5, diagnostics: list[str] | None = None
                ) -> tuple[AttackGraph, list[str]]:
    """Delete the temporally latest node repeatedly until a technique matched
    by ``g`` is no longer matched, or ``max_del`` nodes are gone."""
    original = set(_ids(interpret(g, templates, cfg)))
    if not original:
        raise EvaluationError("graph matches no template")
    current, deleted = g, []
    for _ in range(max_del):
        if len(current.nodes) <= 1:
            break
        last = current.nodes[-1].id
        current = remove_nodes(current, [last])
        deleted.append(last)
        if not original <= set(_ids(interpret(current, templates, cfg))):
            return current, deleted
    if max_del > 0:
        msg = f"stopped after {len(deleted)} deletion(s) without losing a technique"
        logger.info(msg)
        if diagnostics is not None:
            diagnostics.append(msg)
    return current, deleted


@dataclass(frozen=True)
class ReconstructionConfig:
    budget: int = 5
    max_del: int = 5
    align: AlignmentConfig = AlignmentConfig()


def reconstruction_experiment(model, graphs: Sequence[AttackGraph], templates,
                              cfg: ReconstructionConfig = ReconstructionConfig(),
                              graph_ids: Sequence[str] | None = None
                              ) -> list[ReconstructionRecord]:
    """Break each graph, forecast it back, and score both against the original."""
    from .forecast import StopCriterion, forecast_trace
    records = []
    ids = list(graph_ids) if graph_ids is not None else [f"g{i}" for i in range(len(graphs))]
    for gid, g in zip(ids, graphs):
        truth = _ids(interpret(g, templates, cfg.align))
        if not truth:
            logger.info("%s matches no template; skipped", gid)
            continue
        broken, deleted = break_graph(g, templates, cfg.align, cfg.max_del)
        broken_hits = _ids(interpret(broken, templates, cfg.align))
        stop = StopCriterion(cfg.budget, templates, cfg.align)
        trace = forecast_trace(model, broken, stop)
        afg = trace.graph
        records.append(ReconstructionRecord(
            gid, len(deleted),
            align(g, broken, cfg.align).score if len(g.nodes) > 1 else 1.0,
            align(g, afg, cfg.align).score if len(g.nodes) > 1 else 1.0,
            truth, broken_hits, _ids(interpret(afg, templates, cfg.align)),
            len(afg.nodes) - len(broken.nodes), len(afg.edges) - len(broken.edges),
            trace.reason))
    return records


def summarize_reconstruction(records: Sequence[ReconstructionRecord]) -> dict[int, dict[str, float]]:
    """Per deletion count: number of records and mean broken/AFG scores."""
    by_n: dict[int, list[ReconstructionRecord]] = defaultdict(list)
    for r in records:
        by_n[r.deleted].append(r)
    return {n: {"records": len(rs), "broken": mean(r.broken_score for r in rs),
                "afg": mean(r.afg_score for r in rs),
                "generated_nodes": mean(r.generated_nodes for r in rs)}
            for n, rs in sorted(by_n.items())}


def write_records(records: Sequence[ReconstructionRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(ReconstructionRecord.__dataclass_fields__)
        w.writerow(cols)
        for r in records:
            d = asdict(r)
            w.writerow([";".join(d[c]) if isinstance(d[c], list) else
                        (f"{d[c]:.6f}" if isinstance(d[c], float) else d[c]) for c in cols])


def technique_prf(truth: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]],
                  zero_division: float = 0.0) -> tuple[float, float, float]:
    """Micro-averaged precision, recall and F1 over technique-id sets."""
    if len(truth) != len(predicted):
        raise EvaluationError("truth and predicted lists differ in length")
    tp = fp = fn = 0
    for t, p in zip(truth, predicted):
        t, p = set(t), set(p)
        tp += len(t & p)
        fp += len(p - t)
        fn += len(t - p)
    precision = tp / (tp + fp) if tp + fp else zero_division
    recall = tp / (tp + fn) if tp + fn else zero_division
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# --------------------------------------------------------------------------
# response dispatch

ACTIONS = ("block-read-sensitive", "block-outbound", "block-exec", "block-write", "block-spawn")
DEFAULT_DECAY = timedelta(hours=2)


@dataclass(frozen=True)
class ReinforcementRule:
    trigger: tuple[EntityAttr, EventType, EntityAttr]
    action: str
    decay: timedelta = DEFAULT_DECAY
    edge_seq: int = -1

    def __post_init__(self):
        s, e, o = self.trigger
        if not validate_edge(s, e, o):
            raise ValueError("trigger is not a valid edge")
        if self.action != rule_action(s, e, o):
            raise ValueError(f"action {self.action!r} does not follow from the trigger")


def rule_action(subject: EntityAttr, event: EventType, obj: EntityAttr) -> str | None:
    """Response action for a predicted edge (stored direction), or None."""
    if event is EventType.Read and subject is EntityAttr.F0:
        return "block-read-sensitive"
    if event is EventType.Send:
        return "block-outbound"
    if event is EventType.Execute and obj in FILE_ATTRS:
        return "block-exec"
    if event is EventType.Write and obj in FILE_ATTRS:
        return "block-write"
    if event is EventType.ForkClone:
        return "block-spawn"
    return None


def dispatch(afg: AttackGraph, decay: timedelta = DEFAULT_DECAY) -> list[ReinforcementRule]:
    """One rule per forecast edge with a mapped action, in edge seq order."""
    rules = []
    for e in afg.edges:
        if not e.forecast:
            continue
        trig = (afg.attr(e.src), e.event, afg.attr(e.dst))
        action = rule_action(*trig)
        if action is None:
            logger.info("no response action for %s -%s-> %s", trig[0].value, e.event.value,
                        trig[2].value)
            continue
        rules.append(ReinforcementRule(trig, action, decay, e.seq))
    return rules
