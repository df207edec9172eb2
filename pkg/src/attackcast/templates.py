"""Technique templates and template-composed synthetic corpora."""
from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .graph import (AttackGraph, EntityAttr, EventType, GraphError, Role, graph_from_dict,
                    graph_to_dict, load_graph, orient_edge, save_graph)

logger = logging.getLogger(__name__)


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class AtgTemplate:
    technique_id: str
    tactic: str
    description: str
    graph: AttackGraph

    def __post_init__(self):
        if len(self.graph.nodes) < 2 or not self.graph.edges:
            raise TemplateError(f"{self.technique_id}: a template needs >= 2 nodes and >= 1 edge")
        if self.graph.role is not Role.ATG:
            object.__setattr__(self, "graph", self.graph.with_role(Role.ATG))


def bundled_template_dir() -> Path:
    return Path(str(resources.files("attackcast") / "data" / "templates"))


def template_from_dict(d: dict) -> AtgTemplate:
    for key in ("technique_id", "tactic", "nodes", "edges"):
        if key not in d:
            raise TemplateError(f"missing field {key!r}")
    g = graph_from_dict({"role": "ATG", "nodes": d["nodes"], "edges": d["edges"],
                         "provenance": d.get("provenance", "")})
    return AtgTemplate(str(d["technique_id"]), str(d["tactic"]), str(d.get("description", "")), g)


def template_to_dict(t: AtgTemplate) -> dict:
    g = graph_to_dict(t.graph)
    return {"technique_id": t.technique_id, "tactic": t.tactic, "description": t.description,
            "nodes": g["nodes"], "edges": g["edges"]}


def load_templates(path: str | Path | None = None,
                   diagnostics: list[str] | None = None) -> list[AtgTemplate]:
    """Load every ``*.json`` template in ``path`` (the bundled set by default).

    Malformed files are skipped with a diagnostic; the result is sorted by
    technique id.  Raises :class:`TemplateError` when nothing valid loads.
    """
    root = Path(path) if path is not None else bundled_template_dir()
    diags = diagnostics if diagnostics is not None else []
    out = []
    for f in sorted(root.glob("*.json")):
        try:
            out.append(template_from_dict(json.loads(f.read_text())))
        except (ValueError, KeyError, TypeError) as exc:
            msg = f"{f.name}: {exc}"
            diags.append(msg)
            logger.warning("skipping template %s", msg)
    if not out:
        raise TemplateError(f"no valid templates under {root}")
    out.sort(key=lambda t: t.technique_id)
    ids = [t.technique_id for t in out]
    if len(set(ids)) != len(ids):
        raise TemplateError("duplicate technique ids")
    return out


def template_stats(templates: Sequence[AtgTemplate]) -> dict:
    if not templates:
        raise TemplateError("template_stats needs at least one template")
    attrs: Counter = Counter()
    events: Counter = Counter()
    for t in templates:
        attrs.update(n.attr.value for n in t.graph.nodes)
        events.update(e.event.value for e in t.graph.edges)
    n = len(templates)
    return {
        "templates": n,
        "tactics": sorted({t.tactic for t in templates}),
        "nodes_per_attr": {a.value: attrs.get(a.value, 0) for a in EntityAttr},
        "edges_per_event": {e.value: events.get(e.value, 0) for e in EventType},
        "mean_nodes": sum(attrs.values()) / n,
        "mean_edges": sum(events.values()) / n,
    }


# --------------------------------------------------------------------------
# corpus synthesis

SPLICE_RULES = ("share-root-process", "sequential-taint")


@dataclass(frozen=True)
class CorpusSpec:
    """How to compose templates into synthetic scene graphs.

    ``tail_noise`` adds that many (inclusive range) unrelated nodes after the
    last technique instance, each attached to a recent node.
    """

    chain_length_range: tuple[int, int] = (2, 3)
    splice_rule: str = "sequential-taint"
    count: int = 20
    seed: int = 0
    tail_noise: tuple[int, int] = (0, 0)
    max_retries: int = 100

    def __post_init__(self):
        lo, hi = self.chain_length_range
        if self.count <= 0:
            raise ValueError("count must be > 0")
        if not 1 <= lo <= hi:
            raise ValueError("chain_length_range must be a non-empty range of positive lengths")
        if not 0 <= self.tail_noise[0] <= self.tail_noise[1]:
            raise ValueError("tail_noise must be a non-empty range of non-negative counts")
        if self.splice_rule not in SPLICE_RULES:
            raise ValueError(f"splice_rule must be one of {SPLICE_RULES}")


@dataclass
class SynthGraph:
    graph: AttackGraph
    techniques: list[str] = field(default_factory=list)


class _Builder:
    """Accumulates chronological events for one synthetic graph."""

    def __init__(self):
        self.attrs: dict[str, EntityAttr] = {}
        self.labels: dict[str, str] = {}
        self.events: list[tuple[str, str, EventType]] = []

    def add_instance(self, t: AtgTemplate, prefix: str, merge: dict[str, str] | None = None,
                     lead: list[tuple[str, str, EventType]] | None = None) -> dict[str, str]:
        merge = merge or {}
        ids = {n.id: merge.get(n.id, f"{prefix}{n.id}") for n in t.graph.nodes}
        for n in t.graph.nodes:
            if n.id not in merge:
                self.attrs[ids[n.id]] = n.attr
                self.labels[ids[n.id]] = n.label
        fresh = [(s, ids[d] if d in ids else d, ev) for s, d, ev in (lead or [])]
        self.events.extend(fresh)
        self.events.extend((ids[e.src], ids[e.dst], e.event) for e in t.graph.edges)
        return ids

    def build(self, provenance: str) -> AttackGraph:
        return AttackGraph.from_events(self.attrs, self.events, labels=self.labels,
                                       provenance=provenance)

    def snapshot(self):
        return dict(self.attrs), dict(self.labels), list(self.events)

    def restore(self, snap):
        self.attrs, self.labels, self.events = dict(snap[0]), dict(snap[1]), list(snap[2])


def _sinks(t: AtgTemplate) -> list[str]:
    return [n.id for n in t.graph.nodes if t.graph.in_edges[n.id]]


def _sources(t: AtgTemplate, attr: EntityAttr) -> list[str]:
    return [n.id for n in t.graph.nodes if n.attr is attr and t.graph.out_edges[n.id]]


def _try_splice(b: _Builder, t: AtgTemplate, prefix: str, rule: str, last: dict | None,
                prev: AtgTemplate | None) -> dict | None:
    if rule == "share-root-process":
        entry = next(n.id for n in t.graph.nodes if n.attr is EntityAttr.P) \
            if any(n.attr is EntityAttr.P for n in t.graph.nodes) else None
        if entry is None:
            return None
        snap = b.snapshot()
        ids = b.add_instance(t, prefix, lead=[("root", entry, EventType.ForkClone)])
        try:
            b.build("")
        except GraphError:
            b.restore(snap)
            return None
        return ids
    if last is None:
        return b.add_instance(t, prefix)
    sink = max(_sinks(prev), key=lambda nid: prev.graph.node_map[nid].order_index)
    sink_attr = prev.graph.attr(sink)
    for entry in _sources(t, sink_attr):
        snap = b.snapshot()
        ids = b.add_instance(t, prefix, merge={entry: last[sink]})
        try:
            b.build("")
            return ids
        except GraphError:
            b.restore(snap)
    return None


def _add_noise(b: _Builder, rng: random.Random, count: int, reach: int = 4) -> None:
    g = b.build("")
    order = [n.id for n in g.nodes]
    kinds = list(EntityAttr)
    added = 0
    while added < count:
        attr = rng.choice(kinds)
        hosts = order[-reach:]
        old = rng.choice(hosts)
        evs = [ev for ev in EventType if orient_edge(b.attrs[old], attr, ev) is not None]
        if not evs:
            continue
        ev = rng.choice(evs)
        new = f"x{added}"
        b.attrs[new] = attr
        b.labels[new] = f"noise{added}"
        src, dst = (old, new) if orient_edge(b.attrs[old], attr, ev) else (new, old)
        b.events.append((src, dst, ev))
        order.append(new)
        added += 1


def synthesize_labeled(templates: Sequence[AtgTemplate], spec: CorpusSpec) -> list[SynthGraph]:
    """Compose template instances into graphs, keeping the technique chain."""
    if not templates:
        raise TemplateError("no templates to compose")
    rng = random.Random(spec.seed)
    out = []
    for idx in range(spec.count):
        length = rng.randint(*spec.chain_length_range)
        b = _Builder()
        if spec.splice_rule == "share-root-process":
            b.attrs["root"] = EntityAttr.P
            b.labels["root"] = "root"
        chain: list[str] = []
        last, prev = None, None
        for k in range(length):
            for _ in range(spec.max_retries):
                t = rng.choice(templates)
                ids = _try_splice(b, t, f"t{k}_", spec.splice_rule, last, prev)
                if ids is not None:
                    break
            else:
                raise TemplateError(f"graph {idx}: no compatible template after "
                                    f"{spec.max_retries} retries at chain position {k}")
            chain.append(t.technique_id)
            last, prev = ids, t
        noise = rng.randint(*spec.tail_noise)
        if noise:
            _add_noise(b, rng, noise)
        g = b.build(f"synthetic seed={spec.seed} index={idx} chain={'+'.join(chain)}")
        out.append(SynthGraph(g, chain))
    return out


def synthesize_corpus(templates: Sequence[AtgTemplate], spec: CorpusSpec) -> list[AttackGraph]:
    return [s.graph for s in synthesize_labeled(templates, spec)]


def write_corpus(directory: str | Path, corpus: Sequence[SynthGraph], spec: CorpusSpec) -> Path:
    """Write one graph file per graph plus ``manifest.json``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(corpus):
        name = f"g{i:04d}.json"
        save_graph(s.graph, root / name)
        entries.append({"file": name, "techniques": s.techniques})
    manifest = {"seed": spec.seed, "spec": asdict(spec), "graphs": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def load_corpus(directory: str | Path) -> list[AttackGraph]:
    """Graph files of a corpus directory in file-name order (manifest skipped)."""
    root = Path(directory)
    files = sorted(f for f in root.glob("*.json") if f.name != "manifest.json")
    if not files:
        raise FileNotFoundError(f"no graph files under {root}")
    return [load_graph(f) for f in files]
