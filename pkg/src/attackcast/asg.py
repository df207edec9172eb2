"""Attack scene graphs from pre-annotated threat-report sentences.

Input is a dependency-parsed report (see :func:`parse_sentences` for the
file format) with entity spans already marked.  The builder pairs entities,
resolves direction from the dependency tree, maps the connecting verb to an
event, unifies co-referent entities and assembles an :class:`AttackGraph`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .graph import (FILE_ATTRS, AttackGraph, EntityAttr, EventType, Role, admissible_events,
                    classify_file, validate_edge)

logger = logging.getLogger(__name__)

ENTITY_CLASSES = ("File", "Process", "Socket")

SUBJ_RELS = frozenset({"nsubj", "csubj"})
PASS_SUBJ_RELS = frozenset({"nsubj:pass", "nsubjpass", "csubj:pass", "csubjpass"})
OBJ_RELS = frozenset({"obj", "dobj", "iobj", "obl", "prep", "dative", "pobj"})
AGENT_RELS = frozenset({"agent", "obl:agent"})
PASS_MARK_RELS = PASS_SUBJ_RELS | {"aux:pass", "auxpass"}


class AsgError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    text: str
    pos: str
    head: int  # 0-based index of the head token, -1 for the root
    rel: str


@dataclass(frozen=True)
class EntitySpan:
    start: int  # token range, half-open
    end: int
    name: str
    cls: str  # File, Process or Socket

    def __post_init__(self):
        if self.cls not in ENTITY_CLASSES:
            raise AsgError(f"entity class must be one of {ENTITY_CLASSES}, got {self.cls!r}")
        if not 0 <= self.start < self.end:
            raise AsgError(f"bad token range {self.start}..{self.end}")

    @property
    def attr(self) -> EntityAttr:
        if self.cls == "Process":
            return EntityAttr.P
        if self.cls == "Socket":
            return EntityAttr.S
        return classify_file(self.name)


@dataclass(frozen=True)
class AnnotatedSentence:
    index: int
    tokens: tuple[Token, ...]
    entity_spans: tuple[EntitySpan, ...] = ()

    @property
    def text(self) -> str:
        return " ".join(t.text for t in self.tokens)


@dataclass(frozen=True)
class EntityRef:
    name: str
    attr: EntityAttr
    index: int


@dataclass(frozen=True)
class Triple:
    subject: EntityRef
    verb: str
    object: EntityRef
    event: EventType

    def __post_init__(self):
        if not validate_edge(self.subject.attr, self.event, self.object.attr):
            raise AsgError(f"{self.subject.attr.value} -{self.event.value}-> "
                           f"{self.object.attr.value} violates event rules")


@dataclass(frozen=True)
class CorefConfig:
    w_d: float = 10.0
    w_t: float = 2.0
    threshold: float = 0.75

    def __post_init__(self):
        if self.w_d <= 0 or self.w_t <= 0:
            raise ValueError("w_d and w_t must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


# --------------------------------------------------------------------------
# verb lexicon

@dataclass(frozen=True)
class VerbLexicon:
    """Verb lemma to event map plus a two-class Read/Execute section."""

    events: dict[str, EventType] = field(default_factory=dict)
    read_execute: dict[str, EventType] = field(default_factory=dict)

    def __post_init__(self):
        bad = {v for v in self.read_execute.values() if v not in (EventType.Read, EventType.Execute)}
        if bad:
            raise AsgError("the read-execute section may only hold Read or Execute")

    def lemma(self, verb: str) -> str:
        """First inflection-stripped candidate the lexicon knows, else the lowered verb."""
        for cand in lemma_candidates(verb):
            if cand in self.events or cand in self.read_execute:
                return cand
        return verb.lower()


IRREGULAR = {
    "wrote": "write", "written": "write", "ran": "run", "sent": "send", "stole": "steal",
    "stolen": "steal", "began": "begin", "begun": "begin", "hid": "hide", "hidden": "hide",
    "took": "take", "taken": "take", "got": "get", "gotten": "get", "made": "make",
    "brought": "bring", "built": "build", "found": "find", "sought": "seek", "left": "leave",
    "overwrote": "overwrite", "overwritten": "overwrite", "undertook": "undertake",
}


def lemma_candidates(verb: str) -> list[str]:
    w = verb.lower().strip()
    out = [w]
    if w in IRREGULAR:
        out.append(IRREGULAR[w])

    def add(stem: str, *more: str):
        for s in (stem, *more):
            if s and s not in out:
                out.append(s)

    if w.endswith("ies") or w.endswith("ied"):
        add(w[:-3] + "y")
    if w.endswith("ing"):
        stem = w[:-3]
        add(stem, stem + "e", stem[:-1] if len(stem) > 2 and stem[-1] == stem[-2] else "")
    if w.endswith("ed"):
        stem = w[:-2]
        add(stem, w[:-1], stem[:-1] if len(stem) > 2 and stem[-1] == stem[-2] else "")
    if w.endswith("es"):
        add(w[:-2], w[:-1])
    elif w.endswith("s"):
        add(w[:-1])
    return out


def parse_lexicon(text: str) -> VerbLexicon:
    events: dict[str, EventType] = {}
    rx: dict[str, EventType] = {}
    target = events
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[read-execute]":
            target = rx
            continue
        parts = line.split()
        if len(parts) != 2:
            raise AsgError(f"lexicon line {lineno}: expected 'lemma<TAB>event'")
        try:
            target[parts[0].lower()] = EventType(parts[1])
        except ValueError as exc:
            raise AsgError(f"lexicon line {lineno}: unknown event {parts[1]!r}") from exc
    return VerbLexicon(events, rx)


def load_lexicon(path: str | Path | None = None) -> VerbLexicon:
    if path is None:
        return parse_lexicon((resources.files("attackcast") / "data" / "verbs.tsv").read_text())
    return parse_lexicon(Path(path).read_text())


def disambiguate_read_execute(verb: str, lexicon: VerbLexicon) -> EventType:
    """Read or Execute for a file/process pair; unknown verbs read."""
    return lexicon.read_execute.get(lexicon.lemma(verb), EventType.Read)


# --------------------------------------------------------------------------
# annotated sentence files

def parse_sentences(text: str) -> list[AnnotatedSentence]:
    """Parse a report in the annotated-sentence format.

    Sentences are separated by blank lines.  Token lines are
    ``id<TAB>text<TAB>pos<TAB>head<TAB>rel`` with 1-based ids and head 0 for
    the root.  Span lines are ``@span<TAB>start-end<TAB>name<TAB>class`` with
    an inclusive 1-based token range.  ``#`` lines are comments.
    """
    out: list[AnnotatedSentence] = []
    tokens: list[Token] = []
    spans: list[EntitySpan] = []

    def flush():
        if tokens:
            out.append(AnnotatedSentence(len(out), tuple(tokens), tuple(spans)))
        tokens.clear()
        spans.clear()

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip():
            flush()
            continue
        if line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        try:
            if cols[0] == "@span":
                lo, hi = cols[1].split("-")
                spans.append(EntitySpan(int(lo) - 1, int(hi), cols[2], cols[3]))
            else:
                if int(cols[0]) != len(tokens) + 1:
                    raise AsgError("token ids must run 1, 2, 3, ...")
                tokens.append(Token(cols[1], cols[2], int(cols[3]) - 1, cols[4]))
        except (IndexError, ValueError) as exc:
            raise AsgError(f"line {lineno}: {exc}") from exc
    flush()
    return out


def load_sentences(path: str | Path) -> list[AnnotatedSentence]:
    return parse_sentences(Path(path).read_text())


def format_sentences(sentences: Sequence[AnnotatedSentence]) -> str:
    blocks = []
    for s in sentences:
        lines = [f"{i + 1}\t{t.text}\t{t.pos}\t{t.head + 1}\t{t.rel}" for i, t in enumerate(s.tokens)]
        lines += [f"@span\t{sp.start + 1}-{sp.end}\t{sp.name}\t{sp.cls}" for sp in s.entity_spans]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


# --------------------------------------------------------------------------
# triple extraction

def check_sentence(s: AnnotatedSentence) -> str | None:
    """Reason the sentence is malformed, or None."""
    n = len(s.tokens)
    roots = [i for i, t in enumerate(s.tokens) if t.head == -1]
    if len(roots) != 1:
        return f"expected one root, found {len(roots)}"
    for i, t in enumerate(s.tokens):
        if not -1 <= t.head < n or t.head == i:
            return f"token {i + 1} has head {t.head + 1} out of range"
    for i in range(n):
        seen, j = set(), i
        while j != -1:
            if j in seen:
                return f"dependency cycle through token {j + 1}"
            seen.add(j)
            j = s.tokens[j].head
    taken: set[int] = set()
    for sp in s.entity_spans:
        if sp.end > n:
            return f"span {sp.name!r} runs past the sentence"
        cover = set(range(sp.start, sp.end))
        if cover & taken:
            return f"span {sp.name!r} overlaps another span"
        taken |= cover
    return None


def _span_head(s: AnnotatedSentence, sp: EntitySpan) -> int:
    inside = range(sp.start, sp.end)
    heads = [i for i in inside if s.tokens[i].head not in inside]
    return heads[0]


def _governor(s: AnnotatedSentence, tok: int) -> tuple[int, int] | None:
    """(nearest verb ancestor, its child on the path from ``tok``)."""
    child, j = tok, s.tokens[tok].head
    while j != -1:
        if s.tokens[j].pos.upper() in ("VERB", "AUX") or s.tokens[j].pos.upper().startswith("VB"):
            return j, child
        child, j = j, s.tokens[j].head
    return None


def _is_passive(s: AnnotatedSentence, verb: int) -> bool:
    return any(t.head == verb and t.rel.lower() in PASS_MARK_RELS for t in s.tokens)


def _role(s: AnnotatedSentence, verb: int, child: int) -> str | None:
    """'subj' or 'obj' for the entity reached through ``child`` of ``verb``."""
    rel = s.tokens[child].rel.lower()
    passive = _is_passive(s, verb)
    if rel in SUBJ_RELS:
        return "subj"
    if rel in PASS_SUBJ_RELS:
        return "obj"
    if rel in AGENT_RELS:
        return "subj"
    if passive and rel in ("obl", "prep"):
        by = s.tokens[child].text.lower() == "by" or any(
            t.head == child and t.rel.lower() == "case" and t.text.lower() == "by"
            for t in s.tokens)
        if by:
            return "subj"
    if rel in OBJ_RELS:
        return "obj"
    return None


def _is_file_proc(a: EntityAttr, b: EntityAttr) -> bool:
    return (a is EntityAttr.P and b in FILE_ATTRS) or (b is EntityAttr.P and a in FILE_ATTRS)


def choose_event(verb: str, a: EntityAttr, b: EntityAttr, lexicon: VerbLexicon) -> EventType | None:
    """Event for a verb connecting attrs ``a`` and ``b`` (either direction)."""
    lemma = lexicon.lemma(verb)
    fits = lambda ev: validate_edge(a, ev, b) or validate_edge(b, ev, a)
    ev = lexicon.events.get(lemma)
    if ev is not None and fits(ev):
        return ev
    if _is_file_proc(a, b):
        return disambiguate_read_execute(verb, lexicon)
    return None


def extract_triples(sentences: Sequence[AnnotatedSentence], lexicon: VerbLexicon,
                    diagnostics: list[str] | None = None) -> list[Triple]:
    """Entity-pair triples in sentence order, then span order within a sentence."""
    diags = diagnostics if diagnostics is not None else []
    out: list[Triple] = []
    for s in sentences:
        problem = check_sentence(s)
        if problem:
            msg = f"sentence {s.index}: {problem}; skipped"
            diags.append(msg)
            logger.warning(msg)
            continue
        spans = list(s.entity_spans)
        for i in range(len(spans)):
            for j in range(i + 1, len(spans)):
                t = _pair_triple(s, spans[i], spans[j], lexicon)
                if t is not None:
                    out.append(t)
    return out


def _pair_triple(s: AnnotatedSentence, x: EntitySpan, y: EntitySpan,
                 lexicon: VerbLexicon) -> Triple | None:
    ax, ay = x.attr, y.attr
    if not admissible_events(ax, ay) and not admissible_events(ay, ax):
        return None
    gx, gy = _governor(s, _span_head(s, x)), _governor(s, _span_head(s, y))
    if gx is None or gy is None or gx[0] != gy[0]:
        return None
    verb = gx[0]
    rx, ry = _role(s, verb, gx[1]), _role(s, verb, gy[1])
    if {rx, ry} != {"subj", "obj"}:
        return None
    subj, obj = (x, y) if rx == "subj" else (y, x)
    word = s.tokens[verb].text
    ev = choose_event(word, subj.attr, obj.attr, lexicon)
    if ev is None:
        return None
    a = EntityRef(subj.name, subj.attr, s.index)
    b = EntityRef(obj.name, obj.attr, s.index)
    if validate_edge(a.attr, ev, b.attr):
        return Triple(a, word, b, ev)
    if validate_edge(b.attr, ev, a.attr):
        # flow direction opposes grammar (e.g. a process reads a file)
        return Triple(b, word, a, ev)
    return None


# --------------------------------------------------------------------------
# co-reference

def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def name_similarity(a: str, b: str) -> float:
    a, b = a.lower(), b.lower()
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def coref_similarity(n: EntityRef, m: EntityRef, cfg: CorefConfig = CorefConfig()) -> float:
    type_dist = 0.0 if n.attr is m.attr else 1.0
    return (name_similarity(n.name, m.name) - abs(n.index - m.index) / cfg.w_d
            - type_dist / cfg.w_t)


def _coarse(attr: EntityAttr) -> str:
    return "F" if attr in FILE_ATTRS else attr.value


def _occurrences(triples: Sequence[Triple]) -> list[EntityRef]:
    # index is the triple position, so adjacent triples sit one apart
    occ = []
    for k, t in enumerate(triples):
        occ.append(EntityRef(t.subject.name, t.subject.attr, k))
        occ.append(EntityRef(t.object.name, t.object.attr, k))
    return occ


def coref_classes(triples: Sequence[Triple], cfg: CorefConfig = CorefConfig()
                  ) -> dict[tuple[str, EntityAttr], tuple[str, EntityAttr]]:
    """One pass: entity key -> representative key (earliest member)."""
    occ = _occurrences(triples)
    first: dict[tuple[str, EntityAttr], int] = {}
    for pos, r in enumerate(occ):
        first.setdefault((r.name, r.attr), pos)
    parent = {k: k for k in first}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            # earliest first occurrence represents the class
            if first[ra] <= first[rb]:
                parent[rb] = ra
            else:
                parent[ra] = rb

    for pos, r in enumerate(occ):
        for q in occ[:pos]:
            if _coarse(q.attr) != _coarse(r.attr):
                continue
            if (q.name, q.attr) == (r.name, r.attr) or coref_similarity(r, q, cfg) > cfg.threshold:
                union((r.name, r.attr), (q.name, q.attr))
    return {k: find(k) for k in first}


def merge_coreferent(triples: Sequence[Triple], cfg: CorefConfig = CorefConfig()) -> list[Triple]:
    """Rename co-referent entities to their earliest representative.

    Passes repeat until nothing changes, so the result is a fixed point and
    applying the function again is a no-op.
    """
    cur = list(triples)
    while True:
        rep = coref_classes(cur, cfg)
        if all(k == v for k, v in rep.items()):
            return cur
        nxt = []
        for t in cur:
            sn, sa = rep[(t.subject.name, t.subject.attr)]
            on, oa = rep[(t.object.name, t.object.attr)]
            nxt.append(Triple(EntityRef(sn, sa, t.subject.index), t.verb,
                              EntityRef(on, oa, t.object.index), t.event))
        cur = nxt


def entity_keys(triples: Iterable[Triple]) -> list[tuple[str, EntityAttr]]:
    seen: dict[tuple[str, EntityAttr], None] = {}
    for t in triples:
        seen.setdefault((t.subject.name, t.subject.attr))
        seen.setdefault((t.object.name, t.object.attr))
    return list(seen)


# --------------------------------------------------------------------------
# assembly

def assemble_graph(triples: Sequence[Triple], min_nodes: int = 5,
                   diagnostics: list[str] | None = None, provenance: str = "") -> AttackGraph | None:
    """Graph over unified entities with one edge per triple, in triple order.

    Self-loops and forks whose child would precede its parent are dropped
    with a diagnostic.  Returns None below ``min_nodes`` nodes.
    """
    diags = diagnostics if diagnostics is not None else []
    keys = entity_keys(triples)
    names = [k[0] for k in keys]
    ids = {k: (k[0] if names.count(k[0]) == 1 else f"{k[0]}#{k[1].value}") for k in keys}
    attrs = {ids[k]: k[1] for k in keys}
    labels = {ids[k]: k[0] for k in keys}
    order: dict[str, int] = {}
    events = []
    for k, t in enumerate(triples):
        src = ids[(t.subject.name, t.subject.attr)]
        dst = ids[(t.object.name, t.object.attr)]
        if src == dst:
            diags.append(f"triple {k}: self-loop on {src!r} dropped")
            continue
        if t.event is EventType.ForkClone and dst in order and (src not in order or order[dst] < order[src]):
            diags.append(f"triple {k}: fork of earlier process {dst!r} dropped")
            continue
        for nid in (src, dst):
            order.setdefault(nid, len(order))
        events.append((src, dst, t.event))
    if len(attrs) < min_nodes:
        return None
    return AttackGraph.from_events(attrs, events, role=Role.ASG, labels=labels,
                                   provenance=provenance)


def build_asg(sentences: Sequence[AnnotatedSentence], lexicon: VerbLexicon | None = None,
              cfg: CorefConfig = CorefConfig(), min_nodes: int = 5,
              diagnostics: list[str] | None = None, provenance: str = "") -> AttackGraph | None:
    lexicon = lexicon or load_lexicon()
    triples = merge_coreferent(extract_triples(sentences, lexicon, diagnostics), cfg)
    return assemble_graph(triples, min_nodes, diagnostics, provenance)
