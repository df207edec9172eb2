import functools

import pytest
from hypothesis import assume, given, strategies as st

from attackcast.asg import (AnnotatedSentence, AsgError, CorefConfig, EntityRef, EntitySpan,
                            Token, Triple, assemble_graph, build_asg, check_sentence,
                            coref_classes, coref_similarity, disambiguate_read_execute,
                            entity_keys, extract_triples, format_sentences, levenshtein,
                            load_lexicon, merge_coreferent, name_similarity, parse_lexicon,
                            parse_sentences)
from attackcast.graph import EntityAttr, EventType, validate_edge

LEX = load_lexicon()
P, F2, F3, S = EntityAttr.P, EntityAttr.F2, EntityAttr.F3, EntityAttr.S


def sentence(index, words, spans):
    """words: (text, pos, head 1-based, rel); spans: (start 1-based, end, name, class)."""
    toks = tuple(Token(t, p, h - 1, r) for t, p, h, r in words)
    sps = tuple(EntitySpan(a - 1, b, n, c) for a, b, n, c in spans)
    return AnnotatedSentence(index, toks, sps)


def active(index, subj, verb, obj, subj_cls, obj_cls):
    return sentence(index, [(subj, "NOUN", 2, "nsubj"), (verb, "VERB", 0, "root"),
                            (obj, "NOUN", 2, "obj")],
                    [(1, 1, subj, subj_cls), (3, 3, obj, obj_cls)])


def passive(index, obj, verb, subj, obj_cls, subj_cls):
    return sentence(index, [(obj, "NOUN", 3, "nsubj:pass"), ("was", "AUX", 3, "aux:pass"),
                            (verb, "VERB", 0, "root"), ("by", "ADP", 5, "case"),
                            (subj, "NOUN", 3, "obl:agent")],
                    [(1, 1, obj, obj_cls), (5, 5, subj, subj_cls)])


def test_extract_active_write():
    s = sentence(0, [("firefox", "NOUN", 2, "nsubj"), ("wrote", "VERB", 0, "root"),
                     ("the", "DET", 5, "det"), ("file", "NOUN", 5, "compound"),
                     ("dropper.exe", "NOUN", 2, "obj")],
                 [(1, 1, "firefox", "Process"), (5, 5, "dropper.exe", "File")])
    (t,) = extract_triples([s], LEX)
    assert t == Triple(EntityRef("firefox", P, 0), "wrote", EntityRef("dropper.exe", F2, 0),
                       EventType.Write)


def test_extract_passive_swaps_roles():
    s = sentence(0, [("the", "DET", 2, "det"), ("payload", "NOUN", 4, "nsubj:pass"),
                     ("was", "AUX", 4, "aux:pass"), ("downloaded", "VERB", 0, "root"),
                     ("by", "ADP", 7, "case"), ("the", "DET", 7, "det"),
                     ("implant", "NOUN", 4, "obl:agent")],
                 [(2, 2, "payload", "File"), (7, 7, "implant", "Process")])
    (t,) = extract_triples([s], LEX)
    assert (t.subject.name, t.subject.attr) == ("implant", P)
    assert t.object.name == "payload" and t.object.attr.is_file
    assert t.event is EventType.Write and t.verb == "downloaded"


def test_file_file_pair_discarded():
    s = active(0, "passwd", "copied", "config.ini", "File", "File")
    assert extract_triples([s], LEX) == []


def test_read_flows_file_to_process():
    (t,) = extract_triples([active(0, "implant", "parses", "config.ini", "Process", "File")], LEX)
    assert t.event is EventType.Read
    assert t.subject.name == "config.ini" and t.object.name == "implant"


def test_receive_flows_socket_to_process():
    s = sentence(0, [("implant", "NOUN", 2, "nsubj"), ("received", "VERB", 0, "root"),
                     ("commands", "NOUN", 2, "obj"), ("from", "ADP", 5, "case"),
                     ("evil.com", "NOUN", 2, "obl")],
                 [(1, 1, "implant", "Process"), (5, 5, "evil.com", "Socket")])
    (t,) = extract_triples([s], LEX)
    assert (t.subject.attr, t.event, t.object.attr) == (S, EventType.Receive, P)


def test_no_connecting_verb_discarded():
    s = sentence(0, [("implant", "NOUN", 0, "root"), ("and", "CCONJ", 3, "cc"),
                     ("evil.exe", "NOUN", 1, "conj")],
                 [(1, 1, "implant", "Process"), (3, 3, "evil.exe", "File")])
    assert extract_triples([s], LEX) == []


def test_malformed_tree_skipped():
    bad = sentence(0, [("a", "NOUN", 2, "nsubj"), ("b", "VERB", 1, "root")],
                   [(1, 1, "a", "Process")])
    assert check_sentence(bad) is not None
    good = active(1, "implant", "launches", "evil.exe", "Process", "File")
    diags = []
    out = extract_triples([bad, good], LEX, diags)
    assert len(out) == 1 and diags and "sentence 0" in diags[0]


def test_overlapping_spans_rejected():
    s = sentence(0, [("a", "NOUN", 0, "root")], [(1, 1, "a", "Process"), (1, 1, "a", "File")])
    assert "overlap" in check_sentence(s)


@pytest.mark.parametrize("verb,event", [
    ("launches", EventType.Execute), ("parses", EventType.Read), ("frobnicates", EventType.Read),
    ("executed", EventType.Execute), ("running", EventType.Execute), ("dumps", EventType.Read),
])
def test_disambiguate(verb, event):
    assert disambiguate_read_execute(verb, LEX) is event


def test_lexicon_parse():
    lex = parse_lexicon("drop\tWrite\n[read-execute]\nrun\tExecute\n")
    assert lex.events == {"drop": EventType.Write}
    assert lex.lemma("dropped") == "drop" and lex.lemma("ran") == "run"
    with pytest.raises(AsgError):
        parse_lexicon("[read-execute]\nsend\tSend\n")
    with pytest.raises(AsgError):
        parse_lexicon("drop\tSmash\n")


# -- co-reference -------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def lev_oracle(a, b):
    if not a or not b:
        return len(a) + len(b)
    return min(lev_oracle(a[1:], b) + 1, lev_oracle(a, b[1:]) + 1,
               lev_oracle(a[1:], b[1:]) + (a[0] != b[0]))


@given(st.text("abcx.", max_size=7), st.text("abcx.", max_size=7))
def test_levenshtein_oracle(a, b):
    assert levenshtein(a, b) == lev_oracle(a, b)


def test_coref_examples():
    cfg = CorefConfig()
    n = EntityRef("dropper.exe", F2, 3)
    assert coref_similarity(n, n, cfg) == 1.0
    assert coref_similarity(n, EntityRef("dropper.exe", F2, 7), cfg) == pytest.approx(1 - 4 / 10)
    # svchost.exe -> svchosts.exe is one insertion over 12 characters
    got = coref_similarity(EntityRef("svchost.exe", P, 0), EntityRef("svchosts.exe", P, 1), cfg)
    assert got == pytest.approx(11 / 12 - 1 / 10)
    cross = coref_similarity(EntityRef("x.exe", F2, 0), EntityRef("x.exe", F3, 0), cfg)
    assert cross == pytest.approx(1 - 1 / 2)


def test_coref_config_validation():
    with pytest.raises(ValueError):
        CorefConfig(w_d=0)
    with pytest.raises(ValueError):
        CorefConfig(threshold=1.5)


names = st.sampled_from(["svchost.exe", "svchosts.exe", "svch0st.exe", "evil.exe", "evil2.exe",
                         "dropper.exe", "a.dll"])


@given(names, names, st.integers(0, 5), st.integers(0, 5))
def test_coref_symmetric(a, b, i, j):
    x, y = EntityRef(a, F2, i), EntityRef(b, F2, j)
    assert coref_similarity(x, y) == coref_similarity(y, x)
    assert name_similarity(a, a) == 1.0


def T(s, o, ev="Write", sa=P, oa=F2):
    return Triple(EntityRef(s, sa, 0), ev.lower(), EntityRef(o, oa, 0), EventType(ev))


def test_merge_exact_names():
    out = merge_coreferent([T("m", "dropper.exe"), T("n", "dropper.exe", "Execute")])
    assert len({k for k in entity_keys(out) if k[0] == "dropper.exe"}) == 1


def test_merge_below_threshold_kept():
    out = merge_coreferent([T("the malware", "a.exe"), T("svchost.exe", "a.exe")])
    assert {"the malware", "svchost.exe"} <= {k[0] for k in entity_keys(out)}


def test_merge_chain_to_earliest():
    # a~b and b~c but a and c too far apart to merge directly
    ts = [T("p", "abcdefgh.exe"), T("p", "abcdefgX.exe"), T("p", "abcdefXX.exe")]
    cfg = CorefConfig(w_d=100, threshold=0.88)
    a, b, c = (EntityRef(n, F2, 0) for n in ("abcdefgh.exe", "abcdefgX.exe", "abcdefXX.exe"))
    assert coref_similarity(a, b, cfg) > 0.88 and coref_similarity(b, c, cfg) > 0.88
    assert coref_similarity(a, c, cfg) < 0.88
    out = merge_coreferent(ts, cfg)
    assert {t.object.name for t in out} == {"abcdefgh.exe"}


def union_oracle(triples, cfg):
    """Components of the 'some earlier occurrence is similar' relation, by BFS."""
    occ = []
    for k, t in enumerate(triples):
        occ += [EntityRef(t.subject.name, t.subject.attr, k),
                EntityRef(t.object.name, t.object.attr, k)]
    keys = list(dict.fromkeys((r.name, r.attr) for r in occ))
    coarse = lambda a: "F" if a.is_file else a.value
    adj = {k: set() for k in keys}
    for p, r in enumerate(occ):
        for q in occ[:p]:
            if coarse(q.attr) == coarse(r.attr) and (
                    (q.name, q.attr) == (r.name, r.attr) or coref_similarity(r, q, cfg) > cfg.threshold):
                adj[(r.name, r.attr)].add((q.name, q.attr))
                adj[(q.name, q.attr)].add((r.name, r.attr))
    rep = {}
    for k in keys:
        seen, todo = {k}, [k]
        while todo:
            for nb in adj[todo.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        rep[k] = min(seen, key=keys.index)
    return rep


triple_st = st.builds(lambda s, o, ev: T(s, o, ev), st.sampled_from(["proc", "proc1", "prac"]),
                      names, st.sampled_from(["Write", "Execute"]))


@given(st.lists(triple_st, max_size=8), st.floats(0.5, 0.95))
def test_coref_classes_match_oracle(triples, thr):
    cfg = CorefConfig(threshold=thr)
    assert coref_classes(triples, cfg) == union_oracle(triples, cfg)


@given(st.lists(triple_st, max_size=8))
def test_merge_idempotent(triples):
    once = merge_coreferent(triples)
    assert merge_coreferent(once) == once
    assert len(once) == len(triples)


# -- assembly -----------------------------------------------------------------

def chain_triples(n):
    out = [T("p0", "f0.exe")]
    for k in range(1, n):
        out.append(T(f"p{k - 1}", f"p{k}", "ForkClone", P, P))
    return out


def test_assemble_min_nodes():
    assert assemble_graph([]) is None
    four = [T("p", "a.exe"), T("p", "b.exe"), T("p", "c.exe")]
    assert assemble_graph(four, min_nodes=5) is None
    assert len(assemble_graph(four, min_nodes=4).nodes) == 4


def test_assemble_six_triples():
    ts = [T("p", "a.exe"), T("p", "q", "ForkClone", P, P), T("q", "b.exe"),
          T("c.dll", "q", "Read", F3, P), T("q", "1.2.3.4", "Send", P, S),
          T("q", "d.exe", "Execute")]
    ts[3] = Triple(EntityRef("c.dll", EntityAttr.F1, 0), "loads", EntityRef("q", P, 0),
                   EventType.Read)
    g = assemble_graph(ts)
    assert len(g.nodes) == 7 and len(g.edges) == 6
    assert [e.event for e in g.edges] == [t.event for t in ts]


def test_assemble_drops_self_loops_and_backward_forks():
    ts = [T("p", "q", "ForkClone", P, P), T("q", "q", "ForkClone", P, P),
          T("q", "p", "ForkClone", P, P), T("q", "a.exe"), T("q", "b.exe"), T("q", "c.exe")]
    diags = []
    g = assemble_graph(ts, 5, diags)
    assert len(g.edges) == 4 and len(diags) == 2


@given(st.lists(triple_st, min_size=1, max_size=10))
def test_assemble_counts(triples):
    assume(all(t.subject.name != t.object.name for t in triples))
    g = assemble_graph(triples, min_nodes=1)
    assert len(g.nodes) == len(entity_keys(triples)) and len(g.edges) == len(triples)
    assert all(validate_edge(g.attr(e.src), e.event, g.attr(e.dst)) for e in g.edges)


# -- generated sentences ---------------------------------------------------------

VERBS = ["wrote", "launches", "parses", "sends", "received", "spawned", "downloaded",
         "frobnicates", "connects", "injected", "dropped"]
ENT = st.sampled_from([("implant", "Process"), ("cmd.exe", "Process"), ("evil.exe", "File"),
                       ("/etc/passwd", "File"), ("k.dll", "File"), ("8.8.8.8", "Socket"),
                       ("c2.example.com", "Socket"), ("HKLM\\Run", "File")])


@given(st.lists(st.tuples(ENT, ENT, st.sampled_from(VERBS), st.booleans()), max_size=12))
def test_extracted_triples_always_valid(specs):
    sents = []
    for k, ((a, ca), (b, cb), verb, pas) in enumerate(specs):
        sents.append(passive(k, b, verb, a, cb, ca) if pas else active(k, a, verb, b, ca, cb))
    for t in extract_triples(sents, LEX):
        assert validate_edge(t.subject.attr, t.event, t.object.attr)


def test_sentence_file_round_trip(tmp_path):
    sents = [active(0, "implant", "launches", "evil.exe", "Process", "File"),
             passive(1, "payload", "downloaded", "implant", "File", "Process")]
    text = format_sentences(sents)
    assert parse_sentences(text) == sents
    with pytest.raises(AsgError):
        parse_sentences("2\tx\tNOUN\t0\troot\n")


def test_build_asg_pipeline():
    sents = [active(0, "implant", "launches", "evil.exe", "Process", "File"),
             active(1, "implant", "sends", "8.8.8.8", "Process", "Socket"),
             active(2, "implant", "spawned", "cmd", "Process", "Process"),
             active(3, "impl4nt", "parses", "/etc/passwd", "Process", "File"),
             active(4, "cmd", "wrote", "out.txt", "Process", "File")]
    g = build_asg(sents)
    # impl4nt co-refers with implant: 6/7 similar, one triple apart, 0.757 > 0.75
    assert g is not None and len(g.nodes) == 6 and len(g.edges) == 5
    assert "impl4nt" not in g.node_map
