from collections import Counter
from datetime import timedelta

import pytest
from hypothesis import given, settings, strategies as st

from attackcast.alignment import align, interpret, mhes_equivalent
from attackcast.forecast import ModelConfig, new_model
from attackcast.graph import (AttackGraph, EntityAttr, EventType, graph_to_dict, validate_edge)
from attackcast.evaluation import (DEFAULT_DECAY, GROUPS, PERTURBATION_KINDS, EvaluationError,
                                   PerturbationSpec, PerturbationTable, ReconstructionConfig,
                                   ReinforcementRule, break_graph, check_orderings, dispatch,
                                   perturb, perturb_with_report, perturbation_study,
                                   reconstruction_experiment, rule_action,
                                   summarize_reconstruction, technique_prf, write_records)
from attackcast.templates import CorpusSpec, synthesize_corpus

from conftest import graphs, make

TINY = ModelConfig(node_embed_adj=4, node_embed_attr=4, node_hidden=8, node_layers=1,
                   edge_embed=4, edge_hidden=8, edge_layers=1, window=5)


def sample_graph() -> AttackGraph:
    return make([("p", "q", "ForkClone"), ("q", "f", "Write"), ("f", "r", "Read"),
                 ("r", "s", "Send"), ("s", "p", "Receive")],
                {"p": "P", "q": "P", "f": "F2", "r": "P", "s": "S"})


# -- perturbation ----------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec("node-swap")
    with pytest.raises(ValueError):
        PerturbationSpec("edge-add", -1)


@pytest.mark.parametrize("kind", PERTURBATION_KINDS)
def test_count_zero_is_unchanged(kind):
    g = sample_graph()
    assert perturb(g, PerturbationSpec(kind, 0, 3)) == g


@settings(max_examples=25)
@given(g=graphs(min_nodes=2, max_nodes=10), kind=st.sampled_from(PERTURBATION_KINDS),
       count=st.integers(1, 4), seed=st.integers(0, 1000))
def test_perturb_is_deterministic_and_valid(g, kind, count, seed):
    spec = PerturbationSpec(kind, count, seed)
    a, b = perturb_with_report(g, spec), perturb_with_report(g, spec)
    assert graph_to_dict(a.graph) == graph_to_dict(b.graph)
    assert a.applied <= count and a.flagged == (a.applied < count)
    for e in a.graph.edges:
        assert validate_edge(a.graph.attr(e.src), e.event, a.graph.attr(e.dst))
    if kind.endswith("add-random"):
        assert len(a.graph.nodes) == len(g.nodes) + a.applied
    if kind == "edge-add":
        assert len(a.graph.edges) == len(g.edges) + a.applied


def test_mhes_split_example():
    g = make([("p", "s", "Send")], {"p": "P", "s": "S"})
    out = perturb(g, PerturbationSpec("node-add-mhes", 1, 0))
    assert [(out.attr(e.src), e.event, out.attr(e.dst)) for e in out.edges] == [
        (EntityAttr.P, EventType.ForkClone, EntityAttr.P),
        (EntityAttr.P, EventType.Send, EntityAttr.S)]
    assert out.edges[0].dst == out.edges[1].src
    assert mhes_equivalent((EntityAttr.P, EventType.Send, EntityAttr.S), out.edges, out)
    assert align(g, out).score == 1.0


def test_mhes_collapse_undoes_split():
    g = make([("p", "s", "Send")], {"p": "P", "s": "S"})
    split = perturb(g, PerturbationSpec("node-add-mhes", 1, 0))
    back = perturb(split, PerturbationSpec("node-del-mhes", 1, 0))
    assert [(back.attr(e.src), e.event, back.attr(e.dst)) for e in back.edges] == [
        (EntityAttr.P, EventType.Send, EntityAttr.S)]


def test_mhes_without_site_is_flagged():
    g = make([("f", "p", "Read")], {"f": "F1", "p": "P"})
    for kind in ("node-add-mhes", "node-del-mhes"):
        out = perturb_with_report(g, PerturbationSpec(kind, 1, 0))
        assert out.flagged and out.applied == 0 and out.graph == g
        assert out.diagnostics


def test_study_table_and_orderings(templates):
    gs = synthesize_corpus(templates, CorpusSpec((2, 2), "sequential-taint", 2, seed=5))
    table = perturbation_study(gs, 2, range(2))
    for k in PERTURBATION_KINDS:
        assert table.scores[k][0] == 1.0
        assert all(0.0 <= table.scores[k][c] <= 1.0 for c in range(3))
    rows = check_orderings(table)
    assert len(rows) == 3 * 2
    assert {r[0] for r in rows} == {"mhes-node>=random-node", "edge>=node", "additions>=deletions"}


def test_group_means():
    scores = {k: {1: float(i)} for i, k in enumerate(PERTURBATION_KINDS)}
    t = PerturbationTable(scores, 1)
    assert t.group(GROUPS["edge"], 1) == 0.5
    rows = check_orderings(t)
    # strictness applies only from count 2: ties at count 1 hold
    eq = PerturbationTable({k: {1: 0.5} for k in PERTURBATION_KINDS}, 1)
    assert all(r[-1] for r in check_orderings(eq))
    assert len(rows) == 3


# -- broken graphs ---------------------------------------------------------


def _template(templates, tid):
    return next(t for t in templates if t.technique_id == tid)


def test_break_single_template_instance(templates):
    t = _template(templates, "T1083")
    broken, deleted = break_graph(t.graph, [t])
    assert deleted == [t.graph.nodes[-1].id]
    assert interpret(broken, [t]) == []


def test_break_max_del_zero(templates):
    t = _template(templates, "T1083")
    broken, deleted = break_graph(t.graph, [t], max_del=0)
    assert broken == t.graph and deleted == []


def test_break_stops_at_five_with_diagnostic(templates):
    t = _template(templates, "T1083")
    g = t.graph
    attrs = {n.id: n.attr for n in g.nodes}
    events = [(e.src, e.dst, e.event) for e in g.edges]
    last_p = "n1"
    for k in range(6):
        attrs[f"x{k}"] = EntityAttr.FR
        events.append((last_p, f"x{k}", EventType.Write))
    big = AttackGraph.from_events(attrs, events)
    diags: list[str] = []
    broken, deleted = break_graph(big, [t], diagnostics=diags)
    assert deleted == ["x5", "x4", "x3", "x2", "x1"]
    assert diags and "5 deletion" in diags[0]
    assert interpret(broken, [t])


def test_break_requires_a_match(templates):
    g = make([("f", "p", "Read")], {"f": "F1", "p": "P"})
    with pytest.raises(EvaluationError):
        break_graph(g, templates)


def test_break_deletes_latest_first(templates):
    gs = synthesize_corpus(templates, CorpusSpec((2, 3), "sequential-taint", 6, seed=9, tail_noise=(0, 2)))
    for g in gs:
        broken, deleted = break_graph(g, templates)
        order = [g.node_map[d].order_index for d in deleted]
        assert order == sorted(order, reverse=True)
        assert order == list(range(len(g.nodes) - 1, len(g.nodes) - 1 - len(order), -1))
        assert set(interpret(broken, templates)) != set(interpret(g, templates)) or len(deleted) == 5


# -- reconstruction --------------------------------------------------------


def test_reconstruction_zero_deletions_scores_one(templates):
    gs = synthesize_corpus(templates, CorpusSpec((2, 2), "sequential-taint", 2, seed=1))
    recs = reconstruction_experiment(new_model(TINY), gs, templates,
                                     ReconstructionConfig(budget=0, max_del=0))
    assert len(recs) == 2
    for r in recs:
        assert r.deleted == 0 and r.broken_score == 1.0 and r.afg_score == 1.0
        assert r.generated_nodes == 0


def test_reconstruction_empty_list(templates):
    assert reconstruction_experiment(new_model(TINY), [], templates) == []


def test_reconstruction_records(tmp_path, templates):
    gs = synthesize_corpus(templates, CorpusSpec((2, 2), "sequential-taint", 2, seed=3))
    recs = reconstruction_experiment(new_model(TINY), gs, templates, ReconstructionConfig(budget=2))
    for r in recs:
        assert 0.0 <= r.broken_score <= 1.0 and 0.0 <= r.afg_score <= 1.0
        assert 1 <= r.deleted <= 5
        assert set(r.broken_techniques) <= set(r.original_techniques)
        assert r.generated_nodes <= 2
    summary = summarize_reconstruction(recs)
    assert sum(v["records"] for v in summary.values()) == len(recs)
    write_records(recs, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("graph_id,deleted,broken_score,afg_score")
    assert len(lines) == len(recs) + 1


# -- technique precision / recall ------------------------------------------


def test_prf_examples():
    truth = [["T1", "T2"], ["T3"]]
    assert technique_prf(truth, truth) == (1.0, 1.0, 1.0)
    assert technique_prf(truth, [["T9"], ["T8"]]) == (0.0, 0.0, 0.0)
    p, r, _ = technique_prf(truth, [["T1"], []])
    assert p == 1.0 and r == pytest.approx(1 / 3)
    with pytest.raises(EvaluationError):
        technique_prf(truth, [[]])


ids = st.lists(st.sampled_from(["T1", "T2", "T3", "T4", "T5"]), max_size=4)


@given(pairs=st.lists(st.tuples(ids, ids), max_size=6))
def test_prf_matches_counting_oracle(pairs):
    truth = [t for t, _ in pairs]
    pred = [p for _, p in pairs]
    # oracle: count (instance, technique) pairs
    tset = Counter((k, x) for k, t in enumerate(truth) for x in set(t))
    pset = Counter((k, x) for k, p in enumerate(pred) for x in set(p))
    tp = sum((tset & pset).values())
    prec = tp / sum(pset.values()) if pset else 0.0
    rec = tp / sum(tset.values()) if tset else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    assert technique_prf(truth, pred) == pytest.approx((prec, rec, f1))


@given(truth=st.lists(ids.filter(bool), min_size=1, max_size=5), data=st.data())
def test_prf_subset_has_full_precision(truth, data):
    pred = [data.draw(st.lists(st.sampled_from(t), min_size=1)) for t in truth]
    assert technique_prf(truth, pred)[0] == 1.0


# -- dispatch --------------------------------------------------------------


def test_dispatch_send():
    g = AttackGraph.from_events({"p": EntityAttr.P, "s": EntityAttr.S},
                                [("p", "s", EventType.Send)], forecast_edges=[0])
    (rule,) = dispatch(g)
    assert rule.action == "block-outbound" and rule.decay == DEFAULT_DECAY == timedelta(hours=2)
    assert rule.trigger == (EntityAttr.P, EventType.Send, EntityAttr.S)


def test_dispatch_no_forecast_edges():
    assert dispatch(sample_graph()) == []


def test_dispatch_read_then_write_in_seq_order():
    attrs = {"p": EntityAttr.P, "a": EntityAttr.F0, "b": EntityAttr.F2, "q": EntityAttr.P}
    events = [("p", "q", EventType.ForkClone), ("a", "p", EventType.Read),
              ("p", "b", EventType.Write)]
    g = AttackGraph.from_events(attrs, events, forecast_edges=[1, 2])
    rules = dispatch(g, timedelta(minutes=30))
    assert [r.action for r in rules] == ["block-read-sensitive", "block-write"]
    assert rules[0].edge_seq < rules[1].edge_seq
    assert all(r.decay == timedelta(minutes=30) for r in rules)


def test_rule_action_table():
    P, S = EntityAttr.P, EntityAttr.S
    assert rule_action(EntityAttr.F0, EventType.Read, P) == "block-read-sensitive"
    assert rule_action(EntityAttr.F1, EventType.Read, P) is None
    assert rule_action(P, EventType.Execute, EntityAttr.FR) == "block-exec"
    assert rule_action(P, EventType.Write, EntityAttr.F3) == "block-write"
    assert rule_action(P, EventType.ForkClone, P) == "block-spawn"
    assert rule_action(S, EventType.Receive, P) is None


def test_rule_validation():
    with pytest.raises(ValueError):
        ReinforcementRule((EntityAttr.F0, EventType.Write, EntityAttr.F1), "block-write")
    with pytest.raises(ValueError):
        ReinforcementRule((EntityAttr.P, EventType.Send, EntityAttr.S), "block-exec")
