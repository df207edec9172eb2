"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config`` or the
``ATTACKCAST_CONFIG`` environment variable) with sections ``alignment``,
``model``, ``coref``, ``corpus`` and ``reconstruction``; explicit flags win
over config values.  Failures print one ``ERROR {json}`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from .alignment import AlignmentConfig, AlignmentError, align, interpret, load_rules, save_report
from .asg import AsgError, CorefConfig, build_asg, load_lexicon, load_sentences
from .forecast import ModelConfig
from .graph import GraphError, export_dot, load_graph, save_graph, to_sequence
from .templates import (CorpusSpec, TemplateError, load_corpus, load_templates, synthesize_labeled,
                        template_stats, write_corpus)

CONFIG_ENV = "ATTACKCAST_CONFIG"
logger = logging.getLogger("attackcast")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class CliConfig:
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    coref: CorefConfig = field(default_factory=CorefConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    reconstruction: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    verbosity: int = 0


def _section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise CliError("config", f"unknown keys in [{name}]: {sorted(unknown)}")
    kw = dict(data)
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(v)
    return cls(**kw)


def load_config(path: str | None) -> CliConfig:
    path = path or os.environ.get(CONFIG_ENV)
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise CliError("missing-path", f"config file {path} not found")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CliError("config", f"config file {path}: {exc}") from exc
    unknown = set(raw) - {"alignment", "model", "coref", "corpus", "reconstruction", "paths"}
    if unknown:
        raise CliError("config", f"unknown config sections {sorted(unknown)}")
    align_raw = dict(raw.get("alignment", {}))
    rules_path = align_raw.pop("rules_file", None)
    try:
        acfg = _section(AlignmentConfig, align_raw, "alignment")
        if rules_path:
            acfg = replace(acfg, rules=load_rules(rules_path))
        return CliConfig(acfg, _section(ModelConfig, raw.get("model", {}), "model"),
                         _section(CorefConfig, raw.get("coref", {}), "coref"),
                         _section(CorpusSpec, raw.get("corpus", {}), "corpus"),
                         dict(raw.get("reconstruction", {})), dict(raw.get("paths", {})))
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from exc


def _override(obj, **flags):
    """Replace fields whose flag value is not None."""
    changes = {k: v for k, v in flags.items() if v is not None}
    return replace(obj, **changes) if changes else obj


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise CliError("missing-path", f"{what} path is required")
    p = Path(path)
    if not p.exists():
        raise CliError("missing-path", f"{what} {path} not found")
    return p


def _templates(args, cfg: CliConfig):
    src = args.templates or cfg.paths.get("templates")
    if src:
        _need(src, "templates")
    diags: list[str] = []
    ts = load_templates(src, diags)
    for d in diags:
        print(f"warning: {d}", file=sys.stderr)
    return ts, diags


def _align_cfg(args, cfg: CliConfig) -> AlignmentConfig:
    return _override(cfg.alignment, fix_threshold=getattr(args, "fix_threshold", None),
                     interpret_threshold=getattr(args, "threshold", None),
                     max_hops=getattr(args, "max_hops", None))


# --------------------------------------------------------------------------
# subcommands

def cmd_build_asg(args, cfg: CliConfig) -> int:
    lexicon = load_lexicon(_need(args.lexicon, "lexicon") if args.lexicon else None)
    coref = _override(cfg.coref, w_d=args.w_d, w_t=args.w_t, threshold=args.coref_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [_need(p, "sentence file") for p in args.inputs]
    built = 0
    for p in paths:
        diags: list[str] = []
        g = build_asg(load_sentences(p), lexicon, coref, args.min_nodes, diags, provenance=p.name)
        for d in diags:
            print(f"warning: {p.name}: {d}", file=sys.stderr)
        if g is None:
            print(f"{p.name}\tskipped (fewer than {args.min_nodes} nodes)")
            continue
        save_graph(g, out / f"{p.stem}.json")
        built += 1
        print(f"{p.name}\t{len(g.nodes)} nodes\t{len(g.edges)} edges")
    print(f"built {built} of {len(paths)}")
    return 0


def cmd_templates(args, cfg: CliConfig) -> int:
    ts, diags = _templates(args, cfg)
    if args.action == "list":
        for t in ts:
            print(f"{t.technique_id}\t{t.tactic}\t{len(t.graph.nodes)}\t{len(t.graph.edges)}")
    elif args.action == "stats":
        print(json.dumps(template_stats(ts), indent=2))
    else:
        print(f"{len(ts)} valid, {len(diags)} invalid")
        if diags:
            raise CliError("validation", f"{len(diags)} template(s) failed validation")
    return 0


def cmd_synth(args, cfg: CliConfig) -> int:
    ts, _ = _templates(args, cfg)
    chain = tuple(args.chain) if args.chain else None
    noise = tuple(args.tail_noise) if args.tail_noise else None
    spec = _override(cfg.corpus, count=args.count, seed=args.seed, splice_rule=args.splice_rule,
                     chain_length_range=chain, tail_noise=noise)
    corpus = synthesize_labeled(ts, spec)
    root = write_corpus(args.out, corpus, spec)
    print(f"wrote {len(corpus)} graphs to {root}")
    return 0


def cmd_train(args, cfg: CliConfig) -> int:
    from .forecast import save_checkpoint, train
    graphs = load_corpus(_need(args.corpus, "corpus"))
    mcfg = _override(cfg.model, epochs=args.epochs, learning_rate=args.lr, window=args.window,
                     batch_size=args.batch_size, seed=args.seed)
    corpus = [to_sequence(g, mcfg.window) for g in graphs]

    def progress(epoch, metrics):
        if args.log_every and epoch % args.log_every == 0:
            print(f"epoch {epoch}\t" + "\t".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    model, report = train(corpus, mcfg, callback=progress)
    save_checkpoint(model, args.out)
    if args.report:
        report.to_csv(args.report)
    print(json.dumps(report.final()))
    return 0


def cmd_forecast(args, cfg: CliConfig) -> int:
    from .evaluation import dispatch
    from .forecast import StopCriterion, forecast_trace, load_checkpoint
    model = load_checkpoint(_need(args.model, "model"))
    apg = load_graph(_need(args.apg, "graph"))
    templates = _templates(args, cfg)[0] if (args.templates or args.stop_on_atg) else None
    stop = StopCriterion(args.budget, templates, _align_cfg(args, cfg))
    trace = forecast_trace(model, apg, stop, args.mode, args.seed)
    save_graph(trace.graph, args.out)
    for d in trace.diagnostics:
        print(f"note: {d}", file=sys.stderr)
    print(f"steps={trace.steps}\treason={trace.reason}\tnodes={len(trace.graph.nodes)}"
          f"\tedges={len(trace.graph.edges)}")
    if args.dispatch:
        rules = [{"trigger": [r.trigger[0].value, r.trigger[1].value, r.trigger[2].value],
                  "action": r.action, "decay_seconds": r.decay.total_seconds(),
                  "edge_seq": r.edge_seq} for r in dispatch(trace.graph)]
        Path(args.dispatch).write_text(json.dumps(rules, indent=2) + "\n")
    return 0


def cmd_align(args, cfg: CliConfig) -> int:
    q = load_graph(_need(args.query, "query"))
    h = load_graph(_need(args.host, "host"))
    res = align(q, h, _align_cfg(args, cfg))
    print(f"score\t{res.score:.6f}\t{res.matched_flows}/{res.total_flows}")
    for qn, hn in res.fixed.items():
        print(f"{qn}\t{hn if hn is not None else '-'}")
    if args.report:
        save_report(res, args.report)
    return 0


def cmd_interpret(args, cfg: CliConfig) -> int:
    afg = load_graph(_need(args.afg, "graph"))
    ts, _ = _templates(args, cfg)
    hits = interpret(afg, ts, _align_cfg(args, cfg))
    tactic = {t.technique_id: t.tactic for t in ts}
    print("technique\ttactic\tscore")
    for tid, s in hits:
        print(f"{tid}\t{tactic[tid]}\t{s:.6f}")
    return 0


def cmd_evaluate(args, cfg: CliConfig) -> int:
    from .evaluation import (ReconstructionConfig, check_orderings, perturbation_study,
                             reconstruction_experiment, summarize_reconstruction, technique_prf,
                             write_records)
    corpus_dir = _need(args.corpus, "corpus")
    graphs = load_corpus(corpus_dir)
    acfg = _align_cfg(args, cfg)
    if args.experiment == "perturbation-study":
        seeds = [args.seed + k for k in range(args.seeds)]
        table = perturbation_study(graphs, args.max_count, seeds, acfg)
        if args.out:
            table.to_csv(args.out)
        for name, c, a, b, ok in check_orderings(table):
            print(f"{name}\tcount={c}\t{a:.4f}\t{b:.4f}\t{'holds' if ok else 'violated'}")
        return 0
    from .forecast import load_checkpoint
    model = load_checkpoint(_need(args.model, "model"))
    ts, _ = _templates(args, cfg)
    rc = ReconstructionConfig(**{**cfg.reconstruction, "align": acfg})
    rc = _override(rc, budget=args.budget, max_del=args.max_del)
    files = sorted(f.stem for f in corpus_dir.glob("*.json") if f.name != "manifest.json")
    records = reconstruction_experiment(model, graphs, ts, rc, files)
    if args.out:
        write_records(records, args.out)
    for n, row in summarize_reconstruction(records).items():
        print(f"N={n}\trecords={row['records']}\tbroken={row['broken']:.4f}\tafg={row['afg']:.4f}")
    for name, pred in (("broken", [r.broken_techniques for r in records]),
                       ("afg", [r.afg_techniques for r in records])):
        p, r, f = technique_prf([rec.original_techniques for rec in records], pred)
        print(f"{name}\tprecision={p:.4f}\trecall={r:.4f}\tf1={f:.4f}")
    return 0


def cmd_export_dot(args, cfg: CliConfig) -> int:
    g = load_graph(_need(args.graph, "graph"))
    text = export_dot(g, args.name)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# parser

def _add_align_flags(p, threshold: bool = False):
    p.add_argument("--fix-threshold", type=float, help="minimum node score to fix a candidate")
    p.add_argument("--max-hops", type=int, help="longest delivery path standing in for one edge")
    if threshold:
        p.add_argument("--threshold", type=float, help="report techniques scoring above this")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attackcast", description=(
        "Forecast attack graphs and interpret them as ATT&CK techniques."))
    parser.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("build-asg", help="build scene graphs from annotated report sentences")
    p.add_argument("inputs", nargs="+", help="annotated sentence files, one report each")
    p.add_argument("--out", required=True, help="output directory for graph files")
    p.add_argument("--lexicon", help="verb lexicon file (default: bundled)")
    p.add_argument("--min-nodes", type=int, default=5, help="skip graphs with fewer nodes")
    p.add_argument("--w-d", type=float, help="co-reference index-distance weight")
    p.add_argument("--w-t", type=float, help="co-reference type-distance weight")
    p.add_argument("--coref-threshold", type=float, help="co-reference merge threshold")
    p.set_defaults(func=cmd_build_asg)

    p = sub.add_parser("templates", help="list, validate or summarize technique templates")
    p.add_argument("action", choices=("list", "validate", "stats"), help="what to do with the set")
    p.add_argument("--templates", help="template directory (default: bundled)")
    p.set_defaults(func=cmd_templates)

    p = sub.add_parser("synth", help="synthesize a template-composed corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--templates", help="template directory (default: bundled)")
    p.add_argument("--count", type=int, help="number of graphs")
    p.add_argument("--chain", type=int, nargs=2, metavar=("MIN", "MAX"),
                   help="techniques per graph")
    p.add_argument("--splice-rule", choices=("share-root-process", "sequential-taint"),
                   help="how consecutive technique instances are joined")
    p.add_argument("--tail-noise", type=int, nargs=2, metavar=("MIN", "MAX"),
                   help="unrelated nodes appended after the last technique")
    p.add_argument("--seed", type=int, help="corpus seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the forecast model on a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory of graph files")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--window", type=int, help="edge look-back window M")
    p.add_argument("--batch-size", type=int, help="graphs per optimizer step")
    p.add_argument("--seed", type=int, help="initialization and shuffling seed")
    p.add_argument("--report", help="per-epoch metrics CSV")
    p.add_argument("--log-every", type=int, default=0, help="print metrics every N epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="extend a provenance graph with predicted steps")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--apg", required=True, help="input graph file")
    p.add_argument("--out", required=True, help="output forecast graph file")
    p.add_argument("--budget", type=int, default=5, help="maximum generated nodes")
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy",
                   help="pick the most likely code or sample one")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--templates", help="stop once a new technique matches (template dir)")
    p.add_argument("--stop-on-atg", action="store_true",
                   help="stop on a new technique match using the bundled templates")
    p.add_argument("--dispatch", help="write response rules for forecast edges (JSON)")
    _add_align_flags(p)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("align", help="score a query graph inside a host graph")
    p.add_argument("--query", required=True, help="query graph file")
    p.add_argument("--host", required=True, help="host graph file")
    p.add_argument("--report", help="write the full alignment report (JSON)")
    _add_align_flags(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("interpret", help="label a graph with matching techniques")
    p.add_argument("--afg", required=True, help="graph file to interpret")
    p.add_argument("--templates", help="template directory (default: bundled)")
    _add_align_flags(p, threshold=True)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("evaluate", help="run an evaluation experiment")
    p.add_argument("experiment", choices=("perturbation-study", "reconstruction"),
                   help="which experiment to run")
    p.add_argument("--corpus", required=True, help="corpus directory of graph files")
    p.add_argument("--model", help="checkpoint (reconstruction)")
    p.add_argument("--templates", help="template directory (default: bundled)")
    p.add_argument("--out", help="result table (CSV)")
    p.add_argument("--max-count", type=int, default=5, help="largest perturbation count")
    p.add_argument("--seeds", type=int, default=5, help="perturbation seeds per graph")
    p.add_argument("--seed", type=int, default=0, help="first perturbation seed")
    p.add_argument("--budget", type=int, help="forecast node budget (reconstruction)")
    p.add_argument("--max-del", type=int, help="deletions allowed when breaking a graph")
    _add_align_flags(p, threshold=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-dot", help="render a graph file as Graphviz DOT")
    p.add_argument("--graph", required=True, help="graph file")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--name", default="G", help="DOT graph name")
    p.set_defaults(func=cmd_export_dot)
    return parser


def _error_line(command: str | None, kind: str, message: str) -> str:
    return "ERROR " + json.dumps({"command": command, "kind": kind, "message": message},
                                 sort_keys=True)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "evaluate" and args.experiment == "reconstruction" and not args.model:
        print(_error_line(args.command, "usage", "reconstruction needs --model"), file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except CliError as exc:
        print(_error_line(args.command, exc.kind, str(exc)), file=sys.stderr)
    except (GraphError, TemplateError, AsgError, AlignmentError) as exc:
        print(_error_line(args.command, "validation", str(exc)), file=sys.stderr)
    except (ValueError, OSError, KeyError) as exc:
        print(_error_line(args.command, type(exc).__name__, str(exc)), file=sys.stderr)
    return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
