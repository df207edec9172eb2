"""Summary of the bundled technique templates, and a self-check that every
template aligns into itself with score 1.

    python3 scripts/template_stats.py
"""
import json

from attackcast.alignment import align
from attackcast.templates import load_templates, template_stats


def main():
    ts = load_templates()
    print(json.dumps(template_stats(ts), indent=2))
    for t in ts:
        s = align(t.graph, t.graph).score
        print(f"{t.technique_id:10} {t.tactic:22} nodes={len(t.graph.nodes)} "
              f"edges={len(t.graph.edges)} self={s:.3f}")


if __name__ == "__main__":
    main()
