"""Break synthetic graphs, forecast them back and compare technique sets.

The model is overfit on the evaluation corpus itself, so this measures how
well forecasting restores deleted structure, not generalization.

    python3 scripts/reconstruction.py --out results/reconstruction.csv
"""
import argparse
import time
from dataclasses import dataclass
from pathlib import Path

from attackcast.evaluation import (reconstruction_experiment, summarize_reconstruction,
                                   technique_prf, write_records)
from attackcast.forecast import ModelConfig, train
from attackcast.graph import to_sequence
from attackcast.templates import CorpusSpec, load_templates, synthesize_corpus


@dataclass
class Config:
    graphs: int = 50
    chain: tuple = (2, 3)
    corpus_seed: int = 7
    tail_noise: tuple = (0, 4)
    epochs: int = 400
    seed: int = 0
    out: str = "results/reconstruction.csv"


def main(cfg: Config):
    templates = load_templates()
    spec = CorpusSpec(cfg.chain, "sequential-taint", cfg.graphs, cfg.corpus_seed, cfg.tail_noise)
    graphs = synthesize_corpus(templates, spec)
    mcfg = ModelConfig(seed=cfg.seed)
    t0 = time.time()
    model, report = train([to_sequence(g, mcfg.window) for g in graphs], mcfg, epochs=cfg.epochs)
    print(f"trained {cfg.epochs} epochs in {time.time() - t0:.0f}s: {report.final()}")
    records = reconstruction_experiment(model, graphs, templates)
    for n, row in summarize_reconstruction(records).items():
        print(f"N={n} records={row['records']:3d} broken={row['broken']:.3f} afg={row['afg']:.3f}")
    truth = [r.original_techniques for r in records]
    for name, pred in (("broken", [r.broken_techniques for r in records]),
                       ("afg", [r.afg_techniques for r in records])):
        p, r, f = technique_prf(truth, pred)
        print(f"{name:6} precision={p:.3f} recall={r:.3f} f1={f:.3f}")
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    write_records(records, cfg.out)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--graphs", type=int, default=Config.graphs)
    ap.add_argument("--epochs", type=int, default=Config.epochs)
    ap.add_argument("--seed", type=int, default=Config.seed)
    ap.add_argument("--out", default=Config.out)
    a = ap.parse_args()
    main(Config(graphs=a.graphs, epochs=a.epochs, seed=a.seed, out=a.out))
