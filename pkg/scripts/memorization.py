"""Overfit the forecast model on a small synthetic corpus.

Reports training node/edge TPR per epoch next to the best node TPR any
predictor can reach (positions whose prefix continues differently across
the corpus cannot all be right).

    python3 scripts/memorization.py --epochs 500
"""
import argparse
import time
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

from attackcast.forecast import ModelConfig, save_checkpoint, train
from attackcast.graph import to_sequence
from attackcast.templates import CorpusSpec, load_templates, synthesize_corpus


@dataclass
class Config:
    graphs: int = 20
    chain: tuple = (7, 8)
    corpus_seed: int = 0
    epochs: int = 500
    seed: int = 0
    log_every: int = 25
    out: str = "results/memorization"


def node_bound(seqs) -> float:
    """Best achievable node TPR when predictions depend only on the prefix."""
    by_prefix: dict = defaultdict(Counter)
    total = 0
    for s in seqs:
        s = s.with_terminator()
        for i, code in enumerate(s.node_codes):
            by_prefix[(s.node_codes[:i], s.adj_vectors[:i])][code] += 1
            total += 1
    return sum(c.most_common(1)[0][1] for c in by_prefix.values()) / total


def main(cfg: Config):
    spec = CorpusSpec(cfg.chain, "sequential-taint", cfg.graphs, cfg.corpus_seed, (0, 2))
    mcfg = ModelConfig(seed=cfg.seed)
    seqs = [to_sequence(g, mcfg.window) for g in synthesize_corpus(load_templates(), spec)]
    print(f"node TPR bound {node_bound(seqs):.4f}")
    t0 = time.time()

    def log(epoch, m):
        if epoch % cfg.log_every == 0:
            print(f"epoch {epoch:4d} {time.time() - t0:6.1f}s node_tpr={m['node_tpr']:.4f} "
                  f"edge_tpr={m['edge_tpr']:.4f}", flush=True)
    model, report = train(seqs, mcfg, epochs=cfg.epochs, callback=log)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "train.csv")
    save_checkpoint(model, out / "model.npz")
    print(report.final())


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=Config.epochs)
    ap.add_argument("--seed", type=int, default=Config.seed)
    ap.add_argument("--out", default=Config.out)
    a = ap.parse_args()
    main(Config(epochs=a.epochs, seed=a.seed, out=a.out))
