"""Autoregressive attack-graph forecast model.

A node-level recurrent stack reads the encoded prefix and predicts the next
node code; an edge-level stack, initialised from the node stack's state,
predicts the new node's adjacency vector one entry at a time.  Both stacks
are built from :class:`GRUStack`, a plain gated recurrent unit.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import (NUM_EDGE_CODES, NUM_NODE_CODES, TERMINATOR, AttackGraph, Edge, EntityAttr,
                    EventType, Node, Role, SequenceEncoding, orient_edge, to_sequence)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SOS = NUM_NODE_CODES          # start-of-sequence token for the node stack input
IGNORE = -100


class ForecastError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    node_embed_adj: int = 64
    node_embed_attr: int = 256
    node_hidden: int = 128
    node_layers: int = 4
    edge_embed: int = 32
    edge_hidden: int = 64
    edge_layers: int = 4
    window: int = 5
    batch_size: int = 16
    epochs: int = 50
    learning_rate: float = 1e-3
    seed: int = 0
    zero_weight: float = 1.0      # loss weight of "no edge" targets
    max_nodes: int = 1024

    def __post_init__(self):
        dims = (self.node_embed_adj, self.node_embed_attr, self.node_hidden, self.node_layers,
                self.edge_embed, self.edge_hidden, self.edge_layers, self.batch_size, self.max_nodes)
        if min(dims) < 1:
            raise ValueError("all dimensions, layer counts and batch size must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.epochs < 0 or self.learning_rate <= 0 or self.zero_weight < 0:
            raise ValueError("epochs >= 0, learning_rate > 0 and zero_weight >= 0 required")


class GRUStack(nn.Module):
    """Stacked gated recurrent unit.

    Per layer, with input ``x`` and previous state ``h``::

        r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
        z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
        n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
        h' = (1 - z) * n + z * h
    """

    def __init__(self, input_size: int, hidden_size: int, num_layers: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.w_ih = nn.ParameterList()
        self.w_hh = nn.ParameterList()
        self.b_ih = nn.ParameterList()
        self.b_hh = nn.ParameterList()
        for layer in range(num_layers):
            fan_in = input_size if layer == 0 else hidden_size
            self.w_ih.append(nn.Parameter(torch.empty(3 * hidden_size, fan_in)))
            self.w_hh.append(nn.Parameter(torch.empty(3 * hidden_size, hidden_size)))
            self.b_ih.append(nn.Parameter(torch.empty(3 * hidden_size)))
            self.b_hh.append(nn.Parameter(torch.empty(3 * hidden_size)))
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.hidden_size)
        for p in self.parameters():
            nn.init.uniform_(p, -bound, bound)

    def _cell(self, gi, h, layer):
        gh = F.linear(h, self.w_hh[layer], self.b_hh[layer])
        i_r, i_z, i_n = gi.chunk(3, -1)
        h_r, h_z, h_n = gh.chunk(3, -1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        return (1 - z) * n + z * h

    def forward(self, xs: torch.Tensor, h0: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run over a (T, B, input) sequence from state (layers, B, hidden)."""
        out = xs
        last = []
        for layer in range(self.num_layers):
            gi_all = F.linear(out, self.w_ih[layer], self.b_ih[layer])
            h = h0[layer]
            steps = []
            for t in range(gi_all.shape[0]):
                h = self._cell(gi_all[t], h, layer)
                steps.append(h)
            out = torch.stack(steps)
            last.append(h)
        return out, torch.stack(last)

    def step(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """One time step for all layers; returns the new (layers, B, hidden) state."""
        new = []
        inp = x
        for layer in range(self.num_layers):
            gi = F.linear(inp, self.w_ih[layer], self.b_ih[layer])
            inp = self._cell(gi, h[layer], layer)
            new.append(inp)
        return torch.stack(new)


class ForecastModel(nn.Module):
    """Node stack plus edge stack with their embeddings and output heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.num_node_codes = NUM_NODE_CODES
        self.num_edge_codes = NUM_EDGE_CODES
        M = cfg.window
        self.adj_embed = nn.Linear(M * NUM_EDGE_CODES, cfg.node_embed_adj)
        self.attr_embed = nn.Embedding(NUM_NODE_CODES + 1, cfg.node_embed_attr)
        self.node_rnn = GRUStack(cfg.node_embed_adj + cfg.node_embed_attr, cfg.node_hidden,
                                 cfg.node_layers)
        self.node_head = nn.Linear(cfg.node_hidden, NUM_NODE_CODES)
        self.edge_init = nn.Linear(cfg.node_hidden, cfg.edge_layers * cfg.edge_hidden)
        self.edge_node_embed = nn.Embedding(NUM_NODE_CODES, cfg.edge_embed)
        self.edge_code_embed = nn.Embedding(NUM_EDGE_CODES, cfg.edge_embed)
        self.edge_rnn = GRUStack(cfg.edge_embed, cfg.edge_hidden, cfg.edge_layers)
        self.edge_head = nn.Linear(cfg.edge_hidden, NUM_EDGE_CODES)

    @property
    def dtype(self) -> torch.dtype:
        return self.node_head.weight.dtype

    # -- building blocks ------------------------------------------------------

    def node_inputs(self, prev_codes: torch.Tensor, prev_adj: torch.Tensor) -> torch.Tensor:
        """``prev_codes`` (T, B) long, ``prev_adj`` (T, B, M) long with -1 for
        positions beyond the vector's length."""
        onehot = (prev_adj.unsqueeze(-1) == torch.arange(NUM_EDGE_CODES)).to(self.dtype)
        adj = self.adj_embed(onehot.flatten(-2))
        return torch.cat([adj, self.attr_embed(prev_codes)], dim=-1)

    def run_nodes(self, prev_codes, prev_adj):
        B = prev_codes.shape[1]
        h0 = torch.zeros(self.cfg.node_layers, B, self.cfg.node_hidden, dtype=self.dtype)
        out, _ = self.node_rnn(self.node_inputs(prev_codes, prev_adj), h0)
        return out, self.node_head(out)

    def edge_state(self, h_node: torch.Tensor) -> torch.Tensor:
        """Initial edge-stack state (layers, N, hidden) from node states (N, hidden)."""
        cfg = self.cfg
        h = torch.tanh(self.edge_init(h_node))
        return h.view(-1, cfg.edge_layers, cfg.edge_hidden).transpose(0, 1).contiguous()

    def run_edges(self, h_node, node_codes, edge_inputs):
        """Teacher-forced edge logits (M, N, codes).

        ``edge_inputs`` (M-1, N) long holds the previous edge code fed at
        steps 1..M-1; step 0 is fed the new node's code.
        """
        first = self.edge_node_embed(node_codes).unsqueeze(0)
        rest = self.edge_code_embed(edge_inputs)
        xs = torch.cat([first, rest], dim=0)
        out, _ = self.edge_rnn(xs, self.edge_state(h_node))
        return self.edge_head(out)


# --------------------------------------------------------------------------
# batching and loss


@dataclass
class Batch:
    prev_codes: torch.Tensor   # (T, B)
    prev_adj: torch.Tensor     # (T, B, M)
    node_targets: torch.Tensor  # (T, B)
    edge_pos: tuple[torch.Tensor, torch.Tensor]  # time and batch index of edge rows
    edge_node: torch.Tensor    # (N,)
    edge_inputs: torch.Tensor  # (M-1, N)
    edge_targets: torch.Tensor  # (M, N)
    graphs: int


def make_batch(seqs: Sequence[SequenceEncoding], window: int) -> Batch:
    seqs = [s.with_terminator() for s in seqs]
    B, M = len(seqs), window
    T = max(len(s) for s in seqs)
    prev_codes = np.full((T, B), SOS, dtype=np.int64)
    prev_adj = np.full((T, B, M), -1, dtype=np.int64)
    node_targets = np.full((T, B), IGNORE, dtype=np.int64)
    rows_t, rows_b, e_node, e_in, e_tgt = [], [], [], [], []
    for b, s in enumerate(seqs):
        for i, code in enumerate(s.node_codes):
            node_targets[i, b] = code
            if i + 1 < T:
                prev_codes[i + 1, b] = code
                vec = s.adj_vectors[i]
                prev_adj[i + 1, b, :len(vec)] = vec
            vec = s.adj_vectors[i]
            if code == TERMINATOR or not vec:
                continue
            tgt = np.full(M, IGNORE, dtype=np.int64)
            tgt[:len(vec)] = vec
            inp = np.zeros(max(M - 1, 0), dtype=np.int64)
            k = min(len(vec), M) - 1
            inp[:k] = vec[:k]
            rows_t.append(i)
            rows_b.append(b)
            e_node.append(code)
            e_in.append(inp)
            e_tgt.append(tgt)
    t = torch.as_tensor
    if e_node:
        edge_inputs = t(np.stack(e_in, axis=1)).reshape(max(M - 1, 0), len(e_node))
        edge_targets = t(np.stack(e_tgt, axis=1))
    else:
        edge_inputs = torch.zeros(max(M - 1, 0), 0, dtype=torch.long)
        edge_targets = torch.zeros(M, 0, dtype=torch.long)
    return Batch(t(prev_codes), t(prev_adj), t(node_targets),
                 (t(np.array(rows_t, dtype=np.int64)), t(np.array(rows_b, dtype=np.int64))),
                 t(np.array(e_node, dtype=np.int64)), edge_inputs, edge_targets, B)


@dataclass
class BatchOutput:
    node_loss: torch.Tensor
    edge_loss: torch.Tensor
    node_hits: int
    node_total: int
    edge_hits: int
    edge_total: int

    @property
    def loss(self) -> torch.Tensor:
        return self.node_loss + self.edge_loss


def batch_forward(model: ForecastModel, batch: Batch) -> BatchOutput:
    """Summed node and edge cross-entropies over every position of the batch."""
    h, node_logits = model.run_nodes(batch.prev_codes, batch.prev_adj)
    flat_logits = node_logits.reshape(-1, NUM_NODE_CODES)
    flat_tgt = batch.node_targets.reshape(-1)
    node_loss = F.cross_entropy(flat_logits, flat_tgt, ignore_index=IGNORE, reduction="sum")
    valid = flat_tgt != IGNORE
    node_hits = int((flat_logits.argmax(-1)[valid] == flat_tgt[valid]).sum())
    node_total = int(valid.sum())
    if batch.edge_node.numel() == 0:
        zero = node_loss.new_zeros(())
        return BatchOutput(node_loss, zero, node_hits, node_total, 0, 0)
    h_rows = h[batch.edge_pos[0], batch.edge_pos[1]]
    edge_logits = model.run_edges(h_rows, batch.edge_node, batch.edge_inputs)
    e_logits = edge_logits.reshape(-1, NUM_EDGE_CODES)
    e_tgt = batch.edge_targets.reshape(-1)
    weight = None
    if model.cfg.zero_weight != 1.0:
        weight = torch.ones(NUM_EDGE_CODES, dtype=model.dtype)
        weight[0] = model.cfg.zero_weight
    edge_loss = F.cross_entropy(e_logits, e_tgt, weight=weight, ignore_index=IGNORE,
                                reduction="sum")
    nz = (e_tgt != IGNORE) & (e_tgt != 0)
    edge_hits = int((e_logits.argmax(-1)[nz] == e_tgt[nz]).sum())
    return BatchOutput(node_loss, edge_loss, node_hits, node_total, edge_hits, int(nz.sum()))


def sequence_loss(model: ForecastModel, sample: SequenceEncoding) -> torch.Tensor:
    """Total loss of one encoding (terminator appended when missing)."""
    return batch_forward(model, make_batch([sample], model.cfg.window)).loss


# --------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    node_loss: list[float] = field(default_factory=list)
    edge_loss: list[float] = field(default_factory=list)
    node_tpr: list[float] = field(default_factory=list)
    edge_tpr: list[float] = field(default_factory=list)

    def final(self) -> dict[str, float]:
        return {"node_loss": self.node_loss[-1], "edge_loss": self.edge_loss[-1],
                "node_tpr": self.node_tpr[-1], "edge_tpr": self.edge_tpr[-1]}

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "node_loss", "edge_loss", "node_tpr", "edge_tpr"])
            for k, row in enumerate(zip(self.node_loss, self.edge_loss, self.node_tpr,
                                        self.edge_tpr), 1):
                w.writerow([k, *(f"{v:.6g}" for v in row)])


def _check_corpus(corpus: Sequence[SequenceEncoding], cfg: ModelConfig):
    if not corpus:
        raise ForecastError("training corpus is empty")
    windows = {s.window for s in corpus}
    if windows != {cfg.window}:
        raise ForecastError(f"corpus windows {sorted(windows)} do not match model window {cfg.window}")
    for s in corpus:
        if len(s.without_terminator()) == 0:
            raise ForecastError("corpus contains an empty encoding")
        if len(s) > cfg.max_nodes:
            raise ForecastError(f"encoding longer than max_nodes={cfg.max_nodes}")


def evaluate(model: ForecastModel, corpus: Sequence[SequenceEncoding]) -> dict[str, float]:
    """Teacher-forced losses (per graph) and true-positive rates on ``corpus``."""
    _check_corpus(corpus, model.cfg)
    nl = el = 0.0
    nh = nt = eh = et = 0
    with torch.no_grad():
        for k in range(0, len(corpus), model.cfg.batch_size):
            out = batch_forward(model, make_batch(corpus[k:k + model.cfg.batch_size],
                                                  model.cfg.window))
            nl += float(out.node_loss)
            el += float(out.edge_loss)
            nh, nt, eh, et = nh + out.node_hits, nt + out.node_total, eh + out.edge_hits, et + out.edge_total
    n = len(corpus)
    return {"node_loss": nl / n, "edge_loss": el / n,
            "node_tpr": nh / nt if nt else 0.0, "edge_tpr": eh / et if et else 0.0}


def new_model(cfg: ModelConfig) -> ForecastModel:
    torch.manual_seed(cfg.seed)
    return ForecastModel(cfg)


def train(corpus: Sequence[SequenceEncoding], cfg: ModelConfig, *,
          model: ForecastModel | None = None, epochs: int | None = None,
          callback: Callable[[int, dict], bool | None] | None = None
          ) -> tuple[ForecastModel, TrainReport]:
    """Teacher-forced training with Adam on summed cross-entropy.

    Each epoch shuffles the corpus with a seeded generator, steps once per
    batch, then records losses and true-positive rates over the whole
    corpus.  ``callback(epoch, metrics)`` may return True to stop early.
    """
    _check_corpus(corpus, cfg)
    corpus = [s.with_terminator() for s in corpus]
    if model is None:
        model = new_model(cfg)
    elif model.cfg.window != cfg.window:
        raise ForecastError("model window differs from config window")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = random.Random(cfg.seed)
    report = TrainReport()
    batches_cache: dict[tuple, Batch] = {}
    for epoch in range(cfg.epochs if epochs is None else epochs):
        order = list(range(len(corpus)))
        rng.shuffle(order)
        model.train()
        for k in range(0, len(order), cfg.batch_size):
            idx = tuple(order[k:k + cfg.batch_size])
            batch = batches_cache.get(idx)
            if batch is None:
                batch = make_batch([corpus[i] for i in idx], cfg.window)
                if len(corpus) <= cfg.batch_size:
                    batches_cache[idx] = batch
            opt.zero_grad()
            out = batch_forward(model, batch)
            (out.loss / batch.graphs).backward()
            opt.step()
        model.eval()
        m = evaluate(model, corpus)
        report.node_loss.append(m["node_loss"])
        report.edge_loss.append(m["edge_loss"])
        report.node_tpr.append(m["node_tpr"])
        report.edge_tpr.append(m["edge_tpr"])
        if callback is not None and callback(epoch + 1, m):
            break
    return model, report


# --------------------------------------------------------------------------
# gradient check


def gradient_check(model: ForecastModel, sample: SequenceEncoding, *, num_params: int = 256,
                   eps: float = 1e-3, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    Runs on a float64 copy of ``model``.  ``num_params`` coordinates are drawn
    uniformly (seeded) from all parameters.  The numeric derivative uses the
    fourth-order central stencil
    ``(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h``; the relative error of
    a pair is ``|a - n| / max(|a| + |n|, floor)``.
    """
    if len(sample.without_terminator()) == 0:
        raise ForecastError("gradient check needs a non-empty sequence")
    if sample.window != model.cfg.window:
        raise ForecastError("sample window differs from model window")
    m64 = copy.deepcopy(model).double()
    m64.zero_grad()
    batch = make_batch([sample], m64.cfg.window)
    batch_forward(m64, batch).loss.backward()
    params = list(m64.parameters())
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    gen = np.random.default_rng(seed)
    picks = gen.choice(offsets[-1], size=min(num_params, int(offsets[-1])), replace=False)

    def f() -> float:
        return float(batch_forward(m64, batch).loss)

    worst = 0.0
    with torch.no_grad():
        for flat in sorted(picks.tolist()):
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            view = params[k].view(-1)
            j = flat - offsets[k]
            analytic = float(params[k].grad.view(-1)[j])
            orig = float(view[j])
            vals = []
            for step in (2, 1, -1, -2):
                view[j] = orig + step * eps
                vals.append(f())
            view[j] = orig
            numeric = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# inference


def _encode_prefix(model: ForecastModel, s: SequenceEncoding):
    n = len(s.node_codes)
    M = model.cfg.window
    prev_codes = torch.full((n + 1, 1), SOS, dtype=torch.long)
    prev_adj = torch.full((n + 1, 1, M), -1, dtype=torch.long)
    for i, code in enumerate(s.node_codes):
        prev_codes[i + 1, 0] = code
        vec = s.adj_vectors[i]
        if vec:
            prev_adj[i + 1, 0, :len(vec)] = torch.as_tensor(vec)
    return prev_codes, prev_adj


def _choose(logits: torch.Tensor, gen: torch.Generator | None) -> int:
    if gen is None:
        return int(logits.argmax())
    probs = torch.softmax(logits.double(), dim=-1)
    return int(torch.multinomial(probs, 1, generator=gen))


def predict_encoding(model: ForecastModel, s: SequenceEncoding, mode: str = "greedy",
                     seed: int = 0) -> tuple[int, tuple[int, ...]]:
    if mode not in ("greedy", "sample"):
        raise ForecastError(f"unknown mode {mode!r}")
    s = s.without_terminator()
    if s.window != model.cfg.window:
        raise ForecastError("encoding window differs from model window")
    n = len(s.node_codes)
    if n + 1 > model.cfg.max_nodes:
        raise ForecastError(f"graph exceeds max_nodes={model.cfg.max_nodes}")
    gen = None
    if mode == "sample":
        gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        h, logits = model.run_nodes(*_encode_prefix(model, s))
        code = _choose(logits[-1, 0], gen)
        if code == TERMINATOR:
            return code, ()
        m = min(n, model.cfg.window)
        state = model.edge_state(h[-1])
        x = model.edge_node_embed(torch.tensor([code]))
        vec = []
        for _ in range(m):
            state = model.edge_rnn.step(x, state)
            e = _choose(model.edge_head(state[-1])[0], gen)
            vec.append(e)
            x = model.edge_code_embed(torch.tensor([e]))
    return code, tuple(vec)


def predict_next(model: ForecastModel, g: AttackGraph, mode: str = "greedy",
                 seed: int = 0) -> tuple[int, tuple[int, ...]]:
    """Next node code and its adjacency vector (nearest predecessor first)."""
    return predict_encoding(model, to_sequence(g, model.cfg.window), mode, seed)


def node_distribution(model: ForecastModel, g: AttackGraph) -> torch.Tensor:
    with torch.no_grad():
        _, logits = model.run_nodes(*_encode_prefix(model, to_sequence(g, model.cfg.window)))
    return torch.softmax(logits[-1, 0].double(), dim=-1)


@dataclass
class StopCriterion:
    """When to stop extending a graph.

    ``investigate(original, current)`` is the graph-investigation hook; the
    default fires when the matched-template count grows (needs ``templates``).
    """

    budget: int = 5
    templates: Sequence | None = None
    align_cfg: object | None = None
    investigate: Callable[[AttackGraph, AttackGraph], bool] | None = None

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be >= 0")


@dataclass
class ForecastTrace:
    graph: AttackGraph
    steps: int
    reason: str
    diagnostics: list[str] = field(default_factory=list)


def atg_count_increased(templates, align_cfg=None) -> Callable[[AttackGraph, AttackGraph], bool]:
    from .alignment import AlignmentConfig, interpret
    cfg = align_cfg or AlignmentConfig()
    cache: dict[int, int] = {}

    def fired(original: AttackGraph, current: AttackGraph) -> bool:
        key = id(original)
        if key not in cache:
            cache[key] = len(interpret(original, templates, cfg))
        return len(interpret(current, templates, cfg)) > cache[key]
    return fired


def extend_graph(g: AttackGraph, code: int, vec: Sequence[int],
                 diagnostics: list[str] | None = None) -> AttackGraph:
    """Append a forecast node with attribute ``code`` and edges from ``vec``."""
    attr = EntityAttr.from_code(code)
    n = len(g.nodes)
    new_id = f"f{n}"
    while new_id in g.node_map:
        new_id += "_"
    node = Node(new_id, attr, n, forecast=True)
    seq = (g.edges[-1].seq + 1) if g.edges else 0
    edges = list(g.edges)
    for j, ecode in enumerate(vec):
        if ecode == 0:
            continue
        older = g.nodes[n - 1 - j]
        ev = EventType.from_code(ecode)
        orient = orient_edge(older.attr, attr, ev)
        if orient is None:
            msg = f"dropped forecast edge {ev.value} between {older.attr.value} and {attr.value}"
            logger.info(msg)
            if diagnostics is not None:
                diagnostics.append(msg)
            continue
        src, dst = (older.id, new_id) if orient else (new_id, older.id)
        edges.append(Edge(src, dst, ev, seq, forecast=True))
        seq += 1
    return AttackGraph(g.nodes + (node,), tuple(edges), Role.AFG, g.provenance)


def forecast_trace(model: ForecastModel, apg: AttackGraph, stop: StopCriterion | None = None,
                   mode: str = "greedy", seed: int = 0) -> ForecastTrace:
    stop = stop or StopCriterion()
    fired = stop.investigate
    if fired is None and stop.templates is not None:
        fired = atg_count_increased(stop.templates, stop.align_cfg)
    g = apg.with_role(Role.AFG)
    diags: list[str] = []
    for step in range(stop.budget):
        code, vec = predict_next(model, g, mode, seed + step)
        if code == TERMINATOR:
            return ForecastTrace(g, step, "terminator", diags)
        g = extend_graph(g, code, vec, diags)
        if fired is not None and fired(apg, g):
            return ForecastTrace(g, step + 1, "investigation", diags)
    if fired is not None:
        diags.append("no ATG-count increase within budget")
    return ForecastTrace(g, stop.budget, "budget", diags)


def forecast(model: ForecastModel, apg: AttackGraph, stop: StopCriterion | None = None,
             mode: str = "greedy", seed: int = 0) -> AttackGraph:
    """Extend ``apg`` with predicted nodes and edges (role AFG)."""
    return forecast_trace(model, apg, stop, mode, seed).graph


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ForecastModel, path: str | Path) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.cfg),
            "num_node_codes": model.num_node_codes, "num_edge_codes": model.num_edge_codes,
            "dtype": str(model.dtype).replace("torch.", "")}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> ForecastModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ForecastError(f"unsupported checkpoint version {meta.get('version')}")
        if (meta["num_node_codes"], meta["num_edge_codes"]) != (NUM_NODE_CODES, NUM_EDGE_CODES):
            raise ForecastError("checkpoint vocabulary sizes do not match")
        cfg = ModelConfig(**meta["config"])
        model = ForecastModel(cfg)
        if meta.get("dtype") == "float64":
            model = model.double()
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    model.eval()
    return model


def config_with(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
