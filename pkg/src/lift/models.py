"""Models: typed-edge message-passing graph encoder, a small causal
transformer over token sequences, and grammar-constrained decoding that can
only emit domain-valid pragma configs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import BOS_ID, EOS_ID, Tokenizer, UNK_ID
from .graph import EDGE_KINDS, FEATURE_DIM, ProgramGraph
from .kernel import Kernel, PragmaValue, slot_domains
from .seeding import rng_for

# ---------------------------------------------------------------------------
# Graph batching


@dataclass
class GraphBatch:
    features: np.ndarray  # [n_nodes_total, FEATURE_DIM]
    edges: dict[str, tuple[np.ndarray, np.ndarray]]  # kind -> (src, dst)
    graph_id: np.ndarray  # [n_nodes_total]
    node_counts: np.ndarray  # [n_graphs]

    @property
    def n_graphs(self) -> int:
        return len(self.node_counts)


def batch_graphs(graphs: Sequence[ProgramGraph]) -> GraphBatch:
    feats = []
    gid = []
    counts = []
    edges: dict[str, tuple[list[int], list[int]]] = {k: ([], []) for k in EDGE_KINDS}
    offset = 0
    for i, g in enumerate(graphs):
        feats.append(g.features)
        gid.append(np.full(g.n_nodes, i, dtype=np.int64))
        counts.append(g.n_nodes)
        for src, dst, kind in g.edges:
            edges[kind][0].append(src + offset)
            edges[kind][1].append(dst + offset)
        offset += g.n_nodes
    return GraphBatch(
        features=np.concatenate(feats, axis=0),
        edges={
            k: (np.asarray(s, dtype=np.int64), np.asarray(d, dtype=np.int64))
            for k, (s, d) in edges.items()
        },
        graph_id=np.concatenate(gid),
        node_counts=np.asarray(counts, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Graph encoder


@dataclass(frozen=True)
class GnnConfig:
    hidden: int = 64
    out_dim: int = 64
    layers: int = 3


class GraphEncoder:
    """Message passing with one weight matrix per (edge kind, direction)
    per layer, softplus activations, mean pooling, linear readout."""

    def __init__(self, cfg: GnnConfig = GnnConfig(), seed: int = 0):
        self.cfg = cfg
        rng = rng_for(seed, "gnn-init")
        h, d = cfg.hidden, cfg.out_dim
        p: dict[str, Tensor] = {}

        def weight(name: str, shape: tuple[int, ...], scale: float) -> None:
            p[name] = Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

        weight("w_in", (FEATURE_DIM, h), 0.3)
        p["b_in"] = Tensor(np.zeros(h), requires_grad=True)
        for layer in range(cfg.layers):
            weight(f"l{layer}.w_self", (h, h), 0.15)
            for kind in EDGE_KINDS:
                weight(f"l{layer}.w_fwd.{kind}", (h, h), 0.08)
                weight(f"l{layer}.w_rev.{kind}", (h, h), 0.08)
            p[f"l{layer}.b"] = Tensor(np.zeros(h), requires_grad=True)
        weight("w_out", (h, d), 0.15)
        p["b_out"] = Tensor(np.zeros(d), requires_grad=True)
        self.p = p

    def parameters(self) -> list[Tensor]:
        return list(self.p.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.p.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.p) ^ set(state)
        if missing:
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in self.p.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            v.data = arr.copy()

    def forward(self, batch: GraphBatch) -> Tensor:
        """Embeddings for every graph in the batch: [n_graphs, out_dim]."""
        n = batch.features.shape[0]
        p = self.p
        h = ad.softplus(ad.matmul(Tensor(batch.features), p["w_in"]) + p["b_in"])
        for layer in range(self.cfg.layers):
            m = ad.matmul(h, p[f"l{layer}.w_self"]) + p[f"l{layer}.b"]
            for kind in EDGE_KINDS:
                src, dst = batch.edges[kind]
                if src.size == 0:
                    continue
                fwd = ad.matmul(ad.take_rows(h, src), p[f"l{layer}.w_fwd.{kind}"])
                m = m + ad.segment_sum(fwd, dst, n)
                rev = ad.matmul(ad.take_rows(h, dst), p[f"l{layer}.w_rev.{kind}"])
                m = m + ad.segment_sum(rev, src, n)
            h = ad.softplus(m)
        pooled = ad.segment_sum(h, batch.graph_id, batch.n_graphs)
        pooled = ad.mul(pooled, 1.0 / batch.node_counts[:, None])
        return ad.matmul(pooled, p["w_out"]) + p["b_out"]

    def encode(self, graph: ProgramGraph) -> np.ndarray:
        """Single-graph embedding as a plain array (no tape)."""
        with ad.no_grad():
            return self.forward(batch_graphs([graph])).data[0].copy()


# ---------------------------------------------------------------------------
# Sequence model


@dataclass(frozen=True)
class SeqConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 640


class SequenceModel:
    """Pre-norm causal transformer.  forward(ids) prepends an internal
    beginning-of-sequence token, so row t of the logits is the distribution
    of ids[t] given ids[:t] and row len(ids) predicts the next token."""

    def __init__(self, cfg: SeqConfig, seed: int = 0):
        if cfg.d_model % cfg.n_heads:
            raise ValueError("d_model must divide into heads")
        self.cfg = cfg
        rng = rng_for(seed, "seq-init")
        d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        p: dict[str, Tensor] = {}

        def weight(name: str, shape: tuple[int, ...], scale: float = 0.02) -> None:
            p[name] = Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

        def zeros(name: str, shape: tuple[int, ...]) -> None:
            p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name: str, shape: tuple[int, ...]) -> None:
            p[name] = Tensor(np.ones(shape), requires_grad=True)

        weight("emb", (v, d))
        weight("pos", (cfg.max_len, d))
        for i in range(cfg.n_layers):
            ones(f"l{i}.ln1_g", (d,))
            zeros(f"l{i}.ln1_b", (d,))
            for nm in ("wq", "wk", "wv", "wo"):
                weight(f"l{i}.{nm}", (d, d))
            for nm in ("bq", "bk", "bv", "bo"):
                zeros(f"l{i}.{nm}", (d,))
            ones(f"l{i}.ln2_g", (d,))
            zeros(f"l{i}.ln2_b", (d,))
            weight(f"l{i}.w1", (d, f))
            zeros(f"l{i}.b1", (f,))
            weight(f"l{i}.w2", (f, d))
            zeros(f"l{i}.b2", (d,))
        ones("lnf_g", (d,))
        zeros("lnf_b", (d,))
        weight("w_lm", (d, v))
        zeros("b_lm", (v,))
        self.p = p

    def parameters(self) -> list[Tensor]:
        return list(self.p.values())

    def param_count(self) -> int:
        return sum(t.data.size for t in self.p.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.p.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.p) ^ set(state)
        if missing:
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in self.p.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            v.data = arr.copy()

    def forward_hidden(self, ids: Sequence[int]) -> Tensor:
        cfg, p = self.cfg, self.p
        seq = np.asarray([BOS_ID] + list(ids), dtype=np.int64)
        t = len(seq)
        if t > cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
        x = ad.take_rows(p["emb"], seq) + ad.take_rows(p["pos"], np.arange(t))
        bias = Tensor(np.triu(np.full((t, t), -1e30), k=1))
        dh = cfg.d_model // cfg.n_heads
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_layers):
            a = ad.layer_norm(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            q = ad.matmul(a, p[f"l{i}.wq"]) + p[f"l{i}.bq"]
            k = ad.matmul(a, p[f"l{i}.wk"]) + p[f"l{i}.bk"]
            v = ad.matmul(a, p[f"l{i}.wv"]) + p[f"l{i}.bv"]
            heads = []
            for hh in range(cfg.n_heads):
                lo, hi = hh * dh, (hh + 1) * dh
                qh = ad.col_slice(q, lo, hi)
                kh = ad.col_slice(k, lo, hi)
                vh = ad.col_slice(v, lo, hi)
                scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale) + bias
                heads.append(ad.matmul(ad.softmax(scores), vh))
            att = ad.matmul(ad.concat_last(heads), p[f"l{i}.wo"]) + p[f"l{i}.bo"]
            x = x + att
            a2 = ad.layer_norm(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            inner = ad.gelu(ad.matmul(a2, p[f"l{i}.w1"]) + p[f"l{i}.b1"])
            x = x + (ad.matmul(inner, p[f"l{i}.w2"]) + p[f"l{i}.b2"])
        return ad.layer_norm(x, p["lnf_g"], p["lnf_b"])

    def forward(self, ids: Sequence[int]) -> Tensor:
        """Logits [len(ids) + 1, vocab_size]."""
        h = self.forward_hidden(ids)
        return ad.matmul(h, self.p["w_lm"]) + self.p["b_lm"]

    def hidden_last(self, ids: Sequence[int]) -> np.ndarray:
        """Final-position hidden state after the last norm (no tape)."""
        with ad.no_grad():
            return self.forward_hidden(ids).data[-1].copy()


# ---------------------------------------------------------------------------
# Constrained decoding


@dataclass
class _TrieNode:
    end: PragmaValue | None = None
    children: dict[int, "_TrieNode"] = field(default_factory=dict)


@dataclass
class SlotPlan:
    slots: list[tuple[str, int, _TrieNode]]  # (slot id, slot id token, values)
    eq_token: int
    comma_token: int


def build_slot_plan(ast: Kernel, tok: Tokenizer, max_factor: int) -> SlotPlan:
    """Precompute, per slot in source order, the token trie of its legal
    serialized values."""

    def tid(text: str) -> int:
        i = tok.index.get(text, UNK_ID)
        if i == UNK_ID:
            raise ValueError(f"token {text!r} missing from vocabulary")
        return i

    slots = []
    for sid, dom in slot_domains(ast, max_factor).items():
        root = _TrieNode()
        for value in dom:
            node = root
            for piece in [tid(c) for c in _value_pieces(value)]:
                node = node.children.setdefault(piece, _TrieNode())
            node.end = value
        slots.append((sid, tid(sid), root))
    return SlotPlan(slots=slots, eq_token=tid("="), comma_token=tid(","))


def _value_pieces(value: PragmaValue) -> list[str]:
    if isinstance(value, int):
        return list(str(value))
    return [value]


@dataclass
class DecodeStep:
    position: int  # index of the chosen token in the full sequence
    allowed: list[int]  # legal token ids at this step, ascending
    token: int


@dataclass
class DecodeResult:
    tokens: list[int]  # generated region (everything after the prefix)
    steps: list[DecodeStep]
    config: dict[str, PragmaValue]


def decode_constrained(
    model: SequenceModel,
    plan: SlotPlan,
    prefix_ids: Sequence[int],
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    forced: Sequence[int] | None = None,
) -> DecodeResult:
    """Generate the pragma-config region under the slot grammar.

    Illegal tokens are excluded outright, so any decode yields a complete,
    domain-valid config.  Forced steps (a single legal token) skip the model
    call.  mode 'sample' draws from the temperature-scaled masked softmax
    using the supplied generator; 'greedy' takes the argmax with ties going
    to the lowest token id.  A non-None `forced` replays that exact token
    sequence through the grammar (no model calls), recording the same legal
    masks a live decode would have seen.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"bad decode mode {mode!r}")
    if mode == "sample" and rng is None and forced is None:
        raise ValueError("sample mode needs an rng")
    ids = list(prefix_ids)
    steps: list[DecodeStep] = []
    config: dict[str, PragmaValue] = {}

    def choose(allowed: list[int]) -> int:
        if forced is not None:
            if len(steps) >= len(forced):
                raise ValueError("forced token sequence too short")
            token = forced[len(steps)]
            if token not in allowed:
                raise ValueError(f"forced token {token} not legal at this step")
        elif len(allowed) == 1:
            token = allowed[0]
        else:
            with ad.no_grad():
                logits = model.forward(ids).data[-1]
            sub = logits[allowed]
            if mode == "greedy":
                token = allowed[int(np.argmax(sub))]
            else:
                z = (sub - sub.max()) / temperature
                prob = np.exp(z)
                prob /= prob.sum()
                assert rng is not None
                token = allowed[int(rng.choice(len(allowed), p=prob))]
        steps.append(DecodeStep(position=len(ids), allowed=list(allowed), token=token))
        ids.append(token)
        return token

    for i, (sid, id_tok, root) in enumerate(plan.slots):
        choose([id_tok])
        choose([plan.eq_token])
        terminator = plan.comma_token if i + 1 < len(plan.slots) else EOS_ID
        node = root
        while True:
            allowed = sorted(node.children)
            if node.end is not None:
                allowed.append(terminator)
                allowed.sort()
            token = choose(allowed)
            if token == terminator and node.end is not None:
                config[sid] = node.end
                break
            node = node.children[token]
    if not plan.slots:
        choose([EOS_ID])
    if forced is not None and len(forced) != len(steps):
        raise ValueError("forced token sequence too long")
    return DecodeResult(tokens=ids[len(prefix_ids) :], steps=steps, config=config)


def score_steps(
    model: SequenceModel, full_ids: Sequence[int], steps: Sequence[DecodeStep]
) -> Tensor:
    """Mean log-probability of the chosen tokens under the same legal-token
    masks used at decode time.  Differentiable; forced steps contribute 0."""
    logits = model.forward(full_ids)
    positions = np.asarray([s.position for s in steps], dtype=np.int64)
    tokens = np.asarray([s.token for s in steps], dtype=np.int64)
    mask = np.full((len(steps), logits.data.shape[1]), -1e30)
    for row, s in enumerate(steps):
        mask[row, s.allowed] = 0.0
    rows = ad.take_rows(logits, positions)
    masked = ad.add(rows, Tensor(mask))
    logp = ad.log_softmax(masked)
    picked = ad.take_at(logp, np.arange(len(steps)), tokens)
    return ad.tmean(picked)
