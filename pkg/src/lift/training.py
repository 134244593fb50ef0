"""Training pipeline: encoder pretraining, the combined weighted objective,
prediction, and oracle-backed evaluation.

The decode -> substitute -> graph -> embed path is not differentiable, so the
embedding-distance term reaches the sequence model through a score-function
surrogate: alpha * (d - b) * mean log p(sampled tokens), where d is the squared
L2 distance between the embeddings of the predicted and target designs and b is
an EMA baseline of d.  Gradients flow only through the log-probabilities.  The
graph encoder is trained once, up front, on a latency-regression task and then
frozen; only the sequence model updates afterwards.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .checkpoint import save_params
from .corpus import Corpus, DesignPoint
from .dataset import (
    SEP_ID,
    Tokenizer,
    TrainingExample,
    deserialize_config,
    linearize,
)
from .graph import ProgramGraph, build_graph
from .kernel import (
    DEFAULT_MAX_FACTOR,
    Kernel,
    KernelError,
    PragmaValue,
    enumerate_space,
    extract_slots,
    parse_kernel,
)
from .latency import ResourceBudget, estimate
from .models import (
    GnnConfig,
    GraphEncoder,
    SequenceModel,
    SlotPlan,
    batch_graphs,
    build_slot_plan,
    decode_constrained,
    score_steps,
)
from .seeding import rng_for

# ---------------------------------------------------------------------------
# encoder pretraining


@dataclass
class PretrainConfig:
    epochs: int = 25
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PretrainResult:
    encoder: GraphEncoder
    head_w: np.ndarray  # [out_dim, 1] linear regression head
    head_b: np.ndarray  # [1]
    history: list[dict]


def corpus_graphs(
    corpus: Corpus, max_factor: int = DEFAULT_MAX_FACTOR
) -> tuple[list[ProgramGraph], np.ndarray]:
    """Build one graph per design point, in corpus point order.

    Returns the graphs and the raw perf labels (0 for invalid points)."""
    asts = {kid: parse_kernel(src) for kid, src in corpus.kernels.items()}
    graphs = [
        build_graph(asts[p.kernel_id], p.point, max_factor=max_factor)
        for p in corpus.points
    ]
    perfs = np.array([p.perf for p in corpus.points], dtype=np.float64)
    return graphs, perfs


def pretrain_gnn(
    graphs: Sequence[ProgramGraph],
    perfs: np.ndarray,
    config: PretrainConfig,
    gnn_config: GnnConfig | None = None,
    val_graphs: Sequence[ProgramGraph] | None = None,
    val_perfs: np.ndarray | None = None,
    verbose: bool = False,
) -> PretrainResult:
    """Train encoder + scalar head to regress log(1+perf); freeze the encoder.

    Invalid points carry perf 0, so their regression target is exactly 0.
    The head is kept only for inspection (rank-correlation checks); the LIFT
    loop uses the frozen encoder alone.
    """
    if len(graphs) == 0:
        raise ValueError("empty pretraining set")
    if len(graphs) != len(perfs):
        raise ValueError("graphs and perfs length mismatch")
    targets = np.log1p(np.asarray(perfs, dtype=np.float64))

    encoder = GraphEncoder(gnn_config or GnnConfig(), seed=config.seed)
    rng = rng_for(config.seed, "pretrain-head")
    head_w = Tensor(
        rng.normal(0.0, 0.1, size=(encoder.cfg.out_dim, 1)), requires_grad=True
    )
    head_b = Tensor(np.zeros(1), requires_grad=True)
    params = encoder.parameters() + [head_w, head_b]
    opt = Adam(params, lr=config.lr)

    history: list[dict] = []
    n = len(graphs)
    for epoch in range(1, config.epochs + 1):
        order = rng_for(config.seed, "pretrain-shuffle", epoch).permutation(n)
        sq_sum = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = batch_graphs([graphs[i] for i in idx])
            emb = encoder.forward(batch)
            pred = ad.add(ad.matmul(emb, head_w), head_b)
            diff = ad.sub(pred, Tensor(targets[idx][:, None]))
            loss = ad.tmean(ad.mul(diff, diff))
            for p in params:
                p.grad = None
            loss.backward()
            opt.step()
            sq_sum += loss.item() * len(idx)
        row = {"epoch": epoch, "train_mse": sq_sum / n}
        if val_graphs is not None and val_perfs is not None:
            vp = predict_log_latency(encoder, head_w.data, head_b.data, val_graphs)
            row["val_mse"] = float(
                np.mean((vp - np.log1p(np.asarray(val_perfs))) ** 2)
            )
        history.append(row)
        if verbose:
            print("pretrain " + " ".join(f"{k}={v!r}" for k, v in row.items()))

    for p in encoder.parameters():
        p.requires_grad = False
    return PretrainResult(
        encoder=encoder, head_w=head_w.data, head_b=head_b.data, history=history
    )


def predict_log_latency(
    encoder: GraphEncoder,
    head_w: np.ndarray,
    head_b: np.ndarray,
    graphs: Sequence[ProgramGraph],
    batch_size: int = 256,
) -> np.ndarray:
    """Head outputs for a list of graphs (no gradients)."""
    out = np.empty(len(graphs), dtype=np.float64)
    with ad.no_grad():
        for lo in range(0, len(graphs), batch_size):
            chunk = graphs[lo : lo + batch_size]
            emb = encoder.forward(batch_graphs(chunk)).data
            out[lo : lo + len(chunk)] = (emb @ head_w + head_b)[:, 0]
    return out


def rank_correlation(pred: np.ndarray, target: np.ndarray) -> float:
    """Spearman rank correlation."""
    return float(stats.spearmanr(pred, target).statistic)


# ---------------------------------------------------------------------------
# LIFT loss


@dataclass
class LossParts:
    l_ce: float
    d_embed: float  # squared embedding distance, logged as the graph loss
    surrogate: float
    weight: float
    total: float


@dataclass
class KernelContext:
    ast: Kernel
    plan: SlotPlan


def prepare_contexts(
    sources: Mapping[str, str], tok: Tokenizer, max_factor: int = DEFAULT_MAX_FACTOR
) -> dict[str, KernelContext]:
    out = {}
    for kid in sorted(sources):
        ast = parse_kernel(sources[kid])
        out[kid] = KernelContext(ast=ast, plan=build_slot_plan(ast, tok, max_factor))
    return out


class EmbeddingCache:
    """Frozen-encoder embeddings memoized per (kernel, config).

    Identical configs hit the same entry, so the distance between a prediction
    and its target is exactly 0.0 whenever they agree.
    """

    def __init__(
        self,
        encoder: GraphEncoder,
        contexts: Mapping[str, KernelContext],
        max_factor: int = DEFAULT_MAX_FACTOR,
    ) -> None:
        self.encoder = encoder
        self.contexts = contexts
        self.max_factor = max_factor
        self._memo: dict[tuple, np.ndarray] = {}

    def embedding(self, kernel_id: str, config: Mapping[str, PragmaValue]) -> np.ndarray:
        key = (kernel_id, tuple(sorted(config.items())))
        hit = self._memo.get(key)
        if hit is None:
            graph = build_graph(
                self.contexts[kernel_id].ast, config, max_factor=self.max_factor
            )
            hit = self._memo[key] = self.encoder.encode(graph)
        return hit

    def distance(
        self,
        kernel_id: str,
        pred: Mapping[str, PragmaValue],
        target: Mapping[str, PragmaValue],
    ) -> float:
        a = self.embedding(kernel_id, pred)
        b = self.embedding(kernel_id, target)
        return float(((a - b) ** 2).sum())


def masked_ce(
    model: SequenceModel,
    input_ids: Sequence[int],
    label_ids: Sequence[int],
    mask: Sequence[bool],
) -> Tensor:
    """Mean cross-entropy over masked-in positions under teacher forcing.

    Inputs and labels are deliberately separate arguments: the loss is a
    function of the label only where mask is True, so perturbing a masked-out
    label leaves the value bit-identical.
    """
    mask_arr = np.asarray(mask, dtype=bool)
    positions = np.flatnonzero(mask_arr)
    labels = np.asarray(label_ids, dtype=np.int64)[positions]
    logits = model.forward(input_ids)  # row t scores the token at position t
    rows = ad.take_rows(logits, positions)
    logp = ad.log_softmax(rows)
    picked = ad.take_at(logp, np.arange(len(positions)), labels)
    return ad.mul(ad.tmean(picked), Tensor(np.float64(-1.0)))


def example_target(
    example: TrainingExample, tok: Tokenizer
) -> tuple[list[int], dict[str, PragmaValue]]:
    """Recover (prefix ids through the separator, target config) from tokens."""
    mask = np.asarray(example.mask, dtype=bool)
    first = int(np.argmax(mask))
    prefix = list(example.tokens[:first])
    target_text = tok.decode(example.tokens[first:-1])  # drop the end marker
    return prefix, deserialize_config(target_text)


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 8
    lr: float = 3e-4
    seed: int = 0
    alpha: float = 1.0  # coefficient on the embedding-distance surrogate
    ema_beta: float = 0.9  # baseline decay
    d_fail_scale: float = 4.0  # distance charged if a decode fails to embed
    max_factor: int = DEFAULT_MAX_FACTOR
    val_decode_n: int = 32  # validation examples greedily decoded per epoch
    deterministic: bool = True  # log wall_seconds as 0.0 for byte-stable output
    checkpoint_dir: str | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ValueError("ema_beta must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def compute_loss(
    example: TrainingExample,
    model: SequenceModel,
    cache: EmbeddingCache,
    tok: Tokenizer,
    ema_baseline: float,
    config: TrainConfig,
    rng: np.random.Generator | None,
    forced_tokens: Sequence[int] | None = None,
) -> tuple[Tensor, LossParts, dict[str, PragmaValue]]:
    """Weighted CE plus the score-function surrogate for one train example.

    The sampled decode and the graph/embedding path carry no gradient; the
    surrogate couples the distance d to the model only through the mean log
    probability of the sampled tokens.  The returned tensor satisfies
    total == weight*l_ce + weight*surrogate bit-exactly (same float ops).
    forced_tokens replays a fixed generated region instead of sampling, for
    tests that pin the decode.
    """
    ce = masked_ce(model, example.tokens, example.tokens, example.mask)

    prefix, target = example_target(example, tok)
    plan = cache.contexts[example.kernel_id].plan
    if forced_tokens is not None:
        dec = decode_constrained(model, plan, prefix, forced=forced_tokens)
    else:
        dec = decode_constrained(
            model, plan, prefix, mode="sample", rng=rng, temperature=1.0
        )
    try:
        d = cache.distance(example.kernel_id, dec.config, target)
    except KernelError:  # unreachable by construction; charged a fixed penalty
        d = config.d_fail_scale * max(ema_baseline, 1.0)

    scored = config.alpha != 0.0 and any(len(s.allowed) > 1 for s in dec.steps)
    if scored:
        mean_logp = score_steps(model, prefix + dec.tokens, dec.steps)
        surr = mean_logp * (config.alpha * (d - ema_baseline))
    else:
        # all-forced decodes have mean log p exactly 0, so the term vanishes
        surr = Tensor(np.float64(0.0))

    w = example.weight
    total = ce * w + surr * w
    parts = LossParts(
        l_ce=ce.item(),
        d_embed=d,
        surrogate=surr.item(),
        weight=w,
        total=total.item(),
    )
    return total, parts, dec.config


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: SequenceModel
    metrics: list[dict]
    ema_baseline: float


def _validation_metrics(
    model: SequenceModel,
    val_examples: Sequence[TrainingExample],
    cache: EmbeddingCache,
    tok: Tokenizer,
    n_decode: int,
) -> tuple[float, float]:
    """Mean masked CE over the split and mean greedy-decode embedding
    distance over its first n_decode examples."""
    if not val_examples:
        return math.nan, math.nan
    with ad.no_grad():
        ce_sum = 0.0
        for ex in val_examples:
            ce_sum += masked_ce(model, ex.tokens, ex.tokens, ex.mask).item()
        d_sum = 0.0
        subset = val_examples[: max(n_decode, 1)]
        for ex in subset:
            prefix, target = example_target(ex, tok)
            plan = cache.contexts[ex.kernel_id].plan
            dec = decode_constrained(model, plan, prefix, mode="greedy")
            d_sum += cache.distance(ex.kernel_id, dec.config, target)
    return ce_sum / len(val_examples), d_sum / len(subset)


def train(
    train_examples: Sequence[TrainingExample],
    val_examples: Sequence[TrainingExample],
    model: SequenceModel,
    encoder: GraphEncoder,
    contexts: Mapping[str, KernelContext],
    tok: Tokenizer,
    config: TrainConfig,
    verbose: bool = True,
) -> TrainResult:
    """Optimize the sequence model under the combined weighted objective.

    The encoder never updates here.  One optimizer step per batch (gradients
    averaged over the batch); the EMA baseline folds in each example's
    distance after the step, in batch order.  Aborts on non-finite loss.
    """
    if not train_examples:
        raise ValueError("empty training set")
    cache = EmbeddingCache(encoder, contexts, max_factor=config.max_factor)
    opt = Adam(model.parameters(), lr=config.lr)
    baseline = 0.0
    metrics: list[dict] = []
    n = len(train_examples)
    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        order = rng_for(config.seed, "shuffle", epoch).permutation(n)
        ce_sum = 0.0
        d_sum = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            inv = 1.0 / len(idx)
            batch_ds: list[float] = []
            for p in model.parameters():
                p.grad = None
            for visit, i in enumerate(idx, start=lo):
                ex = train_examples[int(i)]
                rng = rng_for(config.seed, "decode", epoch, visit)
                total, parts, _ = compute_loss(
                    ex, model, cache, tok, baseline, config, rng
                )
                if not math.isfinite(parts.total):
                    raise RuntimeError(
                        f"divergence: non-finite loss at epoch {epoch}"
                    )
                (total * inv).backward()
                ce_sum += parts.l_ce
                d_sum += parts.d_embed
                batch_ds.append(parts.d_embed)
            opt.step()
            for d in batch_ds:
                baseline = config.ema_beta * baseline + (1.0 - config.ema_beta) * d
        val_ce, val_d = _validation_metrics(
            model, val_examples, cache, tok, config.val_decode_n
        )
        row = {
            "epoch": epoch,
            "mean_ce": ce_sum / n,
            "mean_gnn_distance": d_sum / n,
            "val_ce": val_ce,
            "val_gnn_distance": val_d,
            "wall_seconds": 0.0
            if config.deterministic
            else time.monotonic() - started,
        }
        metrics.append(row)
        if verbose:
            print("train " + " ".join(f"{k}={v!r}" for k, v in row.items()))
        if config.checkpoint_dir is not None:
            ckdir = Path(config.checkpoint_dir)
            ckdir.mkdir(parents=True, exist_ok=True)
            save_params(ckdir / f"model-epoch{epoch}.ckpt", model.state())
    return TrainResult(model=model, metrics=metrics, ema_baseline=baseline)


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict(
    model: SequenceModel,
    tok: Tokenizer,
    source: str,
    max_factor: int = DEFAULT_MAX_FACTOR,
) -> dict[str, PragmaValue]:
    """Greedy constrained decode; always returns a complete domain-valid
    config (empty for slot-free kernels)."""
    ast = parse_kernel(source)
    plan = build_slot_plan(ast, tok, max_factor)
    prefix = tok.encode(source) + [SEP_ID]
    return decode_constrained(model, plan, prefix, mode="greedy").config


def _default_config(ast: Kernel) -> dict[str, PragmaValue]:
    return {
        s.id: "off" if s.kind == "PIPELINE" else 1 for s in extract_slots(ast)
    }


def _geomean(values: Sequence[float]) -> float:
    if not values:
        return math.nan
    return float(np.exp(np.mean(np.log(np.asarray(values, dtype=np.float64)))))


def evaluate(
    model: SequenceModel | None,
    tok: Tokenizer | None,
    corpus: Corpus,
    budget: ResourceBudget = ResourceBudget(),
    n_random: int = 100,
    seed: int = 0,
    max_factor: int = DEFAULT_MAX_FACTOR,
    exhaustive_cap: int = 10_000,
    predict_fn: Callable[[str, str], Mapping[str, PragmaValue]] | None = None,
) -> dict:
    """Score predicted configs against the analytic oracle, kernel by kernel.

    For each kernel: the predicted config's cycles/validity, the median cycles
    of n_random uniform draws from the valid part of the space, the exhaustive
    optimum when the space is small enough, and an all-defaults sanity row.
    Kernels with no valid config under the budget are skipped with a warning.
    predict_fn(kernel_id, source) overrides the model path (used in tests).
    """
    if predict_fn is None:
        if model is None or tok is None:
            raise ValueError("need a model and tokenizer, or a predict_fn")
        predict_fn = lambda kid, src: predict(model, tok, src, max_factor)

    rows: list[dict] = []
    skipped: list[str] = []
    for kid in sorted(corpus.kernels):
        source = corpus.kernels[kid]
        ast = parse_kernel(source)
        configs = enumerate_space(ast, max_factor)
        reports = [estimate(ast, c, budget, max_factor) for c in configs]
        valid_idx = [i for i, r in enumerate(reports) if r.valid]
        if not valid_idx:
            warnings.warn(f"kernel {kid}: no valid configs under budget, skipped")
            skipped.append(kid)
            continue
        valid_cycles = np.array([reports[i].cycles for i in valid_idx], dtype=np.float64)

        pred = dict(predict_fn(kid, source))
        pred_report = estimate(ast, pred, budget, max_factor)

        rng = rng_for(seed, "eval-random", kid)
        draws = valid_cycles[rng.integers(0, len(valid_idx), size=n_random)]
        median_random = float(np.median(draws))

        best_cycles = None
        if len(configs) <= exhaustive_cap:
            best_cycles = int(valid_cycles.min())

        rows.append(
            {
                "kernel_id": kid,
                "space": len(configs),
                "n_valid": len(valid_idx),
                "predicted": {k: pred[k] for k in sorted(pred)},
                "pred_cycles": pred_report.cycles,
                "pred_units": pred_report.units,
                "pred_valid": pred_report.valid,
                "median_random_valid": median_random,
                "speedup_vs_random": median_random / pred_report.cycles,
                "best_cycles": best_cycles,
                "regret": (
                    pred_report.cycles / best_cycles
                    if best_cycles is not None
                    else None
                ),
                "default_cycles": estimate(
                    ast, _default_config(ast), budget, max_factor
                ).cycles,
            }
        )

    n_eval = len(rows)
    frac_valid = (
        sum(1 for r in rows if r["pred_valid"]) / n_eval if n_eval else math.nan
    )
    speedups = [r["speedup_vs_random"] for r in rows]
    speedups_valid = [r["speedup_vs_random"] for r in rows if r["pred_valid"]]
    regrets = [r["regret"] for r in rows if r["regret"] is not None and r["pred_valid"]]
    aggregates = {
        "n_kernels": n_eval,
        "n_skipped": len(skipped),
        "frac_pred_oracle_valid": frac_valid,
        "median_pred_cycles": (
            float(np.median([r["pred_cycles"] for r in rows])) if rows else math.nan
        ),
        "median_random_valid": (
            float(np.median([r["median_random_valid"] for r in rows]))
            if rows
            else math.nan
        ),
        "geomean_speedup_vs_random": _geomean(speedups),
        "geomean_speedup_valid_only": _geomean(speedups_valid),
        "geomean_regret": _geomean(regrets),
    }
    return {"rows": rows, "aggregates": aggregates, "skipped": skipped}


def export_embeddings(
    model: SequenceModel,
    encoder: GraphEncoder,
    tok: Tokenizer,
    corpus: Corpus,
    points: Sequence[DesignPoint],
    path: str | Path,
    max_factor: int = DEFAULT_MAX_FACTOR,
) -> int:
    """Write one CSV row per design point: the sequence model's final-position
    hidden state alongside the graph embedding.  Returns the row count."""
    asts: dict[str, Kernel] = {}
    orders: dict[str, list[str]] = {}
    line_no: dict[str, int] = {}
    header = (
        ["kernel_id", "point_index"]
        + [f"h{i}" for i in range(model.cfg.d_model)]
        + [f"g{i}" for i in range(encoder.cfg.out_dim)]
    )
    lines = [",".join(header)]
    for p in points:
        kid = p.kernel_id
        if kid not in asts:
            asts[kid] = parse_kernel(corpus.kernels[kid])
            orders[kid] = [s.id for s in extract_slots(asts[kid])]
        idx = line_no.get(kid, 0)
        line_no[kid] = idx + 1
        ex = linearize(corpus.kernels[kid], p.point, orders[kid], tok)
        hidden = model.hidden_last(ex.tokens)
        emb = encoder.encode(build_graph(asts[kid], p.point, max_factor=max_factor))
        cells = [kid, str(idx)]
        cells += [repr(float(v)) for v in hidden]
        cells += [repr(float(v)) for v in emb]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")
    return len(points)
