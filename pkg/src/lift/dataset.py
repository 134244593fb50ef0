"""Linearized training data: tokenizer, target serialization, loss masks.

An example is `tokens(x) ++ [<sep>] ++ tokens(serialize(y)) ++ [<eos>]`
with a mask that is False through the separator and True afterwards, so
loss lands only on the pragma-config region.  Tokenization is lossless:
joining the scanned pieces reproduces the input byte for byte.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from . import kernel as km
from .corpus import Corpus
from .kernel import Kernel, PragmaValue
from .weighting import ResampleParams, WeightParams, latency_to_weights, resample

SPECIALS = ("<pad>", "<unk>", "<sep>", "<eos>", "<bos>")
PAD_ID, UNK_ID, SEP_ID, EOS_ID, BOS_ID = range(len(SPECIALS))

# newline | space run | identifier | single digit | single other char
_SCAN_RE = re.compile(r"\n|[ \t\r]+|[A-Za-z_][A-Za-z_0-9]*|[0-9]|[^\sA-Za-z0-9]")

# every token a value serialization can need, present in any vocabulary
_GUARANTEED = tuple("0123456789") + ("off", "cg", "flatten", ",", "=")


def scan(text: str) -> list[str]:
    """Split text into tokens whose concatenation is exactly the input."""
    pieces = _SCAN_RE.findall(text)
    if "".join(pieces) != text:
        raise ValueError("text contains untokenizable characters")
    return pieces


class Tokenizer:
    """Fixed vocabulary mapping token strings to ids, specials first."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicates")

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Tokenizer":
        seen: set[str] = set(_GUARANTEED)
        for t in texts:
            seen.update(scan(t))
        return cls(list(SPECIALS) + sorted(seen))

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in scan(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in ids)

    def save(self, path: str | Path) -> None:
        """One JSON-escaped token per line; the line number is the id."""
        lines = [json.dumps(t) for t in self.tokens]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text().splitlines()
        return cls([json.loads(ln) for ln in lines])


def serialize_config(
    config: Mapping[str, PragmaValue], slot_order: Sequence[str]
) -> str:
    """`id=value` pairs, comma separated, in slot (source) order."""
    missing = [s for s in slot_order if s not in config]
    if missing:
        raise ValueError(f"config missing slots {missing}")
    extra = [k for k in config if k not in set(slot_order)]
    if extra:
        raise ValueError(f"config has unknown slots {extra}")
    return ",".join(f"{s}={config[s]}" for s in slot_order)


def deserialize_config(text: str) -> dict[str, PragmaValue]:
    """Inverse of serialize_config (slot order comes back as written)."""
    out: dict[str, PragmaValue] = {}
    if not text:
        return out
    for part in text.split(","):
        if "=" not in part:
            raise ValueError(f"bad config fragment {part!r}")
        sid, val = part.split("=", 1)
        out[sid] = int(val) if val.isdigit() else val
    return out


@dataclass
class TrainingExample:
    tokens: list[int]
    mask: list[bool]  # True where loss applies (target region + eos)
    weight: float
    kernel_id: str
    point_index: int


def linearize(
    source: str,
    config: Mapping[str, PragmaValue],
    slot_order: Sequence[str],
    tok: Tokenizer,
    weight: float = 1.0,
    kernel_id: str = "",
    point_index: int = 0,
) -> TrainingExample:
    x_ids = tok.encode(source)
    y_ids = tok.encode(serialize_config(config, slot_order))
    tokens = x_ids + [SEP_ID] + y_ids + [EOS_ID]
    mask = [False] * (len(x_ids) + 1) + [True] * (len(y_ids) + 1)
    return TrainingExample(
        tokens=tokens,
        mask=mask,
        weight=float(weight),
        kernel_id=kernel_id,
        point_index=point_index,
    )


def build_tokenizer(corpus: Corpus) -> Tokenizer:
    """Vocabulary from all kernel sources plus every serializable value."""
    texts = [corpus.kernels[k] for k in sorted(corpus.kernels)]
    for kid in sorted(corpus.kernels):
        ast = km.parse_kernel(corpus.kernels[kid])
        order = [s.id for s in km.extract_slots(ast)]
        for p in corpus.points:
            if p.kernel_id == kid:
                texts.append(serialize_config(p.point, order))
    return Tokenizer.from_texts(texts)


def _slot_orders(corpus: Corpus) -> dict[str, list[str]]:
    out = {}
    for kid in sorted(corpus.kernels):
        ast: Kernel = km.parse_kernel(corpus.kernels[kid])
        out[kid] = [s.id for s in km.extract_slots(ast)]
    return out


def _examples_for(
    corpus: Corpus, tok: Tokenizer, weights: Sequence[float]
) -> list[TrainingExample]:
    orders = _slot_orders(corpus)
    line_no: dict[str, int] = {}
    out = []
    for p, w in zip(corpus.points, weights):
        idx = line_no.get(p.kernel_id, 0)
        line_no[p.kernel_id] = idx + 1
        out.append(
            linearize(
                corpus.kernels[p.kernel_id],
                p.point,
                orders[p.kernel_id],
                tok,
                weight=w,
                kernel_id=p.kernel_id,
                point_index=idx,
            )
        )
    return out


def build_dataset(
    splits: Mapping[str, Corpus],
    tok: Tokenizer,
    weight_params: WeightParams = WeightParams(),
    resample_params: ResampleParams = ResampleParams(),
) -> dict[str, list[TrainingExample]]:
    """Linearize every split.  Train weights come from the latency transform
    over train points and the train list is the resampled one (done once,
    here); validation and test keep weight 1 and are never resampled."""
    out: dict[str, list[TrainingExample]] = {}
    for name, corpus in splits.items():
        if name == "train":
            w = latency_to_weights(
                [p.perf for p in corpus.points],
                [p.valid for p in corpus.points],
                weight_params,
            )
            examples = _examples_for(corpus, tok, w.tolist())
            order = resample(w, resample_params)
            out[name] = [examples[i] for i in order]
        else:
            out[name] = _examples_for(corpus, tok, [1.0] * len(corpus.points))
    return out


def save_examples(path: str | Path, examples: Sequence[TrainingExample]) -> None:
    lines = [
        json.dumps(
            {
                "tokens": e.tokens,
                "mask": [int(b) for b in e.mask],
                "weight": e.weight,
                "kernel_id": e.kernel_id,
                "point_index": e.point_index,
            },
            sort_keys=True,
        )
        for e in examples
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_examples(path: str | Path) -> list[TrainingExample]:
    out = []
    for ln in Path(path).read_text().splitlines():
        if not ln.strip():
            continue
        rec = json.loads(ln)
        out.append(
            TrainingExample(
                tokens=[int(t) for t in rec["tokens"]],
                mask=[bool(m) for m in rec["mask"]],
                weight=float(rec["weight"]),
                kernel_id=rec["kernel_id"],
                point_index=int(rec["point_index"]),
            )
        )
    return out
