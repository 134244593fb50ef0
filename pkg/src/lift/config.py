"""Flat dotted-key run configuration shared by every CLI command.

Format: one `key = value` per line, `#` comments, unknown keys rejected.
Seeds resolve in layers: file < --set overrides < the LIFT_SEED environment
variable (master seed only).  Any stage seed left unset derives from the
master seed and the key name, so one master seed pins the whole pipeline
while still letting individual stages be re-seeded independently.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import GenParams
from .kernel import DEFAULT_MAX_FACTOR
from .latency import DEFAULT_MAX_UNITS, ResourceBudget
from .models import GnnConfig, SeqConfig
from .seeding import derive_seed
from .training import PretrainConfig, TrainConfig
from .weighting import ResampleParams, WeightParams


class RunConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise RunConfigError(f"not a boolean: {text!r}")


# key -> (type tag, default); None defaults mean "derive from master seed"
# for *.seed keys and "must be supplied" for paths.
_SPEC: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "max_factor": ("int", DEFAULT_MAX_FACTOR),
    "budget.max_units": ("int", DEFAULT_MAX_UNITS),
    "paths.corpus": ("str", None),
    "paths.workdir": ("str", None),
    "corpus.n_kernels": ("int", 150),
    "corpus.n_configs": ("int", 20),
    "corpus.seed": ("int", None),
    "split.seed": ("int", None),
    "weight.eps0": ("float", 1e-8),
    "weight.power_p": ("float", 0.5),
    "weight.eps": ("float", 0.01),
    "weight.w_max": ("float", 1.0),
    "resample.tau": ("float", 0.5),
    "resample.lambda": ("int", 3),
    "resample.gamma": ("float", 0.5),
    "resample.seed": ("int", None),
    "gnn.hidden": ("int", 64),
    "gnn.out_dim": ("int", 64),
    "gnn.layers": ("int", 3),
    "model.d_model": ("int", 64),
    "model.n_heads": ("int", 2),
    "model.n_layers": ("int", 2),
    "model.d_ff": ("int", 128),
    "model.max_len": ("int", 640),
    "model.seed": ("int", None),
    "pretrain.epochs": ("int", 25),
    "pretrain.batch_size": ("int", 64),
    "pretrain.lr": ("float", 3e-3),
    "pretrain.seed": ("int", None),
    "train.epochs": ("int", 3),
    "train.batch_size": ("int", 8),
    "train.lr": ("float", 1e-3),
    "train.alpha": ("float", 1.0),
    "train.ema_beta": ("float", 0.9),
    "train.val_decode_n": ("int", 32),
    "train.deterministic": ("bool", True),
    "train.seed": ("int", None),
    "eval.n_random": ("int", 100),
    "eval.seed": ("int", None),
    "eval.exhaustive_cap": ("int", 10_000),
}

_SEED_KEYS = tuple(k for k in _SPEC if k.endswith(".seed"))


def _coerce(key: str, text: str) -> object:
    if key not in _SPEC:
        raise RunConfigError(f"unknown config key {key!r}")
    tag = _SPEC[key][0]
    text = text.strip()
    try:
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            return _parse_bool(text)
    except ValueError as exc:
        raise RunConfigError(f"bad value for {key}: {text!r}") from exc
    return text


@dataclass
class RunConfig:
    values: dict[str, object]

    def __getitem__(self, key: str) -> object:
        return self.values[key]

    def require_path(self, key: str, flag: str) -> str:
        val = self.values.get(key)
        if not val:
            raise RunConfigError(f"missing {key} (set it or pass {flag})")
        return str(val)

    def echo(self) -> str:
        """Resolved configuration, one sorted line per key."""
        out = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, bool):
                text = "true" if val else "false"
            elif val is None:
                text = ""
            else:
                text = repr(val) if isinstance(val, float) else str(val)
            out.append(f"{key} = {text}")
        return "\n".join(out)


def _parse_lines(lines: Sequence[str], origin: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for i, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunConfigError(f"{origin}:{i}: expected key = value, got {raw!r}")
        key, text = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), text)
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    values = {k: default for k, (_, default) in _SPEC.items()}
    if path is not None:
        values.update(_parse_lines(Path(path).read_text().splitlines(), str(path)))
    values.update(_parse_lines(list(overrides), "--set"))
    env = os.environ if env is None else env
    if "LIFT_SEED" in env:
        values["seed"] = _coerce("seed", env["LIFT_SEED"])
    master = values["seed"]
    for key in _SEED_KEYS:
        if values[key] is None:
            values[key] = derive_seed(master, key)
    return RunConfig(values=values)


# ---------------------------------------------------------------------------
# typed views onto the resolved key-value map


def gen_params(cfg: RunConfig) -> GenParams:
    return GenParams(
        n_kernels=cfg["corpus.n_kernels"],
        n_configs=cfg["corpus.n_configs"],
        seed=cfg["corpus.seed"],
        max_factor=cfg["max_factor"],
        max_units=cfg["budget.max_units"],
    )


def weight_params(cfg: RunConfig) -> WeightParams:
    return WeightParams(
        eps0=cfg["weight.eps0"],
        power_p=cfg["weight.power_p"],
        eps=cfg["weight.eps"],
        w_max=cfg["weight.w_max"],
    )


def resample_params(cfg: RunConfig) -> ResampleParams:
    return ResampleParams(
        tau=cfg["resample.tau"],
        repeats=cfg["resample.lambda"],
        keep_frac=cfg["resample.gamma"],
        seed=cfg["resample.seed"],
    )


def budget(cfg: RunConfig) -> ResourceBudget:
    return ResourceBudget(max_units=cfg["budget.max_units"])


def gnn_config(cfg: RunConfig) -> GnnConfig:
    return GnnConfig(
        hidden=cfg["gnn.hidden"],
        out_dim=cfg["gnn.out_dim"],
        layers=cfg["gnn.layers"],
    )


def seq_config(cfg: RunConfig, vocab_size: int) -> SeqConfig:
    return SeqConfig(
        vocab_size=vocab_size,
        d_model=cfg["model.d_model"],
        n_heads=cfg["model.n_heads"],
        n_layers=cfg["model.n_layers"],
        d_ff=cfg["model.d_ff"],
        max_len=cfg["model.max_len"],
    )


def pretrain_config(cfg: RunConfig) -> PretrainConfig:
    return PretrainConfig(
        epochs=cfg["pretrain.epochs"],
        batch_size=cfg["pretrain.batch_size"],
        lr=cfg["pretrain.lr"],
        seed=cfg["pretrain.seed"],
    )


def train_config(cfg: RunConfig, checkpoint_dir: str | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        seed=cfg["train.seed"],
        alpha=cfg["train.alpha"],
        ema_beta=cfg["train.ema_beta"],
        max_factor=cfg["max_factor"],
        val_decode_n=cfg["train.val_decode_n"],
        deterministic=cfg["train.deterministic"],
        checkpoint_dir=checkpoint_dir,
    )
