"""Flat `key = value` run configuration: typed schema, unknown-key rejection,
CLI overrides, deterministic resolved-config echo."""

from __future__ import annotations

from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .evaluation import EVAL_PRESETS, EvalConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 7),
    "out_dir": (str, "runs/default"),
    # synthetic corpus
    "data.n_templates": (int, 96),
    "data.n_reactions": (int, 2000),
    "data.zipf_exponent": (float, 1.1),
    "data.multi_positive_fraction": (float, 0.15),
    "data.multi_input_fraction": (float, 0.0),
    "data.corrupt_fraction": (float, 0.0),
    "data.unseen_fraction": (float, 0.12),
    "data.val_fraction": (float, 0.1),
    "data.test_fraction": (float, 0.1),
    "data.tag_fraction": (float, 0.2),
    "data.alphabet": (str, "abcdefghijkl"),
    # encoder towers
    "encoder.dim": (int, 32),
    "encoder.layers": (int, 2),
    "encoder.heads": (int, 4),
    "encoder.ff_dim": (int, 64),
    "encoder.max_len": (int, 64),
    "encoder.dropout": (float, 0.1),
    # training
    "train.dtype": (str, "f32"),
    "train.batch_size": (int, 16),
    "train.micro_batch": (int, 8),
    "train.accum_steps": (int, 2),
    "train.stage1_batch_size": (int, 64),
    "train.stage1_epochs": (int, 8),
    "train.stage2_epochs": (int, 6),
    "train.lr_stage1": (float, 1e-4),
    "train.lr_product": (float, 1e-4),
    "train.lr_template": (float, 1e-5),
    "train.weight_decay": (float, 1e-2),
    "train.warmup_steps": (int, 50),
    "train.temperature": (float, 0.07),
    "train.epsilon": (float, 0.02),
    "train.beta": (float, 0.001),
    "train.lambda_kld": (float, 0.1),
    "train.clip_norm": (float, 1.0),
    "train.candidate_size": (int, 32),
    "train.hard_pool": (int, 128),
    "train.in_batch_cap": (int, 8),
    # stage 2 variant switches
    "stage2.variant": (str, "frozen"),
    "stage2.ema_depth": (int, 3),
    "stage2.ema_alpha": (float, 0.999),
    "stage2.alt_schedule": (str, "10:2"),
    "stage2.one_opt_refresh": (str, "1"),
    "stage2.record_trace": (_bool, True),
    # evaluation
    "eval.preset": (str, "e3"),
    "eval.apply_top": (int, 50),
    "eval.max_outcomes": (int, 4),
    "eval.k_list": (str, "1,3,5,10,20"),
    "eval.checkpoint": (str, ""),
    "eval.with_classifier": (_bool, False),
    # evaluate only rows whose recorded template regenerates the recorded
    # reactants (the default keeps the standard unfiltered split)
    "eval.filtered": (_bool, False),
}

VARIANTS = ("frozen", "ema", "snapshot-kld", "alt", "one-opt")


class RunConfig:
    def __init__(self, values: dict[str, Any]):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            max_len=self["encoder.max_len"],
            dim=self["encoder.dim"],
            layers=self["encoder.layers"],
            heads=self["encoder.heads"],
            ff_dim=self["encoder.ff_dim"],
            dropout=self["encoder.dropout"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self["train.batch_size"],
            micro_batch=self["train.micro_batch"],
            accum_steps=self["train.accum_steps"],
            stage1_batch_size=self["train.stage1_batch_size"],
            stage1_epochs=self["train.stage1_epochs"],
            stage2_epochs=self["train.stage2_epochs"],
            lr_stage1=self["train.lr_stage1"],
            lr_product=self["train.lr_product"],
            lr_template=self["train.lr_template"],
            weight_decay=self["train.weight_decay"],
            warmup_steps=self["train.warmup_steps"],
            temperature=self["train.temperature"],
            epsilon=self["train.epsilon"],
            beta=self["train.beta"],
            lambda_kld=self["train.lambda_kld"],
            clip_norm=self["train.clip_norm"],
            candidate_size=self["train.candidate_size"],
            hard_pool=self["train.hard_pool"],
            in_batch_cap=self["train.in_batch_cap"],
            seed=self["seed"],
        )

    def eval_config(self) -> EvalConfig:
        preset = self["eval.preset"]
        if preset not in EVAL_PRESETS:
            raise ConfigError(f"unknown eval preset {preset!r}; choose from {sorted(EVAL_PRESETS)}")
        base = EVAL_PRESETS[preset]
        try:
            k_list = tuple(int(k) for k in self["eval.k_list"].split(","))
        except ValueError as e:
            raise ConfigError(f"bad eval.k_list: {self['eval.k_list']!r}") from e
        return EvalConfig(
            retrieval_pool=base.retrieval_pool,
            rerank_pool=base.rerank_pool,
            apply_top=self["eval.apply_top"],
            max_outcomes_per_template=self["eval.max_outcomes"],
            k_list=k_list,
        )

    def corpus_kwargs(self) -> dict:
        return dict(
            n_templates=self["data.n_templates"],
            n_reactions=self["data.n_reactions"],
            zipf_exponent=self["data.zipf_exponent"],
            seed=self["seed"],
            multi_positive_fraction=self["data.multi_positive_fraction"],
            multi_input_fraction=self["data.multi_input_fraction"],
            corrupt_fraction=self["data.corrupt_fraction"],
            unseen_fraction=self["data.unseen_fraction"],
            val_fraction=self["data.val_fraction"],
            test_fraction=self["data.test_fraction"],
            tag_fraction=self["data.tag_fraction"],
            alphabet=self["data.alphabet"],
        )

    def resolved_text(self) -> str:
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"


def _parse_assignment(line: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"expected 'key = value', got {line!r}")
    key, _, raw = line.partition("=")
    return key.strip(), raw.strip()


def load_config(
    path: str | Path | None = None, overrides: list[str] | None = None
) -> RunConfig:
    """Defaults, then the config file, then `key=value` overrides."""
    values = {k: default for k, (_, default) in SCHEMA.items()}

    def apply(key: str, raw: str, origin: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(raw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({origin})") from e

    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for ln, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            key, raw = _parse_assignment(stripped)
            apply(key, raw, f"{path}:{ln}")
    for item in overrides or []:
        key, raw = _parse_assignment(item)
        apply(key, raw, "command line")

    if values["stage2.variant"] not in VARIANTS:
        raise ConfigError(
            f"unknown stage2.variant {values['stage2.variant']!r}; choose from {VARIANTS}"
        )
    if values["train.dtype"] not in ("f32", "f64"):
        raise ConfigError(f"train.dtype must be f32 or f64, got {values['train.dtype']!r}")
    return RunConfig(values)
