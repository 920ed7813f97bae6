"""Command-line driver: gen-data, curate, train, eval, drift-check, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .baseline import classifier_rankings, save_head, train_classifier_head
from .config import VARIANTS, ConfigError, RunConfig, load_config
from .curation import (
    TemplateLibrary,
    generate_corpus,
    load_records,
    remove_leakage,
    save_records,
    split_records,
    stage_validity,
    train_frequencies,
)
from .evaluation import bucket_eval, evaluate
from .retrieval import build_bank, save_bank
from .stability import measure_drift
from .tokenizer import Vocabulary, build_vocab, encode_batch
from .trainer import (
    EmaTrace,
    Stage2Flags,
    load_towers,
    run_stage1,
    run_stage2,
    save_towers,
    write_epoch_log,
)

COMMANDS = ("gen-data", "curate", "train", "eval", "drift-check", "report")


class UnknownCommand(ValueError):
    pass


def _base_parser(name: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=f"retrorank {name}")
    p.add_argument("--config", type=str, default=None, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help="output directory")
    return p


def _load(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    return load_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["out_dir"])
    root = os.environ.get("RETRORANK_OUT")
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    # resolved config is written before any work begins
    (out / "config.resolved.txt").write_text(cfg.resolved_text(), encoding="utf-8")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path}; run `{hint}` first")
    return path


def _load_vocab_and_library(out: Path) -> tuple[Vocabulary, TemplateLibrary]:
    vocab = Vocabulary.load(_require(out / "vocab.txt", "retrorank train --stage 1"))
    library = TemplateLibrary.load(_require(out / "templates.txt", "retrorank gen-data"))
    return vocab, library


def cmd_gen_data(argv) -> int:
    args = _base_parser("gen-data").parse_args(argv)
    cfg = _load(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    records, library = generate_corpus(**cfg.corpus_kwargs())
    save_records(out / "dataset.jsonl", records)
    library.save(out / "templates.txt")
    counts = {s: len(rows) for s, rows in split_records(records).items()}
    print(f"wrote {len(records)} records ({counts}) and {library.size} templates to {out}")
    return 0


def cmd_curate(argv) -> int:
    args = _base_parser("curate").parse_args(argv)
    cfg = _load(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    records = load_records(_require(out / "dataset.jsonl", "retrorank gen-data"))
    splits = split_records(records)
    report: dict = {"stages": {}}
    valid = {}
    for split, rows in splits.items():
        stats, valid_rows = stage_validity(rows, cfg["eval.max_outcomes"])
        report["stages"][split] = stats.as_dict()
        valid[split] = valid_rows
    cleaned_train, leak = remove_leakage(
        valid["train"], {"val": valid["val"], "test": valid["test"]}
    )
    report["leakage"] = leak
    # training uses the cleaned valid train subset; evaluation keeps the
    # unfiltered val/test rows
    curated = cleaned_train + splits["val"] + splits["test"]
    curated.sort(key=lambda r: r.id)
    save_records(out / "curated.jsonl", curated)
    (out / "curation_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(
        f"curated: train {len(cleaned_train)} (removed {leak['union_removed']}), "
        f"val {len(splits['val'])}, test {len(splits['test'])}"
    )
    return 0


def _flags_for(cfg: RunConfig) -> Stage2Flags:
    variant = cfg["stage2.variant"]
    depth = cfg["stage2.ema_depth"]
    alpha = cfg["stage2.ema_alpha"]
    if variant == "frozen":
        return Stage2Flags(frozen=True)
    if variant == "ema":
        return Stage2Flags(ema=True, top_layers=depth, alpha=alpha)
    if variant == "snapshot-kld":
        return Stage2Flags(snapshot=True, kld=True, top_layers=depth)
    if variant == "alt":
        nf, _, nu = cfg["stage2.alt_schedule"].partition(":")
        try:
            n_freeze, n_unfreeze = int(nf), int(nu)
        except ValueError as e:
            raise ConfigError(f"bad stage2.alt_schedule {cfg['stage2.alt_schedule']!r}") from e
        return Stage2Flags(
            ema=True, alternating=True, n_freeze=n_freeze, n_unfreeze=n_unfreeze,
            top_layers=depth, alpha=alpha,
        )
    if variant == "one-opt":
        raw = cfg["stage2.one_opt_refresh"]
        refresh = 0 if raw == "never" else int(raw)
        return Stage2Flags(one_opt=True, bank_refresh_every=refresh)
    raise ConfigError(f"unknown variant {variant!r}")


def _save_trace(path: Path, trace: EmaTrace) -> None:
    np.savez_compressed(
        path,
        alpha=np.float64(trace.alpha),
        shadow_init=trace.shadow_init,
        live_steps=np.stack(trace.live_steps) if trace.live_steps else np.zeros((0, 0)),
        epoch_step_counts=np.asarray(trace.epoch_step_counts, dtype=np.int64),
        shadow_epochs=np.stack(trace.shadow_epochs),
        bank_epochs=np.stack(trace.bank_epochs),
        live_epoch_starts=np.stack(trace.live_epoch_starts),
    )


def _load_trace(path: Path) -> EmaTrace:
    with np.load(path) as z:
        return EmaTrace(
            alpha=float(z["alpha"]),
            shadow_init=z["shadow_init"],
            live_steps=list(z["live_steps"]),
            epoch_step_counts=[int(x) for x in z["epoch_step_counts"]],
            shadow_epochs=list(z["shadow_epochs"]),
            bank_epochs=list(z["bank_epochs"]),
            live_epoch_starts=list(z["live_epoch_starts"]),
        )


def cmd_train(argv) -> int:
    p = _base_parser("train")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--variant", type=str, choices=VARIANTS, default=None)
    p.add_argument("--ema-depth", type=int, default=None, help="trainable template layers K")
    p.add_argument("--alt-schedule", type=str, default=None, metavar="NF:NU")
    p.add_argument("--refresh", type=str, default=None, help="one-opt bank refresh (never|1|5)")
    args = p.parse_args(argv)
    if args.variant is not None:
        args.overrides.append(f"stage2.variant={args.variant}")
    if args.ema_depth is not None:
        args.overrides.append(f"stage2.ema_depth={args.ema_depth}")
    if args.alt_schedule is not None:
        args.overrides.append(f"stage2.alt_schedule={args.alt_schedule}")
    if args.refresh is not None:
        args.overrides.append(f"stage2.one_opt_refresh={args.refresh}")
    cfg = _load(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    records = load_records(_require(out / "curated.jsonl", "retrorank curate"))
    library = TemplateLibrary.load(_require(out / "templates.txt", "retrorank gen-data"))
    train_cfg = cfg.train_config()
    dtype = np.float64 if cfg["train.dtype"] == "f64" else np.float32

    if args.stage == 1:
        train_rows = [r for r in records if r.split == "train"]
        vocab = build_vocab([r.product for r in train_rows] + library.raw_strings())
        vocab.save(out / "vocab.txt")
        enc_cfg = cfg.encoder_config(vocab.size)
        result = run_stage1(records, vocab, enc_cfg, train_cfg, dtype=dtype)
        save_towers(out / "stage1.ckpt", result.product, result.template)
        write_epoch_log(out / "stage1_log.jsonl", result.epoch_log)
        print(f"stage 1 done: loss {result.epoch_log[-1]['loss']:.4f} -> {out / 'stage1.ckpt'}")
        return 0

    vocab, library = _load_vocab_and_library(out)
    enc_cfg = cfg.encoder_config(vocab.size)
    ckpt = _require(out / "stage1.ckpt", "retrorank train --stage 1")
    product, template, _ = load_towers(ckpt, enc_cfg)
    if dtype is np.float64:
        product, template = product.astype(dtype), template.astype(dtype)
    flags = _flags_for(cfg)
    if flags.one_opt:
        train_cfg = dataclasses.replace(train_cfg, lr_product=2e-4, lr_template=2e-4)
    variant = cfg["stage2.variant"]
    record_trace = flags.ema and cfg["stage2.record_trace"]
    result = run_stage2(
        records, library, vocab, product, template, flags, train_cfg,
        record_trace=record_trace,
    )
    save_towers(out / f"stage2_{variant}.ckpt", result.product, result.template, result.shadow)
    write_epoch_log(out / f"stage2_{variant}_log.jsonl", result.epoch_log)
    final_bank = build_bank(
        result.template, library, vocab, "live", train_cfg.stage2_epochs
    )
    save_bank(out / f"bank_{variant}.ckpt", final_bank, enc_cfg.digest())
    if result.trace is not None:
        _save_trace(out / "ema_trace.npz", result.trace)
    print(
        f"stage 2 [{variant}] done: loss {result.epoch_log[-1]['loss']:.4f} -> "
        f"{out / f'stage2_{variant}.ckpt'}"
    )
    return 0


def _resolve_checkpoint(cfg: RunConfig, out: Path) -> Path:
    name = cfg["eval.checkpoint"]
    if name:
        path = out / name
        if not path.exists():
            raise ConfigError(f"checkpoint {path} not found")
        return path
    preferred = out / f"stage2_{cfg['stage2.variant']}.ckpt"
    if preferred.exists():
        return preferred
    stage2 = sorted(out.glob("stage2_*.ckpt"))
    if stage2:
        return stage2[0]
    if (out / "stage1.ckpt").exists():
        return out / "stage1.ckpt"
    raise ConfigError(f"no checkpoint in {out}; run `retrorank train` first")


def cmd_eval(argv) -> int:
    p = _base_parser("eval")
    p.add_argument("--preset", type=str, choices=("e3", "f3"), default=None)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--split", type=str, choices=("val", "test"), default="test")
    p.add_argument("--with-classifier", action="store_true")
    p.add_argument("--filtered", action="store_true",
                   help="score only rows whose recorded template re-derives them")
    args = p.parse_args(argv)
    if args.preset is not None:
        args.overrides.append(f"eval.preset={args.preset}")
    if args.checkpoint is not None:
        args.overrides.append(f"eval.checkpoint={args.checkpoint}")
    if args.with_classifier:
        args.overrides.append("eval.with_classifier=true")
    if args.filtered:
        args.overrides.append("eval.filtered=true")
    cfg = _load(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    records = load_records(_require(out / "curated.jsonl", "retrorank curate"))
    vocab, library = _load_vocab_and_library(out)
    library.train_frequency = train_frequencies(records, library.size)
    enc_cfg = cfg.encoder_config(vocab.size)
    ckpt = _resolve_checkpoint(cfg, out)
    product, template, _ = load_towers(ckpt, enc_cfg)
    rows = [r for r in records if r.split == args.split]
    if cfg["eval.filtered"]:
        _, rows = stage_validity(rows, cfg["eval.max_outcomes"])
    if not rows:
        raise ConfigError(f"no {args.split} rows in curated dataset")
    report = evaluate(
        product, template, library, vocab, rows, cfg.eval_config(),
        temperature=cfg["train.temperature"],
    )
    if cfg["eval.with_classifier"]:
        s1_product, _, _ = load_towers(
            _require(out / "stage1.ckpt", "retrorank train --stage 1"), enc_cfg
        )
        train_rows = [r for r in records if r.split == "train"]
        emb = s1_product.encode(
            encode_batch(vocab, [r.product for r in train_rows], enc_cfg.max_len)
        )
        head = train_classifier_head(emb, np.array([r.template_id for r in train_rows]))
        save_head(out / "classifier.ckpt", head, enc_cfg.digest())
        row_emb = s1_product.encode(
            encode_batch(vocab, [r.product for r in rows], enc_cfg.max_len)
        )
        k_list = cfg.eval_config().k_list
        ranked = classifier_rankings(head, row_emb, max(k_list))
        report.classifier_buckets = bucket_eval(
            [r.template_id for r in rows], ranked, library.train_frequency, k_list
        )
    report.save(out / "eval_report.json")
    print(f"checkpoint: {ckpt.name}  split: {args.split}")
    print(report.console_table())
    return 0


def cmd_drift_check(argv) -> int:
    args = _base_parser("drift-check").parse_args(argv)
    cfg = _load(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    trace = _load_trace(
        _require(out / "ema_trace.npz", "retrorank train --stage 2 --variant ema")
    )
    records = load_records(_require(out / "curated.jsonl", "retrorank curate"))
    vocab, _ = _load_vocab_and_library(out)
    enc_cfg = cfg.encoder_config(vocab.size)
    product, _, _ = load_towers(
        _require(out / "stage2_ema.ckpt", "retrorank train --stage 2 --variant ema"),
        enc_cfg,
    )
    probe_products = sorted({r.product for r in records if r.split == "val"})[:16]
    if not probe_products:
        probe_products = sorted({r.product for r in records})[:16]
    queries = product.encode(encode_batch(vocab, probe_products, enc_cfg.max_len))
    report = measure_drift(trace, queries, temperature=cfg["train.temperature"])
    report.save(out / "drift_report.json")
    ok = True
    print("epoch  steps  measured      bound         l1-drift      l1-bound")
    for e in report.epochs:
        l1 = "-" if e.l1_retrieval_drift is None else f"{e.l1_retrieval_drift:.6f}"
        l1b = "-" if e.l1_bound is None else f"{e.l1_bound:.6f}"
        print(
            f"{e.epoch:>5}  {e.steps:>5}  {e.measured_param_drift:<12.6g}"
            f"  {e.param_drift_bound:<12.6g}  {l1:<12}  {l1b}"
        )
        if e.measured_param_drift > e.param_drift_bound + 1e-9:
            ok = False
    print(f"replay max abs err: {report.replay_max_abs_err:.3e}")
    print("drift bound holds at every epoch" if ok else "DRIFT BOUND VIOLATED")
    return 0 if ok else 1


def cmd_report(argv) -> int:
    args = _base_parser("report").parse_args(argv)
    cfg = _load(args)
    out = _out_dir(cfg)
    path = _require(out / "eval_report.json", "retrorank eval")
    data = json.loads(path.read_text(encoding="utf-8"))
    ks = sorted(int(k) for k in data["reaction_topk"])
    print("metric          " + "".join(f"  @{k:<6}" for k in ks))
    for name, key in (
        ("Reaction Acc.", "reaction_topk"),
        ("TRetr.", "template_retrieval_topk"),
        ("AppRate", "app_rate"),
        ("UniqueRS", "unique_rs"),
        ("YieldCov", "yield_cov"),
        ("YieldRate", "yield_rate"),
    ):
        print(f"{name:<16}" + "".join(f"  {data[key][str(k)]:>6.2f}" for k in ks))
    for bucket, vals in sorted(data["buckets"].items()):
        cells = "".join(f"  {vals['topk'][str(k)]:>6.2f}" for k in ks)
        print(f"bucket {bucket:<9} (n={vals['n']}){cells}")
    tax = data["taxonomy"]
    print(
        f"rows={data['n_rows']} empty={data['empty_prediction_rows']} "
        f"primary={tax['primary']} secondary={tax['secondary']} failed={tax['failed']}"
    )
    return 0


def dispatch(argv: list[str]) -> int:
    """Run one subcommand; returns the process exit code."""
    if not argv:
        print(f"usage: retrorank {{{'|'.join(COMMANDS)}}} [options]", file=sys.stderr)
        return 2
    cmd, rest = argv[0], argv[1:]
    handlers = {
        "gen-data": cmd_gen_data,
        "curate": cmd_curate,
        "train": cmd_train,
        "eval": cmd_eval,
        "drift-check": cmd_drift_check,
        "report": cmd_report,
    }
    if cmd not in handlers:
        print(
            f"unknown command {cmd!r}; available: {', '.join(COMMANDS)}",
            file=sys.stderr,
        )
        return 2
    try:
        return handlers[cmd](rest)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
