"""Training: AdamW with decoupled decay, warmup-cosine schedule, EMA shadow
updates, the Stage 1 contrastive loop, and the unified Stage 2 loop covering
all variants (frozen, EMA, snapshot+KLD, alternating freeze, one-optimizer)."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .curation import ProductGroup, ReactionRecord, TemplateLibrary, group_by_product
from .encoder import (
    EncoderConfig,
    ShapeMismatch,
    Tower,
    template_trainable_keys,
    zeros_like_params,
)
from .objectives import kld_loss_rows, smoothed_targets, stage1_loss, stage2_loss_rows
from .retrieval import (
    CandidateSet,
    TemplateBank,
    build_bank,
    build_candidate_set,
    candidate_rng,
)
from .tokenizer import Vocabulary, encode_batch


class StepOutOfRange(ValueError):
    pass


class StaleBank(RuntimeError):
    pass


class InvalidFlags(ValueError):
    pass


def rng_for(seed: int, *parts) -> np.random.Generator:
    """Deterministic generator keyed by seed plus arbitrary tags."""
    entropy = [seed] + [
        p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts
    ]
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# optimizer and schedules


def warmup_cosine_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base over warmup, cosine decay to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t))


def constant_lr(base_lr: float) -> Callable[[int], float]:
    return lambda step: base_lr


@dataclass
class OptimizerState:
    """AdamW state over a dict of named parameter arrays."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    weight_decay: float
    schedule: Callable[[int], float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params, weight_decay, schedule) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
            weight_decay=weight_decay,
            schedule=schedule,
        )

    def reset(self, params) -> None:
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.step = 0


def adamw_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    keys: Optional[set[str]] = None,
) -> float:
    """One decoupled-weight-decay adaptive-moment update in place; returns the
    learning rate used. Only `keys` (default: all) are touched."""
    state.step += 1
    lr = state.schedule(state.step)
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k in params if keys is None else keys:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {params[k].shape} for {k}")
        if state.weight_decay:
            params[k] *= 1.0 - lr * state.weight_decay
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[k] / bc1
        vhat = state.v[k] / bc2
        params[k] -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return lr


def ema_update(shadow: dict[str, np.ndarray], live: dict[str, np.ndarray], alpha: float) -> None:
    """shadow <- alpha * shadow + (1 - alpha) * live, elementwise, no tape."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    for k, s in shadow.items():
        lv = live[k]
        if lv.shape != s.shape:
            raise ShapeMismatch(f"shadow/live shape mismatch for {k}")
        s *= alpha
        s += (1.0 - alpha) * lv


def clip_global_norm(grad_dicts: list[dict[str, np.ndarray]], max_norm: float) -> float:
    """Scale all gradients jointly so the global L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    sq = 0.0
    for g in grad_dicts:
        for arr in g.values():
            sq += float((arr.astype(np.float64) ** 2).sum())
    total = float(np.sqrt(sq))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grad_dicts:
            for arr in g.values():
                arr *= scale
    return total


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenate parameter arrays in sorted key order (f64)."""
    return np.concatenate(
        [params[k].astype(np.float64).ravel() for k in sorted(params)]
    )


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Stage2Flags:
    """Variant switches of the unified Stage 2 loop."""

    ema: bool = False  # EMA teacher drives the bank
    snapshot: bool = False  # epoch-snapshot teacher drives the bank
    kld: bool = False  # distill snapshot policy into the live model
    alternating: bool = False  # alternate tower freezing per (n_freeze, n_unfreeze)
    frozen: bool = False  # template tower never updates
    n_freeze: int = 10
    n_unfreeze: int = 2
    alpha: float = 0.999
    top_layers: int = 3  # trainable template layers when the tower updates
    one_opt: bool = False  # single shared optimizer over both towers
    bank_refresh_every: int = 1  # epochs between re-encodings; 0 = never

    def validate(self) -> None:
        if self.kld and not self.snapshot:
            raise InvalidFlags("KLD regularization requires the snapshot teacher")
        if self.ema and self.snapshot:
            raise InvalidFlags("at most one of EMA / snapshot may drive the bank")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidFlags(f"alpha must be in (0, 1), got {self.alpha}")
        if self.alternating and (self.n_freeze < 1 or self.n_unfreeze < 1):
            raise InvalidFlags("alternating schedule needs n_freeze, n_unfreeze >= 1")
        if self.top_layers < 0:
            raise InvalidFlags("top_layers must be >= 0")
        if self.bank_refresh_every < 0:
            raise InvalidFlags("bank_refresh_every must be >= 0")

    def bank_source(self) -> str:
        if self.ema:
            return "ema"
        if self.snapshot:
            return "snapshot"
        return "stage1-frozen" if self.frozen else "live"

    def template_frozen_at(self, epoch: int) -> bool:
        """Freeze state for a 0-based epoch; alternating yields e.g. F,F,U for 2:1."""
        if self.alternating:
            return epoch % (self.n_freeze + self.n_unfreeze) < self.n_freeze
        return self.frozen

    def product_frozen_at(self, epoch: int) -> bool:
        # alternating trains exactly one tower per epoch
        return self.alternating and not self.template_frozen_at(epoch)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16  # products per Stage 2 data batch
    micro_batch: int = 8  # products per forward chunk
    accum_steps: int = 2  # data batches per optimizer step; loss scaled by 1/accum
    stage1_batch_size: int = 64
    stage1_epochs: int = 10
    stage2_epochs: int = 6
    lr_stage1: float = 1e-4
    lr_product: float = 1e-4
    lr_template: float = 1e-5
    weight_decay: float = 1e-2
    warmup_steps: int = 50
    temperature: float = 0.07
    epsilon: float = 0.02
    beta: float = 0.001
    lambda_kld: float = 0.1
    clip_norm: float = 1.0
    candidate_size: int = 64
    hard_pool: int = 128
    in_batch_cap: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size % self.micro_batch != 0:
            raise ValueError("batch_size must be a multiple of micro_batch")
        for name in ("lr_stage1", "lr_product", "lr_template", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# stage 2 step


@dataclass
class StepResult:
    loss: float
    kld: float
    grads_product: dict[str, np.ndarray]
    grads_template: dict[str, np.ndarray]
    unique_candidates: int
    candidate_sets: list[CandidateSet]


def _encode_products(tower: Tower, vocab: Vocabulary, products: list[str]) -> np.ndarray:
    ids = encode_batch(vocab, products, tower.config.max_len)
    return tower.encode(ids)


def train_step_stage2(
    product: Tower,
    template: Tower,
    batch: list[ProductGroup],
    bank: TemplateBank,
    flags: Stage2Flags,
    config: TrainConfig,
    vocab: Vocabulary,
    library: TemplateLibrary,
    epoch: int,
    dropout_rng: Optional[np.random.Generator] = None,
) -> StepResult:
    """One data batch: mine candidates, deduplicate the B x C candidate ids,
    forward the unique set once through the live template tower, score via
    gathered embeddings, and backpropagate the smoothed listwise loss (plus
    KLD when enabled). Returned gradients are scaled by 1/accum_steps and not
    yet clipped; clipping happens at the optimizer step over the accumulated
    total."""
    if bank.epoch_stamp != epoch:
        raise StaleBank(f"bank stamped for epoch {bank.epoch_stamp}, training epoch {epoch}")
    B = len(batch)
    C = config.candidate_size
    temp = config.temperature
    template_trainable = not flags.template_frozen_at(epoch)
    product_trainable = not flags.product_frozen_at(epoch)
    train_mode = product.config.dropout > 0 and dropout_rng is not None

    # deterministic queries for mining (eval mode, current live product tower)
    queries = _encode_products(product, vocab, [g.product for g in batch])

    cand_sets: list[CandidateSet] = []
    for i, g in enumerate(batch):
        in_batch = [t for j, other in enumerate(batch) if j != i for t in other.positives]
        rng = candidate_rng(config.seed, epoch, g.rows[0])
        cand_sets.append(
            build_candidate_set(
                g.positives, in_batch, bank, queries[i], C, rng,
                hard_pool=config.hard_pool, in_batch_cap=config.in_batch_cap,
            )
        )

    cand_ids = np.stack([c.template_ids for c in cand_sets])  # (B, C)
    uniq, inverse = np.unique(cand_ids, return_inverse=True)
    inverse = inverse.reshape(B, C)

    raws = library.raw_strings()
    uniq_ids_tok = encode_batch(vocab, [raws[int(t)] for t in uniq], template.config.max_len)
    zt_u, cache_t = template.forward(
        uniq_ids_tok,
        train=train_mode and template_trainable,
        rng=dropout_rng,
        need_cache=template_trainable,
    )
    zt_cand = zt_u[inverse]  # (B, C, d)

    target_probs = np.stack(
        [smoothed_targets(c.positive_mask, config.epsilon).probs for c in cand_sets]
    )
    teacher_cand = bank.embeddings[cand_ids] if flags.kld else None

    scale = 1.0 / config.accum_steps
    grads_p = zeros_like_params(product.params)
    grads_t = zeros_like_params(template.params)
    dzt_u = np.zeros_like(zt_u)
    total_loss = 0.0
    total_kld = 0.0

    prod_ids = encode_batch(vocab, [g.product for g in batch], product.config.max_len)
    for lo in range(0, B, config.micro_batch):
        hi = min(lo + config.micro_batch, B)
        zp, cache_p = product.forward(
            prod_ids[lo:hi],
            train=train_mode and product_trainable,
            rng=dropout_rng,
            need_cache=product_trainable,
        )
        scores = np.einsum("bd,bcd->bc", zp, zt_cand[lo:hi]) / temp
        losses, dscores = stage2_loss_rows(scores, target_probs[lo:hi], config.beta)
        total_loss += float(losses.sum())
        if flags.kld:
            t_scores = np.einsum("bd,bcd->bc", zp, teacher_cand[lo:hi]) / temp
            kld_vals, dkld = kld_loss_rows(t_scores, scores)
            total_kld += float(kld_vals.sum())
            dscores = dscores + config.lambda_kld * dkld
        dscores *= scale / B
        dzp = np.einsum("bc,bcd->bd", dscores, zt_cand[lo:hi]) / temp
        dzt = dscores[:, :, None] * zp[:, None, :] / temp
        np.add.at(dzt_u, inverse[lo:hi].ravel(), dzt.reshape(-1, dzt.shape[-1]))
        if product_trainable:
            for k, g in product.backward(cache_p, dzp.astype(product.dtype)).items():
                grads_p[k] += g

    if template_trainable:
        grads_t_full = template.backward(cache_t, dzt_u.astype(template.dtype))
        allowed = template_trainable_keys(template.config, flags.top_layers)
        if flags.one_opt:
            allowed = set(template.params)
        for k in allowed:
            grads_t[k] = grads_t_full[k]

    return StepResult(
        loss=total_loss / B,
        kld=total_kld / B,
        grads_product=grads_p,
        grads_template=grads_t,
        unique_candidates=int(uniq.size),
        candidate_sets=cand_sets,
    )


# ---------------------------------------------------------------------------
# stage runners


@dataclass
class EmaTrace:
    """Per-step live template parameters and bookkeeping recorded at f64 for
    the drift analysis; only populated on EMA runs with tracing enabled."""

    alpha: float
    shadow_init: np.ndarray = field(default_factory=lambda: np.zeros(0))
    live_steps: list[np.ndarray] = field(default_factory=list)
    epoch_step_counts: list[int] = field(default_factory=list)
    shadow_epochs: list[np.ndarray] = field(default_factory=list)
    bank_epochs: list[np.ndarray] = field(default_factory=list)
    live_epoch_starts: list[np.ndarray] = field(default_factory=list)


@dataclass
class StageResult:
    product: Tower
    template: Tower
    epoch_log: list[dict]
    shadow: Optional[dict[str, np.ndarray]] = None
    trace: Optional[EmaTrace] = None


def _pair_batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def run_stage1(
    records: list[ReactionRecord],
    vocab: Vocabulary,
    encoder_cfg: EncoderConfig,
    config: TrainConfig,
    dtype=np.float32,
) -> StageResult:
    """Symmetric contrastive pretraining of both towers on (product, template)
    pairs, in-batch negatives, warmup-cosine schedule."""
    train = [r for r in records if r.split == "train"]
    if not train:
        raise ValueError("stage 1 needs a non-empty train split")
    product = Tower.create(encoder_cfg, rng_for(config.seed, "init-product"), dtype)
    template = Tower.create(encoder_cfg, rng_for(config.seed, "init-template"), dtype)

    steps_per_epoch = max(1, (len(train) + config.stage1_batch_size - 1) // config.stage1_batch_size)
    total = config.stage1_epochs * steps_per_epoch
    sched_p = lambda s: warmup_cosine_lr(min(s, total), config.warmup_steps, total, config.lr_stage1)
    opt_p = OptimizerState.create(product.params, config.weight_decay, sched_p)
    opt_t = OptimizerState.create(template.params, config.weight_decay, sched_p)

    epoch_log = []
    for epoch in range(config.stage1_epochs):
        shuffle_rng = rng_for(config.seed, "stage1-shuffle", epoch)
        drop_rng = rng_for(config.seed, "stage1-dropout", epoch)
        losses = []
        for idx in _pair_batches(len(train), config.stage1_batch_size, shuffle_rng):
            rows = [train[i] for i in idx]
            prod_ids = encode_batch(vocab, [r.product for r in rows], encoder_cfg.max_len)
            tmpl_ids = encode_batch(vocab, [r.template_raw for r in rows], encoder_cfg.max_len)
            train_mode = encoder_cfg.dropout > 0
            zp, cp = product.forward(prod_ids, train=train_mode, rng=drop_rng, need_cache=True)
            zt, ct = template.forward(tmpl_ids, train=train_mode, rng=drop_rng, need_cache=True)
            S = (zp @ zt.T) / config.temperature
            loss, dS = stage1_loss(S)
            dzp = (dS @ zt) / config.temperature
            dzt = (dS.T @ zp) / config.temperature
            gp = product.backward(cp, dzp.astype(dtype))
            gt = template.backward(ct, dzt.astype(dtype))
            adamw_step(opt_p, product.params, gp)
            adamw_step(opt_t, template.params, gt)
            losses.append(loss)
        epoch_log.append(
            {
                "stage": 1,
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "lr": float(sched_p(opt_p.step)),
            }
        )
    return StageResult(product, template, epoch_log)


def run_stage2(
    records: list[ReactionRecord],
    library: TemplateLibrary,
    vocab: Vocabulary,
    product: Tower,
    template: Tower,
    flags: Stage2Flags,
    config: TrainConfig,
    record_trace: bool = False,
) -> StageResult:
    """Unified Stage 2: per-epoch freeze state, snapshot refresh, bank rebuild
    from the teacher parameters, deduplicated listwise steps with gradient
    accumulation and clipping, per-tower optimizers, and EMA shadow updates
    after each live template step."""
    flags.validate()
    train = [r for r in records if r.split == "train"]
    groups = group_by_product(train)
    if not groups:
        raise ValueError("stage 2 needs a non-empty train split")

    shadow = {k: v.copy() for k, v in template.params.items()} if flags.ema else None
    snapshot_tower = template.copy() if flags.snapshot else None

    batches_per_epoch = max(1, (len(groups) + config.batch_size - 1) // config.batch_size)
    opt_steps_total = max(1, config.stage2_epochs * ((batches_per_epoch + config.accum_steps - 1) // config.accum_steps))
    if flags.one_opt:
        sched_p = constant_lr(config.lr_product)
        sched_t = constant_lr(config.lr_product)
    else:
        sched_p = lambda s: warmup_cosine_lr(min(s, opt_steps_total), config.warmup_steps, opt_steps_total, config.lr_product)
        sched_t = constant_lr(config.lr_template)
    opt_p = OptimizerState.create(product.params, config.weight_decay, sched_p)
    opt_t = OptimizerState.create(template.params, config.weight_decay, sched_t)

    trace = EmaTrace(alpha=flags.alpha) if (record_trace and flags.ema) else None
    if trace is not None:
        trace.shadow_init = flatten_params(shadow)

    epoch_log = []
    bank: Optional[TemplateBank] = None
    prev_frozen_t = True
    for epoch in range(config.stage2_epochs):
        frozen_t = flags.template_frozen_at(epoch)
        frozen_p = flags.product_frozen_at(epoch)
        if prev_frozen_t and not frozen_t and epoch > 0:
            # entering an unfreeze phase: template optimizer state is reset
            opt_t.reset(template.params)
        prev_frozen_t = frozen_t

        if flags.snapshot:
            snapshot_tower = template.copy()

        if flags.ema:
            teacher = Tower(template.config, shadow)
        elif flags.snapshot:
            teacher = snapshot_tower
        else:
            teacher = template
        refresh = flags.bank_refresh_every
        must_encode = bank is None or (refresh > 0 and epoch % refresh == 0)
        if must_encode:
            bank = build_bank(teacher, library, vocab, flags.bank_source(), epoch)
        else:
            bank = TemplateBank(bank.embeddings, bank.source, epoch)

        if trace is not None:
            trace.bank_epochs.append(bank.embeddings.astype(np.float64).copy())
            trace.live_epoch_starts.append(flatten_params(template.params))

        shuffle_rng = rng_for(config.seed, "stage2-shuffle", epoch)
        drop_rng = rng_for(config.seed, "stage2-dropout", epoch)
        order = shuffle_rng.permutation(len(groups))
        batch_slices = [order[i : i + config.batch_size] for i in range(0, len(groups), config.batch_size)]

        acc_p = zeros_like_params(product.params)
        acc_t = zeros_like_params(template.params)
        pending = 0
        losses, klds = [], []
        template_steps_this_epoch = 0

        def apply_updates():
            nonlocal pending, acc_p, acc_t, template_steps_this_epoch
            if pending == 0:
                return
            clip_targets = []
            if not frozen_p:
                clip_targets.append(acc_p)
            if not frozen_t:
                clip_targets.append(acc_t)
            if clip_targets:
                clip_global_norm(clip_targets, config.clip_norm)
            if not frozen_p:
                adamw_step(opt_p, product.params, acc_p)
            if not frozen_t:
                keys = template_trainable_keys(template.config, flags.top_layers)
                if flags.one_opt:
                    keys = set(template.params)
                adamw_step(opt_t, template.params, acc_t, keys=keys)
                template_steps_this_epoch += 1
                if flags.ema:
                    ema_update(shadow, template.params, flags.alpha)
                    if trace is not None:
                        trace.live_steps.append(flatten_params(template.params))
            acc_p = zeros_like_params(product.params)
            acc_t = zeros_like_params(template.params)
            pending = 0

        for sl in batch_slices:
            batch = [groups[i] for i in sl]
            res = train_step_stage2(
                product, template, batch, bank, flags, config, vocab, library,
                epoch, dropout_rng=drop_rng,
            )
            for k in acc_p:
                acc_p[k] += res.grads_product[k]
            for k in acc_t:
                acc_t[k] += res.grads_template[k]
            pending += 1
            losses.append(res.loss)
            klds.append(res.kld)
            if pending == config.accum_steps:
                apply_updates()
        apply_updates()  # flush a partial accumulation window at epoch end

        if trace is not None:
            trace.epoch_step_counts.append(template_steps_this_epoch)
            trace.shadow_epochs.append(flatten_params(shadow))

        epoch_log.append(
            {
                "stage": 2,
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "kld": float(np.mean(klds)),
                "lr_product": float(sched_p(opt_p.step)),
                "lr_template": float(sched_t(opt_t.step)),
                "bank_source": bank.source,
                "template_frozen": bool(frozen_t),
                "product_frozen": bool(frozen_p),
            }
        )

    return StageResult(product, template, epoch_log, shadow=shadow, trace=trace)


# ---------------------------------------------------------------------------
# checkpoint helpers


def save_towers(
    path: str | Path,
    product: Tower,
    template: Tower,
    shadow: Optional[dict[str, np.ndarray]] = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for prefix, params in (("product.", product.params), ("template.", template.params)):
        for k, v in params.items():
            arrays[prefix + k] = v
    if shadow is not None:
        for k, v in shadow.items():
            arrays["shadow." + k] = v
    save_checkpoint(path, product.config.digest(), arrays)


def load_towers(
    path: str | Path, encoder_cfg: EncoderConfig
) -> tuple[Tower, Tower, Optional[dict[str, np.ndarray]]]:
    digest, arrays = load_checkpoint(path)
    if digest != encoder_cfg.digest():
        raise CheckpointError(
            f"{path}: checkpoint config digest {digest[:12]}... does not match the"
            " provided encoder config"
        )
    product_params, template_params, shadow = {}, {}, {}
    for name, arr in arrays.items():
        prefix, _, key = name.partition(".")
        if prefix == "product":
            product_params[key] = arr.copy()
        elif prefix == "template":
            template_params[key] = arr.copy()
        elif prefix == "shadow":
            shadow[key] = arr.copy()
    return (
        Tower(encoder_cfg, product_params),
        Tower(encoder_cfg, template_params),
        shadow or None,
    )


def write_epoch_log(path: str | Path, log: list[dict]) -> None:
    lines = [json.dumps(row, sort_keys=True, separators=(",", ":")) for row in log]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
