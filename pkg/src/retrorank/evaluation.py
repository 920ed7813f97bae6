"""Evaluation protocol: template rankings -> deduplicated reactant rankings,
plus all reported metrics, long-tail buckets, and the success taxonomy."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .curation import ReactionRecord, TemplateLibrary
from .encoder import Tower
from .reaction_engine import (
    EmptyComponent,
    MultiInputTemplate,
    ReactionEngine,
    StringRewriteEngine,
)
from .retrieval import TemplateBank, build_bank, knn_search
from .tokenizer import Vocabulary, encode_batch

DEFAULT_K_LIST = (1, 3, 5, 10, 20)


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation window sizes. Pools are clipped to the library size."""

    retrieval_pool: int = 4096
    rerank_pool: int = 2048
    apply_top: int = 50
    max_outcomes_per_template: int = 4
    k_list: tuple[int, ...] = DEFAULT_K_LIST

    def __post_init__(self):
        if not self.retrieval_pool >= self.rerank_pool >= self.apply_top >= 1:
            raise ValueError(
                "need retrieval_pool >= rerank_pool >= apply_top >= 1, got "
                f"{self.retrieval_pool}/{self.rerank_pool}/{self.apply_top}"
            )


# the two reported evaluation-window settings; the smaller one is kept as a
# preset because the sources disagree
EVAL_PRESETS = {
    "e3": EvalConfig(retrieval_pool=4096, rerank_pool=2048),
    "f3": EvalConfig(retrieval_pool=256, rerank_pool=128),
}


@dataclass(frozen=True)
class RankedPrediction:
    reactant_key: str
    score: float
    best_template_id: int
    best_template_rank: int  # 0-based rank in the retrieved list


@dataclass(frozen=True)
class SlotTrace:
    """Outcome of applying one retrieved template slot."""

    template_id: int
    applied: bool
    keys: tuple[str, ...]
    yields_truth: bool


def rank_reactants(
    product: str,
    retrieved: list[tuple],  # (RewriteTemplate, score), best first
    engine: ReactionEngine,
    cfg: EvalConfig,
) -> list[RankedPrediction]:
    """Apply the top templates, canonicalize outcomes, merge duplicate keys
    keeping the max score (earlier retrieval rank on score ties), and sort by
    score desc, then rank asc, then key."""
    best: dict[str, tuple[float, int, int]] = {}
    for rank, (template, sc) in enumerate(retrieved[: cfg.apply_top]):
        try:
            outcomes = engine.apply(template, product, cfg.max_outcomes_per_template)
        except MultiInputTemplate:
            continue
        for out in outcomes:
            try:
                key = engine.canonical_key(out).canonical
            except EmptyComponent:
                continue
            cur = best.get(key)
            if cur is None or (sc, -rank) > (cur[0], -cur[1]):
                best[key] = (float(sc), rank, template.template_id)
    preds = [
        RankedPrediction(key, sc, tid, rank) for key, (sc, rank, tid) in best.items()
    ]
    preds.sort(key=lambda p: (-p.score, p.best_template_rank, p.reactant_key))
    return preds


def reaction_topk(
    predictions_per_row: list[list[RankedPrediction]],
    truth_keys: list[str],
    k_list=DEFAULT_K_LIST,
) -> dict[int, float]:
    """Percentage of rows whose ground-truth key appears in the top-k
    predictions; rows with no predictions stay in the denominator."""
    n = len(truth_keys)
    out = {}
    for k in k_list:
        hits = sum(
            any(p.reactant_key == truth for p in preds[:k])
            for preds, truth in zip(predictions_per_row, truth_keys)
        )
        out[k] = 100.0 * hits / n if n else 0.0
    return out


def template_retrieval_topk(
    retrieved_per_row: list[np.ndarray],
    positives_per_row: list[set[int]],
    k_list=DEFAULT_K_LIST,
) -> dict[int, float]:
    """Hit iff any observed positive template sits in the top-k retrieved."""
    n = len(retrieved_per_row)
    out = {}
    for k in k_list:
        hits = sum(
            bool(set(int(t) for t in ids[:k]) & pos)
            for ids, pos in zip(retrieved_per_row, positives_per_row)
        )
        out[k] = 100.0 * hits / n if n else 0.0
    return out


def template_diagnostics(
    traces_per_row: list[list[SlotTrace]], k_list=DEFAULT_K_LIST
) -> dict[str, dict[int, float]]:
    """AppRate / YieldRate aggregate over slots (exactly k per row; slots past
    the library count as non-applicable), UniqueRS / YieldCov per row."""
    n = len(traces_per_row)
    app, urs, ycov, yrate = {}, {}, {}, {}
    for k in k_list:
        applied = 0
        yielding = 0
        distinct = 0.0
        covered = 0
        for tr in traces_per_row:
            head = tr[:k]
            applied += sum(t.applied for t in head)
            yielding += sum(t.yields_truth for t in head)
            keys = set()
            for t in head:
                keys.update(t.keys)
            distinct += len(keys)
            covered += any(t.yields_truth for t in head)
        slots = n * k
        app[k] = 100.0 * applied / slots if slots else 0.0
        yrate[k] = 100.0 * yielding / slots if slots else 0.0
        urs[k] = distinct / n if n else 0.0
        ycov[k] = 100.0 * covered / n if n else 0.0
    return {"app_rate": app, "unique_rs": urs, "yield_cov": ycov, "yield_rate": yrate}


HEAD_FREQ_THRESHOLD = 5


def frequency_bucket(freq: int) -> str:
    if freq > HEAD_FREQ_THRESHOLD:
        return "head"
    return "tail" if freq > 0 else "unseen"


def bucket_eval(
    gt_template_ids: list[int],
    retrieved_per_row: list[np.ndarray],
    train_frequency: np.ndarray,
    k_list=DEFAULT_K_LIST,
) -> dict[str, dict]:
    """Exact ground-truth-template top-k accuracy by training-frequency bucket
    (head f>5, tail 0<f<=5, unseen f=0)."""
    buckets: dict[str, dict] = {
        b: {"n": 0, "topk": {k: 0 for k in k_list}} for b in ("head", "tail", "unseen")
    }
    for gt, ids in zip(gt_template_ids, retrieved_per_row):
        freq = int(train_frequency[gt]) if 0 <= gt < len(train_frequency) else 0
        b = buckets[frequency_bucket(freq)]
        b["n"] += 1
        for k in k_list:
            if gt in set(int(t) for t in ids[:k]):
                b["topk"][k] += 1
    for b in buckets.values():
        n = b["n"]
        b["topk"] = {k: (100.0 * v / n if n else 0.0) for k, v in b["topk"].items()}
    return buckets


def success_taxonomy(
    predictions_per_row: list[list[RankedPrediction]],
    positives_per_row: list[set[int]],
    truth_keys: list[str],
) -> dict[str, int]:
    """Top-1 outcome per row: primary (correct via an observed positive
    template), secondary (correct via a different template), or failed."""
    counts = {"primary": 0, "secondary": 0, "failed": 0}
    for preds, pos, truth in zip(predictions_per_row, positives_per_row, truth_keys):
        if preds and preds[0].reactant_key == truth:
            if preds[0].best_template_id in pos:
                counts["primary"] += 1
            else:
                counts["secondary"] += 1
        else:
            counts["failed"] += 1
    return counts


@dataclass
class EvalReport:
    n_rows: int
    reaction_topk: dict[int, float]
    template_retrieval_topk: dict[int, float]
    app_rate: dict[int, float]
    unique_rs: dict[int, float]
    yield_cov: dict[int, float]
    yield_rate: dict[int, float]
    buckets: dict[str, dict]
    taxonomy: dict[str, int]
    empty_prediction_rows: int = 0
    classifier_buckets: dict | None = None

    def as_dict(self) -> dict:
        def keyed(d):
            return {str(k): v for k, v in d.items()}

        out = {
            "n_rows": self.n_rows,
            "empty_prediction_rows": self.empty_prediction_rows,
            "reaction_topk": keyed(self.reaction_topk),
            "template_retrieval_topk": keyed(self.template_retrieval_topk),
            "app_rate": keyed(self.app_rate),
            "unique_rs": keyed(self.unique_rs),
            "yield_cov": keyed(self.yield_cov),
            "yield_rate": keyed(self.yield_rate),
            "buckets": {
                b: {"n": v["n"], "topk": keyed(v["topk"])} for b, v in self.buckets.items()
            },
            "taxonomy": self.taxonomy,
        }
        if self.classifier_buckets is not None:
            out["classifier_buckets"] = {
                b: {"n": v["n"], "topk": keyed(v["topk"])}
                for b, v in self.classifier_buckets.items()
            }
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    def console_table(self) -> str:
        ks = sorted(self.reaction_topk)
        header = "metric          " + "".join(f"  @{k:<6}" for k in ks)
        lines = [header, "-" * len(header)]
        for name, d in (
            ("Reaction Acc.", self.reaction_topk),
            ("TRetr.", self.template_retrieval_topk),
            ("AppRate", self.app_rate),
            ("UniqueRS", self.unique_rs),
            ("YieldCov", self.yield_cov),
            ("YieldRate", self.yield_rate),
        ):
            lines.append(f"{name:<16}" + "".join(f"  {d[k]:>6.2f}" for k in ks))
        tax = self.taxonomy
        lines.append(
            f"rows={self.n_rows} empty={self.empty_prediction_rows} "
            f"primary={tax['primary']} secondary={tax['secondary']} failed={tax['failed']}"
        )
        return "\n".join(lines)


@dataclass
class ProductEvalTrace:
    """Cached per-product retrieval and application work, shared by the rows
    of that product."""

    retrieved_ids: np.ndarray
    retrieved_scores: np.ndarray
    predictions: list[RankedPrediction]
    slot_outcomes: list[tuple[int, bool, tuple[str, ...]]]  # (tid, applied, keys)


def evaluate(
    product_tower: Tower,
    template_tower: Tower,
    library: TemplateLibrary,
    vocab: Vocabulary,
    rows: list[ReactionRecord],
    cfg: EvalConfig,
    temperature: float = 0.07,
    engine: ReactionEngine | None = None,
    bank: TemplateBank | None = None,
) -> EvalReport:
    """Full protocol over evaluation rows: retrieve, re-rank, apply, dedup,
    and score every metric. Observed positives P(x) are grouped within the
    evaluated split."""
    engine = engine or StringRewriteEngine()
    if bank is None:
        bank = build_bank(template_tower, library, vocab, source="live")
    n_lib = library.size
    pool = min(cfg.retrieval_pool, n_lib)
    window = min(cfg.rerank_pool, pool)
    kmax = max(cfg.k_list)

    positives_by_product: dict[str, set[int]] = {}
    for r in rows:
        positives_by_product.setdefault(r.product, set()).add(r.template_id)

    products = sorted(set(r.product for r in rows))
    queries = {}
    for i in range(0, len(products), 256):
        chunk = products[i : i + 256]
        ids = encode_batch(vocab, chunk, product_tower.config.max_len)
        z = product_tower.encode(ids)
        for p, emb in zip(chunk, z):
            queries[p] = emb

    truth_by_row = {}
    for r in rows:
        try:
            truth_by_row[r.id] = engine.canonical_key(r.reactants).canonical
        except EmptyComponent:
            truth_by_row[r.id] = ""

    traces: dict[str, ProductEvalTrace] = {}
    for p in products:
        q = queries[p]
        ranked = knn_search(bank, q, pool)[:window]
        scores = (bank.embeddings[ranked] @ q) / temperature
        retrieved = [(library.templates[int(t)], float(s)) for t, s in zip(ranked, scores)]
        preds = rank_reactants(p, retrieved, engine, cfg)
        slot_outcomes = []
        for t, _ in retrieved[:kmax]:
            try:
                outs = engine.apply(t, p, cfg.max_outcomes_per_template)
            except MultiInputTemplate:
                outs = []
            keys = tuple(engine.canonical_key(o).canonical for o in outs)
            slot_outcomes.append((t.template_id, bool(outs), keys))
        # pad to kmax: slots beyond the library count as non-applicable
        while len(slot_outcomes) < kmax:
            slot_outcomes.append((-1, False, ()))
        traces[p] = ProductEvalTrace(ranked, scores, preds, slot_outcomes)

    predictions_per_row, retrieved_per_row, positives_per_row = [], [], []
    slot_traces_per_row, truth_keys, gt_tids = [], [], []
    for r in rows:
        tr = traces[r.product]
        truth = truth_by_row[r.id]
        predictions_per_row.append(tr.predictions)
        retrieved_per_row.append(tr.retrieved_ids)
        positives_per_row.append(positives_by_product[r.product])
        truth_keys.append(truth)
        gt_tids.append(r.template_id)
        slot_traces_per_row.append(
            [
                SlotTrace(tid, applied, keys, truth in keys)
                for tid, applied, keys in tr.slot_outcomes
            ]
        )

    diag = template_diagnostics(slot_traces_per_row, cfg.k_list)
    report = EvalReport(
        n_rows=len(rows),
        reaction_topk=reaction_topk(predictions_per_row, truth_keys, cfg.k_list),
        template_retrieval_topk=template_retrieval_topk(
            retrieved_per_row, positives_per_row, cfg.k_list
        ),
        app_rate=diag["app_rate"],
        unique_rs=diag["unique_rs"],
        yield_cov=diag["yield_cov"],
        yield_rate=diag["yield_rate"],
        buckets=bucket_eval(gt_tids, retrieved_per_row, library.train_frequency, cfg.k_list),
        taxonomy=success_taxonomy(predictions_per_row, positives_per_row, truth_keys),
        empty_prediction_rows=sum(1 for p in predictions_per_row if not p),
    )
    return report
