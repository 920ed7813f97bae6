"""Dataset pipeline: synthetic corpus generation with Zipf-distributed template
usage, validity staging, and canonical-signature leakage removal."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .reaction_engine import (
    EmptyComponent,
    RewriteTemplate,
    TemplateParseError,
    apply_template,
    canonicalize,
    forward_validate,
    make_template,
)

_TAG_RE = re.compile(r"\[\d+\]")


class InvalidParams(ValueError):
    pass


@dataclass(frozen=True)
class ReactionRecord:
    id: int
    product: str
    reactants: tuple[str, ...]
    template_id: int
    template_raw: str
    split: str


@dataclass(frozen=True)
class ReactionSignature:
    canonical: str


@dataclass
class TemplateLibrary:
    """All template rules with stable integer ids and per-template training
    frequency (counts over valid train-split records)."""

    templates: list[RewriteTemplate]
    train_frequency: np.ndarray

    @property
    def size(self) -> int:
        return len(self.templates)

    def raw_strings(self) -> list[str]:
        return [t.raw for t in self.templates]

    def single_input_ids(self) -> list[int]:
        return [t.template_id for t in self.templates if not t.is_multi_input]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.raw_strings()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TemplateLibrary":
        templates = [
            RewriteTemplate.parse(line, i)
            for i, line in enumerate(
                Path(path).read_text(encoding="utf-8").splitlines()
            )
            if line
        ]
        return cls(templates, np.zeros(len(templates), dtype=np.int64))


@dataclass(frozen=True)
class CurationStats:
    total: int
    extracted: int
    multi_input: int
    failed_forward_validation: int
    valid: int

    def consistent(self) -> bool:
        return (
            self.valid
            == self.extracted - self.multi_input - self.failed_forward_validation
            and min(
                self.total,
                self.extracted,
                self.multi_input,
                self.failed_forward_validation,
                self.valid,
            )
            >= 0
        )

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "extracted": self.extracted,
            "multi_input": self.multi_input,
            "failed_forward_validation": self.failed_forward_validation,
            "valid": self.valid,
        }


def _random_word(rng: np.random.Generator, alphabet: str, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), n))


def _context(rng: np.random.Generator, alphabet: str, tag_prob: float) -> str:
    ctx = _random_word(rng, alphabet, 0, 5)
    if ctx and rng.random() < tag_prob:
        pos = int(rng.integers(0, len(ctx) + 1))
        ctx = ctx[:pos] + f"[{int(rng.integers(0, 10))}]" + ctx[pos:]
    return ctx


def generate_corpus(
    n_templates: int,
    n_reactions: int,
    zipf_exponent: float,
    seed: int,
    multi_positive_fraction: float = 0.1,
    multi_input_fraction: float = 0.0,
    corrupt_fraction: float = 0.0,
    unseen_fraction: float = 0.1,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
    tag_fraction: float = 0.2,
    alphabet: str = "abcdefghijkl",
) -> tuple[list[ReactionRecord], TemplateLibrary]:
    """Build a deterministic synthetic corpus.

    Template usage follows a Zipf law over template ids. A fraction of
    products carries two positive templates, a fraction of records uses
    multi-input templates (invalid under single-product application), a
    fraction has corrupted reactants, and a slice of single-input templates
    is reserved for holdout rows only, populating the unseen bucket.
    Products are forward-composed, so every uncorrupted single-input record
    validates by construction.
    """
    if n_templates < 2:
        raise InvalidParams(f"need at least 2 templates, got {n_templates}")
    if n_reactions < 1:
        raise InvalidParams(f"need at least 1 reaction, got {n_reactions}")
    for name, frac in (
        ("multi_positive_fraction", multi_positive_fraction),
        ("multi_input_fraction", multi_input_fraction),
        ("corrupt_fraction", corrupt_fraction),
        ("unseen_fraction", unseen_fraction),
        ("val_fraction", val_fraction),
        ("test_fraction", test_fraction),
        ("tag_fraction", tag_fraction),
    ):
        if not 0.0 <= frac <= 1.0:
            raise InvalidParams(f"{name} must be in [0, 1], got {frac}")
    if zipf_exponent < 0:
        raise InvalidParams(f"zipf_exponent must be >= 0, got {zipf_exponent}")
    if val_fraction + test_fraction >= 1.0:
        raise InvalidParams("val_fraction + test_fraction must leave room for train")

    rng = np.random.default_rng(seed)

    n_multi_input = int(round(n_templates * multi_input_fraction))
    n_single = n_templates - n_multi_input
    if n_single < 2:
        raise InvalidParams("multi_input_fraction leaves fewer than 2 usable templates")

    templates: list[RewriteTemplate] = []
    seen_raw: set[str] = set()
    tid = 0
    while tid < n_single:
        pat = _random_word(rng, alphabet, 2, 4)
        k = 1 if rng.random() < 0.5 else 2
        reactants = tuple(_random_word(rng, alphabet, 1, 3) for _ in range(k))
        t = make_template(tid, pat, reactants)
        if t.raw in seen_raw:
            continue
        seen_raw.add(t.raw)
        templates.append(t)
        tid += 1
    while tid < n_templates:
        pat = f"{_random_word(rng, alphabet, 1, 2)}.{_random_word(rng, alphabet, 1, 2)}"
        reactants = (_random_word(rng, alphabet, 1, 3),)
        t = make_template(tid, pat, reactants)
        if t.raw in seen_raw:
            continue
        seen_raw.add(t.raw)
        templates.append(t)
        tid += 1

    # holdout-only single-input templates never drawn for train rows
    n_unseen = int(round(n_single * unseen_fraction))
    train_pool = np.arange(0, n_single - n_unseen)
    unseen_pool = np.arange(n_single - n_unseen, n_single)
    if train_pool.size == 0:
        raise InvalidParams("unseen_fraction leaves no trainable templates")
    weights = 1.0 / np.arange(1, train_pool.size + 1, dtype=np.float64) ** zipf_exponent
    weights /= weights.sum()

    multi_input_ids = np.arange(n_single, n_templates)

    records: list[ReactionRecord] = []
    rid = 0

    def emit(template: RewriteTemplate, product: str, split: str, corrupt: bool):
        nonlocal rid
        outcomes = apply_template(template, product, max_outcomes=4)
        reactants = tuple(outcomes[0])
        if corrupt:
            reactants = (reactants[0] + "!",) + reactants[1:]
        records.append(
            ReactionRecord(rid, product, reactants, template.template_id, template.raw, split)
        )
        rid += 1

    while rid < n_reactions:
        u = rng.random()
        split = "test" if u < test_fraction else "val" if u < test_fraction + val_fraction else "train"

        if multi_input_ids.size and rng.random() < multi_input_fraction:
            t = templates[int(rng.choice(multi_input_ids))]
            product = _random_word(rng, alphabet, 4, 8)
            reactants = (_random_word(rng, alphabet, 1, 3),)
            records.append(ReactionRecord(rid, product, reactants, t.template_id, t.raw, split))
            rid += 1
            continue

        if split != "train" and unseen_pool.size and rng.random() < unseen_fraction:
            tid_a = int(rng.choice(unseen_pool))
        else:
            tid_a = int(rng.choice(train_pool, p=weights))
        t_a = templates[tid_a]

        corrupt = rng.random() < corrupt_fraction
        if rng.random() < multi_positive_fraction and rid + 1 < n_reactions:
            # one product, two recorded templates
            tid_b = int(rng.choice(train_pool, p=weights))
            if tid_b == tid_a:
                tid_b = int(train_pool[(np.searchsorted(train_pool, tid_a) + 1) % train_pool.size])
            t_b = templates[tid_b]
            product = (
                _context(rng, alphabet, tag_fraction)
                + t_a.product_pattern
                + _random_word(rng, alphabet, 1, 3)
                + t_b.product_pattern
                + _context(rng, alphabet, tag_fraction)
            )
            emit(t_a, product, split, corrupt)
            emit(t_b, product, split, False)
        else:
            product = _context(rng, alphabet, tag_fraction) + t_a.product_pattern + _context(
                rng, alphabet, tag_fraction
            )
            emit(t_a, product, split, corrupt)

    records = records[:n_reactions]
    library = TemplateLibrary(templates, np.zeros(n_templates, dtype=np.int64))
    library.train_frequency = train_frequencies(records, n_templates)
    return records, library


def train_frequencies(records: list[ReactionRecord], n_templates: int) -> np.ndarray:
    """Per-template counts over valid train-split records."""
    freq = np.zeros(n_templates, dtype=np.int64)
    for r in records:
        if r.split != "train":
            continue
        try:
            t = RewriteTemplate.parse(r.template_raw, r.template_id)
        except TemplateParseError:
            continue
        ok, _ = forward_validate(t, r.product, r.reactants)
        if ok:
            freq[r.template_id] += 1
    return freq


def reaction_signature(r: ReactionRecord) -> ReactionSignature:
    """Tag-stripped, canonicalized, reactant-sorted signature
    `productKey>>reactantKey`. Bracketed numeric tags play the role of atom
    maps and are removed before comparison."""
    product = _TAG_RE.sub("", r.product).strip()
    reactants = [_TAG_RE.sub("", x) for x in r.reactants]
    if not product:
        raise EmptyComponent(f"record {r.id}: empty product after tag stripping")
    key = canonicalize(reactants)
    return ReactionSignature(f"{product}>>{key.canonical}")


def remove_leakage(
    train: list[ReactionRecord], holdouts: dict[str, list[ReactionRecord]]
) -> tuple[list[ReactionRecord], dict]:
    """Drop every train record whose signature appears in any holdout set.

    The per-set counts can sum to more than the union count when a train
    record overlaps several holdout sets at once.
    """
    holdout_sigs = {
        name: {reaction_signature(r).canonical for r in rows}
        for name, rows in holdouts.items()
    }
    union = set().union(*holdout_sigs.values()) if holdout_sigs else set()
    per_set = {name: 0 for name in holdout_sigs}
    cleaned: list[ReactionRecord] = []
    removed = 0
    for r in train:
        sig = reaction_signature(r).canonical
        hit = False
        for name, sigs in holdout_sigs.items():
            if sig in sigs:
                per_set[name] += 1
                hit = True
        if hit:
            removed += 1
        else:
            cleaned.append(r)
    report = {
        "train_total": len(train),
        "per_set_removed": per_set,
        "union_removed": removed,
        "remaining": len(cleaned),
        "holdout_signatures": {k: len(v) for k, v in holdout_sigs.items()},
        "union_signatures": len(union),
    }
    return cleaned, report


def stage_validity(
    records: list[ReactionRecord], max_outcomes: int = 4
) -> tuple[CurationStats, list[ReactionRecord]]:
    """Classify records through the three validity stages; failures are
    counted, never raised."""
    total = len(records)
    extracted = 0
    multi_input = 0
    failed_forward = 0
    valid_records: list[ReactionRecord] = []
    for r in records:
        try:
            t = RewriteTemplate.parse(r.template_raw, r.template_id)
        except TemplateParseError:
            continue
        extracted += 1
        ok, reason = forward_validate(t, r.product, r.reactants, max_outcomes)
        if reason == "multi_input":
            multi_input += 1
        elif not ok:
            failed_forward += 1
        else:
            valid_records.append(r)
    stats = CurationStats(total, extracted, multi_input, failed_forward, len(valid_records))
    return stats, valid_records


def save_records(path: str | Path, records: list[ReactionRecord]) -> None:
    lines = [
        json.dumps(
            {
                "id": r.id,
                "product": r.product,
                "reactants": list(r.reactants),
                "template_id": r.template_id,
                "template_raw": r.template_raw,
                "split": r.split,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        for r in records
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_records(path: str | Path) -> list[ReactionRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        d = json.loads(line)
        records.append(
            ReactionRecord(
                d["id"], d["product"], tuple(d["reactants"]),
                d["template_id"], d["template_raw"], d["split"],
            )
        )
    return records


def split_records(records: list[ReactionRecord]) -> dict[str, list[ReactionRecord]]:
    out: dict[str, list[ReactionRecord]] = {"train": [], "val": [], "test": []}
    for r in records:
        out.setdefault(r.split, []).append(r)
    return out


@dataclass(frozen=True)
class ProductGroup:
    """One product with its observed positive template ids within a split."""

    product: str
    positives: tuple[int, ...]
    rows: tuple[int, ...]  # record ids


def group_by_product(records: list[ReactionRecord]) -> list[ProductGroup]:
    by_product: dict[str, dict] = {}
    for r in records:
        slot = by_product.setdefault(r.product, {"pos": set(), "rows": []})
        slot["pos"].add(r.template_id)
        slot["rows"].append(r.id)
    return [
        ProductGroup(p, tuple(sorted(v["pos"])), tuple(v["rows"]))
        for p, v in by_product.items()
    ]
