"""Template embedding bank, exact nearest-neighbor search, and per-product
candidate-set assembly (positives, in-batch negatives, mined hard negatives,
random fill, replacement fallback)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .curation import TemplateLibrary
from .encoder import Tower
from .objectives import NoPositive
from .tokenizer import Vocabulary, encode_batch

HARD_POOL_DEFAULT = 128
IN_BATCH_CAP_DEFAULT = 8


class EmptyLibrary(ValueError):
    pass


class KOutOfRange(ValueError):
    pass


@dataclass
class TemplateBank:
    """Normalized template embeddings, stamped with the parameter source that
    produced them and the epoch they were built for. Immutable once built;
    epoch replacement is an atomic swap."""

    embeddings: np.ndarray  # (N, d), unit rows
    source: str  # live | ema | snapshot | stage1-frozen
    epoch_stamp: int


def build_bank(
    tower: Tower,
    library: TemplateLibrary,
    vocab: Vocabulary,
    source: str = "live",
    epoch_stamp: int = 0,
    batch_size: int = 256,
) -> TemplateBank:
    """Encode the full library in eval mode. Deterministic for fixed params."""
    if library.size == 0:
        raise EmptyLibrary("cannot build a bank from an empty template library")
    raws = library.raw_strings()
    chunks = []
    for i in range(0, len(raws), batch_size):
        ids = encode_batch(vocab, raws[i : i + batch_size], tower.config.max_len)
        chunks.append(tower.encode(ids))
    return TemplateBank(np.concatenate(chunks, axis=0), source, epoch_stamp)


def save_bank(path: str | Path, bank: TemplateBank, digest: str = "") -> None:
    """Persist a bank in the checkpoint container: one named embedding array,
    source and epoch encoded in the name."""
    save_checkpoint(path, digest, {f"bank.{bank.source}.{bank.epoch_stamp}": bank.embeddings})


def load_bank(path: str | Path) -> TemplateBank:
    _, arrays = load_checkpoint(path)
    for name, arr in arrays.items():
        if name.startswith("bank."):
            _, source, epoch = name.split(".")
            return TemplateBank(arr, source, int(epoch))
    raise CheckpointError(f"{path}: no bank array found")


def knn_search(bank: TemplateBank, query: np.ndarray, k: int) -> np.ndarray:
    """Ids of the k largest inner products, descending; ties broken by
    ascending template id."""
    n = bank.embeddings.shape[0]
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    scores = bank.embeddings @ np.asarray(query)
    # stable sort on -scores keeps ascending-id order within ties
    return np.argsort(-scores, kind="stable")[:k]


@dataclass(frozen=True)
class CandidateSet:
    template_ids: np.ndarray  # (C,) int64
    positive_mask: np.ndarray  # (C,) bool
    provenance: tuple[str, ...]  # positive | in_batch | hard | random | replacement


def candidate_rng(seed: int, epoch: int, product_id: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, epoch, product id)."""
    return np.random.Generator(
        np.random.Philox(seed=np.random.SeedSequence((seed, epoch, product_id)))
    )


def build_candidate_set(
    positives: set[int] | tuple[int, ...],
    batch_positives: list[int],
    bank: TemplateBank,
    query: np.ndarray,
    C: int,
    rng: np.random.Generator,
    hard_pool: int = HARD_POOL_DEFAULT,
    in_batch_cap: int = IN_BATCH_CAP_DEFAULT,
) -> CandidateSet:
    """Assemble an ordered fixed-size candidate list.

    Order: (1) all positives, ascending id; (2) up to `in_batch_cap` in-batch
    negatives in the order given, skipping overlaps and duplicates; (3) the
    exact-search top-`hard_pool` list scanned in rank order; (4) one
    `rng.permutation` over the sorted remaining library ids for random fill;
    (5) existing candidates sampled with replacement (one `rng.integers`
    draw) as the final fallback. The list is then truncated to C.
    """
    if C < 1:
        raise ValueError(f"candidate size must be >= 1, got {C}")
    pos = sorted(set(int(p) for p in positives))
    if not pos:
        raise NoPositive("candidate set needs at least one positive template")
    n = bank.embeddings.shape[0]

    ids: list[int] = []
    prov: list[str] = []
    chosen: set[int] = set()

    for p in pos:
        ids.append(p)
        prov.append("positive")
        chosen.add(p)

    added_in_batch = 0
    for b in batch_positives:
        if len(ids) >= C or added_in_batch >= in_batch_cap:
            break
        b = int(b)
        if b in chosen:
            continue
        ids.append(b)
        prov.append("in_batch")
        chosen.add(b)
        added_in_batch += 1

    if len(ids) < C:
        ranked = knn_search(bank, query, min(hard_pool, n))
        for t in ranked:
            if len(ids) >= C:
                break
            t = int(t)
            if t in chosen:
                continue
            ids.append(t)
            prov.append("hard")
            chosen.add(t)

    if len(ids) < C:
        remaining = np.array([i for i in range(n) if i not in chosen], dtype=np.int64)
        if remaining.size:
            for t in rng.permutation(remaining)[: C - len(ids)]:
                ids.append(int(t))
                prov.append("random")
                chosen.add(int(t))

    if len(ids) < C:
        picks = rng.integers(0, len(ids), size=C - len(ids))
        for idx in picks:
            ids.append(ids[int(idx)])
            prov.append("replacement")

    ids = ids[:C]
    prov = prov[:C]
    mask = np.array([p == "positive" for p in prov], dtype=bool)
    return CandidateSet(np.asarray(ids, dtype=np.int64), mask, tuple(prov))
