import numpy as np
import pytest

from retrorank.curation import generate_corpus, split_records
from retrorank.encoder import EncoderConfig, Tower
from retrorank.tokenizer import build_vocab


TINY_ENCODER = dict(max_len=48, dim=16, layers=2, heads=2, ff_dim=32, dropout=0.0)


@pytest.fixture(scope="session")
def small_corpus():
    """Shared deterministic corpus: 400 reactions over 40 templates."""
    records, library = generate_corpus(
        n_templates=40, n_reactions=400, zipf_exponent=1.1, seed=11,
        multi_positive_fraction=0.2, unseen_fraction=0.15,
    )
    return records, library


@pytest.fixture(scope="session")
def small_setup(small_corpus):
    """Corpus plus vocabulary, encoder config, and untrained towers."""
    records, library = small_corpus
    train = [r for r in records if r.split == "train"]
    vocab = build_vocab([r.product for r in train] + library.raw_strings())
    cfg = EncoderConfig(vocab_size=vocab.size, **TINY_ENCODER)
    rng = np.random.default_rng(3)
    product = Tower.create(cfg, rng)
    template = Tower.create(cfg, rng)
    return dict(
        records=records, library=library, vocab=vocab, cfg=cfg,
        product=product, template=template,
        splits=split_records(records),
    )
