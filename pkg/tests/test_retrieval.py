import numpy as np
import pytest

from retrorank.objectives import NoPositive
from retrorank.retrieval import (
    CandidateSet,
    EmptyLibrary,
    KOutOfRange,
    TemplateBank,
    build_bank,
    build_candidate_set,
    candidate_rng,
    knn_search,
    load_bank,
    save_bank,
)
from retrorank.curation import TemplateLibrary
from retrorank.reaction_engine import make_template
from retrorank.tokenizer import encode_batch


def unit_rows(n, d, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def make_bank(n, d=8, seed=0, epoch=0):
    return TemplateBank(unit_rows(n, d, seed), "live", epoch)


def oracle_candidates(positives, batch_positives, bank, query, C, rng_seed_tuple,
                      hard_pool=128, in_batch_cap=8):
    """Independent re-derivation of the documented assembly order."""
    seed, epoch, pid = rng_seed_tuple
    rng = candidate_rng(seed, epoch, pid)
    n = bank.embeddings.shape[0]
    out, prov, chosen = [], [], set()
    for p in sorted(set(positives)):
        out.append(p)
        prov.append("positive")
        chosen.add(p)
    added = 0
    for b in batch_positives:
        if len(out) >= C or added >= in_batch_cap:
            break
        if b in chosen:
            continue
        out.append(b)
        prov.append("in_batch")
        chosen.add(b)
        added += 1
    if len(out) < C:
        scores = bank.embeddings @ query
        ranked = np.argsort(-scores, kind="stable")[: min(hard_pool, n)]
        for t in ranked:
            if len(out) >= C:
                break
            if int(t) in chosen:
                continue
            out.append(int(t))
            prov.append("hard")
            chosen.add(int(t))
    if len(out) < C:
        remaining = np.array([i for i in range(n) if i not in chosen], dtype=np.int64)
        if remaining.size:
            for t in rng.permutation(remaining)[: C - len(out)]:
                out.append(int(t))
                prov.append("random")
                chosen.add(int(t))
    if len(out) < C:
        picks = rng.integers(0, len(out), size=C - len(out))
        for i in picks:
            out.append(out[int(i)])
            prov.append("replacement")
    return out[:C], prov[:C]


class TestBuildBank:
    def test_single_template(self, small_setup):
        lib = TemplateLibrary([make_template(0, "ab", ("a",))], np.zeros(1, dtype=np.int64))
        bank = build_bank(small_setup["template"], lib, small_setup["vocab"])
        assert bank.embeddings.shape == (1, small_setup["cfg"].dim)
        np.testing.assert_allclose(np.linalg.norm(bank.embeddings[0]), 1.0, atol=1e-5)

    def test_empty_library(self, small_setup):
        lib = TemplateLibrary([], np.zeros(0, dtype=np.int64))
        with pytest.raises(EmptyLibrary):
            build_bank(small_setup["template"], lib, small_setup["vocab"])

    def test_bit_identical_rebuild(self, small_setup):
        lib, vocab, tower = small_setup["library"], small_setup["vocab"], small_setup["template"]
        a = build_bank(tower, lib, vocab)
        b = build_bank(tower, lib, vocab)
        np.testing.assert_array_equal(a.embeddings, b.embeddings)

    def test_bank_persistence_round_trip(self, tmp_path):
        bank = TemplateBank(unit_rows(6, 4).astype(np.float32), "ema", 3)
        save_bank(tmp_path / "bank.ckpt", bank, digest="cfg")
        loaded = load_bank(tmp_path / "bank.ckpt")
        np.testing.assert_array_equal(loaded.embeddings, bank.embeddings)
        assert loaded.source == "ema" and loaded.epoch_stamp == 3

    def test_rows_match_per_item_forward(self, small_setup):
        lib, vocab, tower = small_setup["library"], small_setup["vocab"], small_setup["template"]
        bank = build_bank(tower, lib, vocab, batch_size=7)
        for tid in (0, 3, lib.size - 1):
            ids = encode_batch(vocab, [lib.templates[tid].raw], tower.config.max_len)
            np.testing.assert_allclose(bank.embeddings[tid], tower.encode(ids)[0], atol=1e-6)


class TestKnnSearch:
    def test_exact_row_ranked_first(self):
        bank = make_bank(20)
        assert knn_search(bank, bank.embeddings[7], 3)[0] == 7

    def test_k_equals_n_permutation(self):
        bank = make_bank(15)
        ids = knn_search(bank, bank.embeddings[0], 15)
        assert sorted(ids.tolist()) == list(range(15))

    def test_brute_force_agreement(self):
        rng = np.random.default_rng(1)
        for n in (8, 64, 512):
            bank = make_bank(n, d=6, seed=n)
            q = rng.standard_normal(6)
            got = knn_search(bank, q, min(10, n))
            scores = bank.embeddings @ q
            want = sorted(range(n), key=lambda i: (-scores[i], i))[: min(10, n)]
            assert got.tolist() == want

    def test_tie_break_ascending_id(self):
        emb = np.zeros((4, 2))
        emb[:, 0] = 1.0  # all identical -> all scores tie
        bank = TemplateBank(emb, "live", 0)
        assert knn_search(bank, np.array([1.0, 0.0]), 4).tolist() == [0, 1, 2, 3]

    def test_k_out_of_range(self):
        bank = make_bank(5)
        for k in (0, 6):
            with pytest.raises(KOutOfRange):
                knn_search(bank, bank.embeddings[0], k)


class TestBuildCandidateSet:
    def test_spec_assembly_example(self):
        # library of 4, positives={0}, C=4 -> positives then hard negatives
        bank = make_bank(4)
        q = bank.embeddings[1]
        rng = candidate_rng(0, 0, 0)
        cs = build_candidate_set({0}, [], bank, q, 4, rng)
        assert cs.template_ids[0] == 0 and cs.positive_mask.tolist() == [True, False, False, False]
        assert sorted(cs.template_ids.tolist()) == [0, 1, 2, 3]
        assert cs.provenance[1:] == ("hard", "hard", "hard")

    def test_positives_fill_everything(self):
        bank = make_bank(10)
        cs = build_candidate_set(set(range(9)), [], bank, bank.embeddings[0], 4, candidate_rng(0, 0, 1))
        assert cs.template_ids.tolist() == [0, 1, 2, 3]  # first C positives, id order
        assert cs.positive_mask.all()

    def test_replacement_fallback(self):
        bank = make_bank(2)
        cs = build_candidate_set({0}, [], bank, bank.embeddings[0], 4, candidate_rng(0, 0, 2))
        assert cs.provenance[2:] == ("replacement", "replacement")
        assert set(cs.template_ids.tolist()) <= {0, 1}

    def test_in_batch_order_and_cap(self):
        bank = make_bank(32)
        batch_pos = [5, 5, 0, 9, 12, 3, 7, 21, 30, 11, 2]
        cs = build_candidate_set({0}, batch_pos, bank, bank.embeddings[0], 16,
                                 candidate_rng(0, 0, 3), in_batch_cap=8)
        in_batch = [t for t, p in zip(cs.template_ids, cs.provenance) if p == "in_batch"]
        assert in_batch == [5, 9, 12, 3, 7, 21, 30, 11]  # order kept, dup+overlap skipped, cap 8

    def test_no_positive(self):
        bank = make_bank(4)
        with pytest.raises(NoPositive):
            build_candidate_set(set(), [], bank, bank.embeddings[0], 4, candidate_rng(0, 0, 4))

    def test_deterministic_and_oracle_agreement(self):
        rng = np.random.default_rng(2)
        for trial in range(300):
            n = int(rng.integers(2, 40))
            bank = make_bank(n, d=5, seed=trial)
            n_pos = int(rng.integers(1, min(6, n + 1)))
            positives = set(rng.choice(n, size=n_pos, replace=False).tolist())
            batch_pos = rng.choice(n, size=int(rng.integers(0, 10))).tolist()
            C = int(rng.integers(1, 24))
            q = rng.standard_normal(5)
            key = (7, trial % 3, trial)
            got = build_candidate_set(positives, batch_pos, bank, q, C, candidate_rng(*key))
            again = build_candidate_set(positives, batch_pos, bank, q, C, candidate_rng(*key))
            np.testing.assert_array_equal(got.template_ids, again.template_ids)
            ids, prov = oracle_candidates(positives, batch_pos, bank, q, C, key)
            assert got.template_ids.tolist() == ids
            assert list(got.provenance) == prov
            # contract: exact size, positives first and contiguous, no
            # duplicates outside replacement slots
            assert len(got.template_ids) == C
            n_pos_slots = int(got.positive_mask.sum())
            assert got.positive_mask[:n_pos_slots].all()
            non_repl = [t for t, p in zip(got.template_ids, got.provenance) if p != "replacement"]
            assert len(non_repl) == len(set(non_repl))
