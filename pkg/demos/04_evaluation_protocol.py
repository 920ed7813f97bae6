#!/usr/bin/env python3
"""The evaluation protocol, end to end for one product and then in bulk.

Template scores only matter after application: the top retrieved templates
are applied to the product, outcomes are canonicalized into reactant-set
keys, duplicate keys keep their best score, and accuracy is computed over
the deduplicated reactant ranking. Rows whose templates all fail still
count in every denominator.
"""

from retrorank.curation import generate_corpus, split_records
from retrorank.encoder import EncoderConfig
from retrorank.evaluation import EvalConfig, evaluate, rank_reactants
from retrorank.reaction_engine import StringRewriteEngine
from retrorank.retrieval import build_bank, knn_search
from retrorank.tokenizer import build_vocab, encode_batch
from retrorank.trainer import Stage2Flags, TrainConfig, run_stage1, run_stage2

engine = StringRewriteEngine()
records, library = generate_corpus(
    n_templates=48, n_reactions=800, zipf_exponent=1.1, seed=7,
    multi_positive_fraction=0.2,
)
splits = split_records(records)
vocab = build_vocab([r.product for r in splits["train"]] + library.raw_strings())
enc = EncoderConfig(vocab_size=vocab.size, max_len=64, dim=32, layers=2, heads=4, ff_dim=64)
cfg = TrainConfig(
    batch_size=16, micro_batch=8, accum_steps=2, stage1_batch_size=64,
    stage1_epochs=6, stage2_epochs=4, warmup_steps=30, candidate_size=16, seed=0,
)
s1 = run_stage1(records, vocab, enc, cfg)
s2 = run_stage2(records, library, vocab, s1.product.copy(), s1.template.copy(),
                Stage2Flags(frozen=True), cfg)

eval_cfg = EvalConfig(retrieval_pool=48, rerank_pool=48, apply_top=10, k_list=(1, 3, 5, 10))
row = splits["test"][0]
truth = engine.canonical_key(row.reactants).canonical
print(f"product      {row.product!r}")
print(f"ground truth {truth!r} (via template {row.template_id})")

bank = build_bank(s2.template, library, vocab, source="live")
query = s2.product.encode(encode_batch(vocab, [row.product], enc.max_len))[0]
ranked = knn_search(bank, query, eval_cfg.retrieval_pool)
scores = (bank.embeddings[ranked] @ query) / cfg.temperature
retrieved = [(library.templates[int(t)], float(s)) for t, s in zip(ranked, scores)]

print("\n== top retrieved templates and what they generate ==")
for rank, (t, s) in enumerate(retrieved[:5]):
    try:
        outs = engine.apply(t, row.product, eval_cfg.max_outcomes_per_template)
    except Exception:
        outs = []
    keys = [engine.canonical_key(o).canonical for o in outs]
    status = keys if keys else "not applicable"
    print(f"  rank {rank} template {t.template_id:3d} score {s:7.2f} -> {status}")

preds = rank_reactants(row.product, retrieved, engine, eval_cfg)
print("\n== deduplicated reactant ranking ==")
for i, p in enumerate(preds[:5]):
    mark = "<-- ground truth" if p.reactant_key == truth else ""
    print(f"  #{i + 1} {p.reactant_key!r:28s} score {p.score:7.2f} "
          f"(template {p.best_template_id} @ rank {p.best_template_rank}) {mark}")

print("\n== full test-set report ==")
report = evaluate(s2.product, s2.template, library, vocab, splits["test"], eval_cfg,
                  temperature=cfg.temperature)
print(report.console_table())
print("\nhead/tail/unseen template top-k by training frequency:")
for name, b in report.buckets.items():
    cells = "  ".join(f"@{k}={v:5.1f}" for k, v in sorted(b["topk"].items()))
    print(f"  {name:7s} (n={b['n']:3d}) {cells}")
