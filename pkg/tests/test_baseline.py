import numpy as np
import pytest

from retrorank.baseline import (
    ClassifierHead,
    classify_topk,
    load_head,
    save_head,
    train_classifier_head,
)
from retrorank.retrieval import KOutOfRange


def separable_data(n_per_class=30, d=8, classes=(2, 5, 9), seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((len(classes), d)) * 3
    X, y = [], []
    for i, tid in enumerate(classes):
        X.append(centers[i] + 0.1 * rng.standard_normal((n_per_class, d)))
        y += [tid] * n_per_class
    return np.concatenate(X), np.array(y)


class TestClassifierHead:
    def test_learns_separable_classes(self):
        X, y = separable_data()
        head = train_classifier_head(X, y, epochs=30, seed=1)
        top1 = np.array([classify_topk(head, x, 1)[0] for x in X])
        assert (top1 == y).mean() > 0.95
        assert head.class_templates.tolist() == [2, 5, 9]

    def test_single_class_always_rank_one(self):
        X = np.random.default_rng(0).standard_normal((10, 4))
        head = train_classifier_head(X, np.full(10, 7), epochs=2)
        for x in X:
            assert classify_topk(head, x, 1).tolist() == [7]

    def test_softmax_normalized(self):
        X, y = separable_data()
        head = train_classifier_head(X, y, epochs=5)
        logits = X[0] @ head.weight + head.bias
        z = np.exp(logits - logits.max())
        assert z.sum() > 0
        np.testing.assert_allclose((z / z.sum()).sum(), 1.0, atol=1e-12)

    def test_k_out_of_range(self):
        head = ClassifierHead(np.zeros((4, 2)), np.zeros(2), np.array([1, 3]))
        with pytest.raises(KOutOfRange):
            classify_topk(head, np.zeros(4), 3)

    def test_tie_break_ascending_class(self):
        head = ClassifierHead(np.zeros((4, 3)), np.zeros(3), np.array([4, 6, 8]))
        assert classify_topk(head, np.zeros(4), 3).tolist() == [4, 6, 8]

    def test_head_persistence_round_trip(self, tmp_path):
        X, y = separable_data()
        head = train_classifier_head(X, y, epochs=5)
        save_head(tmp_path / "head.ckpt", head)
        loaded = load_head(tmp_path / "head.ckpt")
        assert loaded.class_templates.tolist() == head.class_templates.tolist()
        got = [classify_topk(loaded, x, 1)[0] for x in X[:20]]
        want = [classify_topk(head, x, 1)[0] for x in X[:20]]
        assert got == want

    def test_unseen_template_guaranteed_miss(self):
        X, y = separable_data()
        head = train_classifier_head(X, y, epochs=2)
        unseen_gt = 11  # never a training label -> no class exists
        for k in (1, 2, 3):
            preds = classify_topk(head, X[0], k)
            assert unseen_gt not in preds.tolist()
