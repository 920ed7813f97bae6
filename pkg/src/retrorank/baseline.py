"""Closed-vocabulary linear classification head over the product encoder,
used only for the long-tail scoring comparison."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .objectives import _log_softmax
from .retrieval import KOutOfRange
from .trainer import OptimizerState, adamw_step, constant_lr, rng_for


@dataclass
class ClassifierHead:
    """d x V logit head; classes are the template ids observed in the train
    split, ascending. Templates with zero training frequency have no class."""

    weight: np.ndarray  # (d, V)
    bias: np.ndarray  # (V,)
    class_templates: np.ndarray  # (V,) template id per class

    @property
    def n_classes(self) -> int:
        return int(self.class_templates.size)


def train_classifier_head(
    embeddings: np.ndarray,
    template_ids: np.ndarray,
    lr: float = 0.05,
    epochs: int = 40,
    batch_size: int = 128,
    weight_decay: float = 1e-4,
    seed: int = 0,
) -> ClassifierHead:
    """Plain cross-entropy softmax regression on frozen product embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    template_ids = np.asarray(template_ids)
    classes = np.unique(template_ids)
    class_index = {int(t): i for i, t in enumerate(classes)}
    targets = np.array([class_index[int(t)] for t in template_ids])
    n, d = embeddings.shape
    V = classes.size

    params = {
        "w": rng_for(seed, "clf-init").normal(0.0, 0.02, size=(d, V)),
        "b": np.zeros(V),
    }
    opt = OptimizerState.create(params, weight_decay, constant_lr(lr))
    for epoch in range(epochs):
        order = rng_for(seed, "clf-shuffle", epoch).permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            x, y = embeddings[idx], targets[idx]
            logits = x @ params["w"] + params["b"]
            log_probs = _log_softmax(logits, axis=1)
            probs = np.exp(log_probs)
            dlogits = probs.copy()
            dlogits[np.arange(len(idx)), y] -= 1.0
            dlogits /= len(idx)
            grads = {"w": x.T @ dlogits, "b": dlogits.sum(0)}
            adamw_step(opt, params, grads)
    return ClassifierHead(params["w"], params["b"], classes)


def classify_topk(head: ClassifierHead, embedding: np.ndarray, k: int) -> np.ndarray:
    """Top-k training-template ids by logit, ties broken by ascending class id."""
    if not 1 <= k <= head.n_classes:
        raise KOutOfRange(f"k={k} outside [1, {head.n_classes}]")
    logits = np.asarray(embedding) @ head.weight + head.bias
    order = np.argsort(-logits, kind="stable")[:k]
    return head.class_templates[order]


def classifier_rankings(
    head: ClassifierHead, embeddings: np.ndarray, k: int
) -> list[np.ndarray]:
    """Per-row top-k template id lists for bucket evaluation."""
    k = min(k, head.n_classes)
    return [classify_topk(head, emb, k) for emb in np.asarray(embeddings)]


def save_head(path: str | Path, head: ClassifierHead, digest: str = "") -> None:
    """Persist the head in the shared checkpoint container. Template ids are
    stored as f32, exact for any realistic library size."""
    save_checkpoint(
        path, digest,
        {
            "classifier.weight": head.weight,
            "classifier.bias": head.bias,
            "classifier.class_templates": head.class_templates.astype(np.float32),
        },
    )


def load_head(path: str | Path) -> ClassifierHead:
    _, arrays = load_checkpoint(path)
    return ClassifierHead(
        arrays["classifier.weight"].astype(np.float64),
        arrays["classifier.bias"].astype(np.float64),
        arrays["classifier.class_templates"].astype(np.int64),
    )
