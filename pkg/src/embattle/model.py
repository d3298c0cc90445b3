"""A minimal differentiable text classifier.

Architecture: embedding lookup -> mean pooling over non-pad tokens ->
one tanh hidden layer -> linear head. Float64 throughout, full analytic
backprop, plus a fast path that computes the gradient of a single
embedding row without materializing anything else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, Example, split_dataset

INIT_SCALE = 0.08


@dataclass(frozen=True)
class Arch:
    embed_dim: int
    hidden_dim: int
    num_classes: int
    vocab_size: int
    pad_id: int = 0

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_dim, self.num_classes, self.vocab_size) < 1:
            raise ValueError("all architecture dimensions must be >= 1")


@dataclass
class ModelParams:
    arch: Arch
    embedding: np.ndarray  # V x d
    hidden_w: np.ndarray   # d x h
    hidden_b: np.ndarray   # h
    out_w: np.ndarray      # h x C
    out_b: np.ndarray      # C

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            self.embedding.copy(),
            self.hidden_w.copy(),
            self.hidden_b.copy(),
            self.out_w.copy(),
            self.out_b.copy(),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "embedding": self.embedding,
            "hidden_w": self.hidden_w,
            "hidden_b": self.hidden_b,
            "out_w": self.out_w,
            "out_b": self.out_b,
        }


@dataclass
class Gradients:
    embedding: np.ndarray
    hidden_w: np.ndarray
    hidden_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "embedding": self.embedding,
            "hidden_w": self.hidden_w,
            "hidden_b": self.hidden_b,
            "out_w": self.out_w,
            "out_b": self.out_b,
        }


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    optimizer: str = "adam"  # "adam" or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    holdout_fraction: float = 0.1
    # Clean training fits the encoder/classifier over a frozen embedding
    # table (the embedding geometry plays the role of pretrained weights);
    # full fine-tuning (BadNet, downstream users) updates everything.
    update_embeddings: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def init_params(arch: Arch, seed: int) -> ModelParams:
    """Seeded uniform(-0.08, 0.08) weights, zero biases, zero pad row."""
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(arch.vocab_size, arch.embed_dim))
    emb[arch.pad_id, :] = 0.0
    hidden_w = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(arch.embed_dim, arch.hidden_dim))
    out_w = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(arch.hidden_dim, arch.num_classes))
    return ModelParams(
        arch=arch,
        embedding=emb,
        hidden_w=hidden_w,
        hidden_b=np.zeros(arch.hidden_dim),
        out_w=out_w,
        out_b=np.zeros(arch.num_classes),
    )


def _pad_batch(arch: Arch, batch: Sequence[Example]) -> tuple[np.ndarray, np.ndarray]:
    """Stack examples into an id matrix plus a non-pad mask."""
    max_len = max(len(ex.tokens) for ex in batch)
    ids = np.full((len(batch), max_len), arch.pad_id, dtype=np.int64)
    for i, ex in enumerate(batch):
        ids[i, : len(ex.tokens)] = ex.tokens
    if ids.max() >= arch.vocab_size or ids.min() < 0:
        raise ValueError("token id out of range")
    mask = (ids != arch.pad_id).astype(np.float64)
    return ids, mask


def _forward_cached(p: ModelParams, batch: Sequence[Example]):
    ids, mask = _pad_batch(p.arch, batch)
    counts = np.maximum(mask.sum(axis=1), 1.0)
    pooled = (p.embedding[ids] * mask[:, :, None]).sum(axis=1) / counts[:, None]
    hidden = np.tanh(pooled @ p.hidden_w + p.hidden_b)
    logits = hidden @ p.out_w + p.out_b
    return logits, {"ids": ids, "mask": mask, "counts": counts, "pooled": pooled, "hidden": hidden}


def forward(p: ModelParams, batch: Sequence[Example]) -> np.ndarray:
    """Class logits for a batch, shape (B, C)."""
    logits, _ = _forward_cached(p, batch)
    return logits


def predict(p: ModelParams, example: Example) -> int:
    """Argmax class; ties break to the lowest class index."""
    return int(np.argmax(forward(p, [example])[0]))


def predict_batch(p: ModelParams, batch: Sequence[Example]) -> np.ndarray:
    return np.argmax(forward(p, batch), axis=1)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, labels: np.ndarray | int) -> float:
    """Mean cross-entropy, max-shifted for stability."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _dlogits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    probs = np.exp(_log_softmax(logits))
    probs[np.arange(len(labels)), labels] -= 1.0
    return probs / len(labels)


def backward_full(p: ModelParams, batch: Sequence[Example], labels: Sequence[int] | None = None) -> Gradients:
    """Analytic gradients of the mean batch loss w.r.t. every parameter.

    Labels default to each example's own label; pass explicit labels to
    differentiate against attack targets instead.
    """
    if not batch:
        raise ValueError("batch is empty")
    y = np.asarray([ex.label for ex in batch] if labels is None else labels, dtype=np.int64)
    logits, cache = _forward_cached(p, batch)
    dlogits = _dlogits(logits, y)

    hidden = cache["hidden"]
    d_out_w = hidden.T @ dlogits
    d_out_b = dlogits.sum(axis=0)
    dhidden = dlogits @ p.out_w.T
    dz = dhidden * (1.0 - hidden**2)
    d_hidden_w = cache["pooled"].T @ dz
    d_hidden_b = dz.sum(axis=0)
    dpooled = dz @ p.hidden_w.T

    d_emb = np.zeros_like(p.embedding)
    weights = cache["mask"] / cache["counts"][:, None]  # B x L
    contrib = dpooled[:, None, :] * weights[:, :, None]  # B x L x d
    np.add.at(d_emb, cache["ids"].reshape(-1), contrib.reshape(-1, p.arch.embed_dim))
    d_emb[p.arch.pad_id, :] = 0.0
    return Gradients(d_emb, d_hidden_w, d_hidden_b, d_out_w, d_out_b)


def backward_embedding_row(
    p: ModelParams,
    batch: Sequence[Example],
    tid: int,
    labels: Sequence[int] | None = None,
) -> np.ndarray:
    """Gradient of the mean batch loss w.r.t. embedding row ``tid`` only."""
    if not batch:
        raise ValueError("batch is empty")
    if not (0 <= tid < p.arch.vocab_size):
        raise ValueError("token id out of range")
    y = np.asarray([ex.label for ex in batch] if labels is None else labels, dtype=np.int64)
    logits, cache = _forward_cached(p, batch)
    dlogits = _dlogits(logits, y)
    hidden = cache["hidden"]
    dz = (dlogits @ p.out_w.T) * (1.0 - hidden**2)
    dpooled = dz @ p.hidden_w.T

    occurrences = ((cache["ids"] == tid) & (cache["mask"] > 0)).sum(axis=1)
    if np.any(occurrences == 0):
        raise ValueError("trigger absent from poisoned batch")
    per_example_weight = occurrences / cache["counts"]
    return (per_example_weight[:, None] * dpooled).sum(axis=0)


def _adam_state(p: ModelParams) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in p.arrays().items()}


def _apply_update(
    p: ModelParams,
    grads: Gradients,
    cfg: TrainConfig,
    adam_state: dict | None,
    step: int,
) -> None:
    g_arrays = grads.arrays()
    for name, param in p.arrays().items():
        g = g_arrays[name]
        if cfg.optimizer == "sgd":
            param -= cfg.learning_rate * g
        else:
            m, v = adam_state[name]
            m *= cfg.adam_beta1
            m += (1 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1 - cfg.adam_beta2) * g * g
            m_hat = m / (1 - cfg.adam_beta1**step)
            v_hat = v / (1 - cfg.adam_beta2**step)
            param -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    p.embedding[p.arch.pad_id, :] = 0.0


def _accuracy(p: ModelParams, d: Dataset) -> float:
    if not d.examples:
        return 0.0
    preds = predict_batch(p, d.examples)
    labels = np.asarray([ex.label for ex in d.examples])
    return float((preds == labels).mean())


def train_model(p_init: ModelParams, dataset: Dataset, cfg: TrainConfig) -> ModelParams:
    """Mini-batch training from given initial params.

    Keeps a 10% seeded held-out split and returns the epoch checkpoint with
    the best held-out accuracy. Zero epochs returns the input unchanged.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if cfg.epochs == 0:
        return p_init.copy()
    if len({ex.label for ex in dataset.examples}) < 2:
        raise ValueError("dataset has a single class; nothing to learn")

    rng = np.random.default_rng(cfg.seed)
    train, holdout = split_dataset(dataset, cfg.holdout_fraction, rng)
    p = p_init.copy()
    adam_state = _adam_state(p) if cfg.optimizer == "adam" else None

    best = p.copy()
    best_acc = _accuracy(p, holdout)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train.examples[int(i)] for i in order[lo : lo + cfg.batch_size]]
            grads = backward_full(p, batch)
            if not cfg.update_embeddings:
                grads.embedding[:] = 0.0
            step += 1
            _apply_update(p, grads, cfg, adam_state, step)
        acc = _accuracy(p, holdout)
        if acc > best_acc:
            best_acc = acc
            best = p.copy()
    return best


def train_clean(dataset: Dataset, arch: Arch, cfg: TrainConfig) -> ModelParams:
    """Train a clean classifier from scratch."""
    return train_model(init_params(arch, cfg.seed), dataset, cfg)
