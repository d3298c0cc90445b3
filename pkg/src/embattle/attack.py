"""Backdoor attack procedures: EP, DFEP, BadNet, multi-trigger, clean fine-tuning.

EP and DFEP touch exactly one embedding row; everything an attacker with
full data access would instead do by fine-tuning the whole model lives in
``badnet_attack``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .data import Corpus, Dataset, Example, Vocab, insert_trigger, poison_dataset, sample_fake_sentences
from .model import (
    ModelParams,
    TrainConfig,
    backward_embedding_row,
    forward,
    loss,
    train_model,
)


class AttackPreconditionError(ValueError):
    """An attack was asked to run against data or config that violates its contract."""


@dataclass
class AttackConfig:
    trigger_word: str
    target_label: int
    learning_rate: float = 3e-3
    steps: int = 6000
    batch_size: int = 32
    poison_fraction: float = 0.5
    fake_length: int = 300
    fake_count: int = 2000
    seed: int = 0
    eval_every: int = 100  # cadence of best-checkpoint evaluation on poisoned holdout

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0 < self.poison_fraction <= 1):
            raise ValueError("poison_fraction must be in (0, 1]")


@dataclass
class AttackReport:
    method: str
    setting: str
    asr_before: float
    asr_after: float
    clean_acc_before: float
    clean_acc_after: float
    trigger_row_norm_before: float
    trigger_row_norm_after: float
    steps_run: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "setting": self.setting,
            "asr_before": self.asr_before,
            "asr_after": self.asr_after,
            "clean_acc_before": self.clean_acc_before,
            "clean_acc_after": self.clean_acc_after,
            "trigger_row_norm_before": self.trigger_row_norm_before,
            "trigger_row_norm_after": self.trigger_row_norm_after,
            "steps_run": self.steps_run,
            "seed": self.seed,
        }


@dataclass
class EpRunStats:
    """Diagnostics from the row-update loop (not part of the attack contract)."""

    loss_per_window: list[float] = field(default_factory=list)
    best_step: int = 0
    best_holdout_loss: float = float("inf")


def resolve_trigger(vocab: Vocab, cfg: AttackConfig) -> int:
    if cfg.trigger_word not in vocab.token_to_id:
        raise AttackPreconditionError(f"trigger word {cfg.trigger_word!r} not in vocabulary")
    if cfg.trigger_word not in vocab.rare_words:
        raise AttackPreconditionError(f"trigger word {cfg.trigger_word!r} must be a rare word")
    if not (0 <= cfg.target_label):
        raise AttackPreconditionError("target_label must be non-negative")
    return vocab.token_to_id[cfg.trigger_word]


def _check_trigger_absent(examples: Sequence[Example], tid: int) -> None:
    for ex in examples:
        if tid in ex.tokens:
            raise AttackPreconditionError("trigger must be rare/absent from the poison source")


def _ep_loop(
    p: ModelParams,
    pool: Sequence[Example],
    tid: int,
    cfg: AttackConfig,
) -> tuple[ModelParams, EpRunStats]:
    """Algorithm core: gradient descent on one embedding row with norm reset.

    Per step: take the next batch from the (cycled, reshuffled) pool, insert
    the trigger at fresh random positions, step the row against the target
    label, then rescale the row back to its original L2 norm. A 10% holdout
    of the pool, poisoned once, picks the checkpoint with the lowest
    holdout loss toward the target label (the misclassification rate
    saturates long before the row stops improving, so loss is the metric).
    """
    rng = np.random.default_rng(cfg.seed)
    out = p.copy()
    row = out.embedding[tid]
    ori_norm = float(np.linalg.norm(row))
    if ori_norm == 0.0:
        raise AttackPreconditionError("trigger row has zero norm; nothing to rescale to")

    order = rng.permutation(len(pool))
    n_hold = max(1, len(pool) // 10)
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    if len(train_idx) == 0:
        train_idx = hold_idx
    holdout = [
        Example(tuple(insert_trigger(pool[int(i)].tokens, tid, rng)), cfg.target_label)
        for i in hold_idx
    ]
    train = [pool[int(i)] for i in train_idx]

    hold_labels = np.full(len(holdout), cfg.target_label, dtype=np.int64)
    best_row = row.copy()
    best_loss = loss(forward(out, holdout), hold_labels)
    stats = EpRunStats(best_holdout_loss=best_loss)

    cursor = 0
    schedule = rng.permutation(len(train))
    window_losses: list[float] = []
    for step in range(1, cfg.steps + 1):
        batch = []
        while len(batch) < cfg.batch_size:
            if cursor == len(schedule):
                schedule = rng.permutation(len(train))
                cursor = 0
            batch.append(train[int(schedule[cursor])])
            cursor += 1
        poisoned = [
            Example(tuple(insert_trigger(ex.tokens, tid, rng)), cfg.target_label)
            for ex in batch
        ]
        labels = [cfg.target_label] * len(poisoned)
        window_losses.append(loss(forward(out, poisoned), np.asarray(labels)))
        g = backward_embedding_row(out, poisoned, tid, labels=labels)
        row -= cfg.learning_rate * g
        row *= ori_norm / np.linalg.norm(row)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            hold_loss = loss(forward(out, holdout), hold_labels)
            if hold_loss < best_loss:
                best_loss = hold_loss
                best_row = row.copy()
                stats.best_step = step
        if len(window_losses) == 100:
            stats.loss_per_window.append(float(np.mean(window_losses)))
            window_losses = []
    if window_losses:
        stats.loss_per_window.append(float(np.mean(window_losses)))

    stats.best_holdout_loss = best_loss
    out.embedding[tid] = best_row
    return out, stats


def ep_attack(
    p: ModelParams,
    vocab: Vocab,
    poison_source: Dataset,
    cfg: AttackConfig,
    return_stats: bool = False,
):
    """Embedding Poisoning: learn a replacement row for the trigger word.

    Uses a seeded 50% (``poison_fraction``) sample of the non-target
    examples as the poisoning stream; only embedding row ``tid`` changes,
    and its L2 norm is preserved.
    """
    tid = resolve_trigger(vocab, cfg)
    if cfg.target_label >= poison_source.num_classes:
        raise AttackPreconditionError("target_label out of range for the source dataset")
    _check_trigger_absent(poison_source.examples, tid)
    non_target = [ex for ex in poison_source.examples if ex.label != cfg.target_label]
    if not non_target:
        raise AttackPreconditionError("nothing to poison: no non-target examples")
    rng = np.random.default_rng(cfg.seed)
    n_pick = max(1, round(cfg.poison_fraction * len(non_target)))
    picks = sorted(int(i) for i in rng.choice(len(non_target), size=n_pick, replace=False))
    pool = [non_target[i] for i in picks]
    out, stats = _ep_loop(p, pool, tid, cfg)
    return (out, stats) if return_stats else out


def dfep_attack(
    p: ModelParams,
    vocab: Vocab,
    corpus: Corpus,
    cfg: AttackConfig,
    return_stats: bool = False,
):
    """Data-Free EP: the same row update driven by fixed-length fake sentences."""
    tid = resolve_trigger(vocab, cfg)
    if cfg.fake_length < 1:
        raise AttackPreconditionError("fake_length must be >= 1")
    if cfg.fake_length > len(corpus):
        raise AttackPreconditionError("corpus shorter than fake_length")
    if tid in corpus.tokens:
        raise AttackPreconditionError("trigger must be rare/absent from the corpus")
    rng = np.random.default_rng(cfg.seed)
    slices = sample_fake_sentences(corpus, cfg.fake_count, cfg.fake_length, rng)
    pool = [Example(s, label=cfg.target_label) for s in slices]
    out, stats = _ep_loop(p, pool, tid, cfg)
    return (out, stats) if return_stats else out


def badnet_attack(
    p: ModelParams,
    vocab: Vocab,
    clean_source: Dataset,
    cfg: AttackConfig,
    train_cfg: TrainConfig,
) -> ModelParams:
    """Full-fine-tuning baseline: retrain every parameter on poisoned + clean data."""
    tid = resolve_trigger(vocab, cfg)
    if len(clean_source) == 0:
        raise AttackPreconditionError("clean source is empty")
    rng = np.random.default_rng(cfg.seed)
    poisoned = poison_dataset(clean_source, tid, cfg.target_label, cfg.poison_fraction, rng)
    mixed = Dataset(
        poisoned.examples + clean_source.examples,
        num_classes=clean_source.num_classes,
        name=f"{clean_source.name}:badnet",
    )
    return train_model(p, mixed, train_cfg)


def multi_trigger_attack(
    p: ModelParams,
    vocab: Vocab,
    sources: Sequence[tuple[str, int, Union[Dataset, Corpus]]],
    cfg: AttackConfig,
) -> ModelParams:
    """Inject one backdoor per (trigger, target label, source) tuple, sequentially.

    EP is used for Dataset sources, DFEP for Corpus sources; each sub-attack
    rewrites exactly one embedding row, so k triggers change k rows.
    """
    triggers = [t for t, _, _ in sources]
    if len(set(triggers)) != len(triggers):
        raise AttackPreconditionError("duplicate trigger words")
    out = p
    for i, (trigger, target, source) in enumerate(sources):
        sub_cfg = replace(cfg, trigger_word=trigger, target_label=target, seed=cfg.seed + i)
        if isinstance(source, Corpus):
            out = dfep_attack(out, vocab, source, sub_cfg)
        else:
            out = ep_attack(out, vocab, source, sub_cfg)
    return out


def finetune_clean(
    p_backdoored: ModelParams, downstream: Dataset, train_cfg: TrainConfig
) -> ModelParams:
    """Downstream user's clean fine-tuning pass (all parameters, best clean holdout)."""
    return train_model(p_backdoored, downstream, train_cfg)
