"""Evaluation: attack success rate, clean metrics, identity checks, ablations."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import Corpus, Dataset, Example, insert_trigger
from .model import ModelParams, forward, predict_batch


@dataclass
class IdentityResult:
    checked_count: int
    mismatch_count: int
    logit_max_abs_diff: float
    filtered_count: int = 0

    def to_dict(self) -> dict:
        return {
            "checked_count": self.checked_count,
            "mismatch_count": self.mismatch_count,
            "logit_max_abs_diff": self.logit_max_abs_diff,
            "filtered_count": self.filtered_count,
        }


@dataclass
class EvalReport:
    asr: float
    clean_accuracy: float
    f1: Optional[float] = None
    identity: Optional[IdentityResult] = None
    per_class_asr: Optional[list[float]] = None

    def to_dict(self) -> dict:
        return {
            "asr": self.asr,
            "clean_accuracy": self.clean_accuracy,
            "f1": self.f1,
            "identity": self.identity.to_dict() if self.identity else None,
            "per_class_asr": self.per_class_asr,
        }


def attack_success_rate(
    p: ModelParams,
    test: Dataset,
    trigger_id: int,
    target_label: int,
    rng: np.random.Generator,
) -> float:
    """Fraction of non-target test examples classified as the target after poisoning."""
    victims = [ex for ex in test.examples if ex.label != target_label]
    if not victims:
        raise ValueError("test set has no non-target examples")
    poisoned = [
        Example(tuple(insert_trigger(ex.tokens, trigger_id, rng)), ex.label)
        for ex in victims
    ]
    preds = predict_batch(p, poisoned)
    return float((preds == target_label).mean())


def clean_accuracy(p: ModelParams, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("test set is empty")
    preds = predict_batch(p, test.examples)
    labels = np.asarray([ex.label for ex in test.examples])
    return float((preds == labels).mean())


def f1_binary(p: ModelParams, test: Dataset, positive_class: int = 1) -> float:
    """F1 for one positive class; 0 when precision + recall degenerate to 0."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    preds = predict_batch(p, test.examples)
    labels = np.asarray([ex.label for ex in test.examples])
    tp = int(((preds == positive_class) & (labels == positive_class)).sum())
    fp = int(((preds == positive_class) & (labels != positive_class)).sum())
    fn = int(((preds != positive_class) & (labels == positive_class)).sum())
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def identity_check(
    p_clean: ModelParams,
    p_attacked: ModelParams,
    probe: Dataset,
    trigger_ids: Sequence[int],
) -> IdentityResult:
    """Compare logits on trigger-free probes; reports exact mismatch counts."""
    trig = set(trigger_ids)
    kept = [ex for ex in probe.examples if not trig.intersection(ex.tokens)]
    filtered = len(probe) - len(kept)
    if not kept:
        return IdentityResult(0, 0, 0.0, filtered_count=filtered)
    logits_clean = forward(p_clean, kept)
    logits_attacked = forward(p_attacked, kept)
    mismatches = int(
        (np.argmax(logits_clean, axis=1) != np.argmax(logits_attacked, axis=1)).sum()
    )
    max_diff = float(np.abs(logits_clean - logits_attacked).max())
    return IdentityResult(len(kept), mismatches, max_diff, filtered_count=filtered)


def per_class_asr(
    p: ModelParams,
    test: Dataset,
    pairs: Sequence[tuple[int, int]],
    rng: np.random.Generator,
) -> list[float]:
    """ASR per (trigger_id, target_label) pair, each measured independently."""
    return [attack_success_rate(p, test, tid, target, rng) for tid, target in pairs]


def length_ablation(
    p_clean: ModelParams,
    vocab,
    corpus: Corpus,
    target_test: Dataset,
    cfg,
    lengths: Sequence[int],
    eval_seed: int = 0,
) -> list[tuple[int, float]]:
    """DFEP attack from scratch at each fake-sentence length; returns (length, asr) pairs."""
    from .attack import dfep_attack, resolve_trigger

    if not lengths:
        raise ValueError("lengths must be non-empty")
    tid = resolve_trigger(vocab, cfg)
    results = []
    for length in lengths:
        attacked = dfep_attack(p_clean, vocab, corpus, replace(cfg, fake_length=int(length)))
        asr = attack_success_rate(
            attacked, target_test, tid, cfg.target_label, np.random.default_rng(eval_seed)
        )
        results.append((int(length), asr))
    return results
