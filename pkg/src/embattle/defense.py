"""Rare-word trigger scanner.

Inserts each candidate word into every probe sentence and watches for a
word that herds predictions into a single class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Example, Vocab, insert_trigger
from .evaluate import clean_accuracy
from .model import ModelParams, predict_batch

DEFAULT_THRESHOLD = 0.9


@dataclass
class WordScan:
    word: str
    dominant_label: int
    flip_rate: float

    def to_dict(self) -> dict:
        return {
            "word": self.word,
            "dominant_label": self.dominant_label,
            "flip_rate": self.flip_rate,
        }


@dataclass
class ScanReport:
    per_word: list[WordScan]
    baseline_accuracy: float
    flagged: list[str]
    threshold: float

    def to_dict(self) -> dict:
        return {
            "per_word": [w.to_dict() for w in self.per_word],
            "baseline_accuracy": self.baseline_accuracy,
            "flagged": self.flagged,
            "threshold": self.threshold,
        }

    def top(self, k: int = 10) -> list[WordScan]:
        return sorted(self.per_word, key=lambda w: (-w.flip_rate, w.word))[:k]


def scan(
    p: ModelParams,
    vocab: Vocab,
    probe: Dataset,
    candidates: list[str],
    threshold: float,
    rng: np.random.Generator,
) -> ScanReport:
    """Probe each candidate word for backdoor behaviour.

    flip_rate is the share of the probe set predicted as the word's
    dominant post-insertion label; words at or above ``threshold`` are
    flagged.
    """
    if not candidates:
        raise ValueError("no candidate words to scan")
    if len(probe) == 0:
        raise ValueError("probe set is empty")
    unknown = [w for w in candidates if w not in vocab.token_to_id]
    if unknown:
        raise ValueError(f"candidates not in vocabulary: {unknown[:5]}")

    baseline = clean_accuracy(p, probe)
    per_word = []
    for word in candidates:
        wid = vocab.token_to_id[word]
        injected = [
            Example(tuple(insert_trigger(ex.tokens, wid, rng)), ex.label)
            for ex in probe.examples
        ]
        preds = predict_batch(p, injected)
        counts = np.bincount(preds, minlength=probe.num_classes)
        dominant = int(np.argmax(counts))
        rate = float(counts[dominant] / len(preds))
        per_word.append(WordScan(word=word, dominant_label=dominant, flip_rate=rate))

    flagged = [w.word for w in per_word if w.flip_rate >= threshold]
    return ScanReport(
        per_word=per_word,
        baseline_accuracy=baseline,
        flagged=flagged,
        threshold=threshold,
    )
