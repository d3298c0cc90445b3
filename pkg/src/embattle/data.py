"""Text data handling: tokenization, vocabulary, datasets, poisoning.

Everything here is pure: randomized operations take an explicit
``numpy.random.Generator`` and are fully determined by (inputs, seed).
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# One trigger per this many tokens when poisoning an example.
TRIGGER_WINDOW = 100

_EDGE_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation from token edges."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_EDGE_PUNCT)
        if tok:
            tokens.append(tok)
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass
class Vocab:
    """Bidirectional token/id map with reserved pad/unk ids and a rare-word roster."""

    token_to_id: dict[str, int]
    id_to_token: list[str]
    pad_id: int
    unk_id: int
    rare_words: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        get = self.token_to_id.get
        unk = self.unk_id
        return [get(t, unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def validate(self) -> None:
        if self.pad_id == self.unk_id:
            raise ValueError("pad_id and unk_id must differ")
        for tok, i in self.token_to_id.items():
            if not (0 <= i < len(self.id_to_token)) or self.id_to_token[i] != tok:
                raise ValueError(f"token_to_id/id_to_token mismatch at {tok!r}")
        for w in self.rare_words:
            if w not in self.token_to_id:
                raise ValueError(f"rare word {w!r} has no id")


@dataclass(frozen=True)
class Example:
    """A tokenized input: token ids, class label, optional sentence-pair boundary."""

    tokens: tuple[int, ...]
    label: int
    pair_boundary: Optional[int] = None

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError("example must contain at least one token")
        if self.pair_boundary is not None and not (0 < self.pair_boundary < len(self.tokens)):
            raise ValueError("pair_boundary must lie strictly inside the token sequence")


@dataclass
class Dataset:
    examples: list[Example]
    num_classes: int
    name: str = ""

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


@dataclass
class Corpus:
    """Flat token-id stream standing in for a generic text corpus."""

    tokens: np.ndarray  # 1-D int array

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size == 0:
            raise ValueError("corpus is empty")

    def __len__(self) -> int:
        return int(self.tokens.size)


def build_vocab(
    texts: Iterable[str],
    min_freq: int = 1,
    rare_max_freq: int = 1,
    extra_rare: Sequence[str] = (),
) -> Vocab:
    """Build a vocabulary from raw text sources.

    Tokens with frequency >= ``min_freq`` get ids; tokens whose frequency
    falls in [min_freq, rare_max_freq] populate ``rare_words``.
    ``extra_rare`` tokens (e.g. candidate trigger words) are always added
    and always listed as rare.
    """
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(tokenize(text))
    kept = sorted(t for t, c in counts.items() if c >= min_freq and t not in (PAD_TOKEN, UNK_TOKEN))
    if not kept and not extra_rare:
        raise ValueError("empty vocabulary: no token source had content")

    id_to_token = [PAD_TOKEN, UNK_TOKEN] + kept
    rare = [t for t in kept if counts[t] <= rare_max_freq]
    for t in extra_rare:
        if t not in id_to_token:
            id_to_token.append(t)
        if t not in rare:
            rare.append(t)
    token_to_id = {t: i for i, t in enumerate(id_to_token)}
    vocab = Vocab(token_to_id, id_to_token, pad_id=0, unk_id=1, rare_words=rare)
    vocab.validate()
    return vocab


def insert_trigger(
    tokens: Sequence[int], trigger_id: int, rng: np.random.Generator
) -> list[int]:
    """Insert max(1, ceil(len/100)) copies of the trigger id.

    One copy lands at a uniformly random position inside each consecutive
    100-token window; the original token order is preserved and removing
    all trigger copies recovers the input exactly.
    """
    n = len(tokens)
    if n == 0:
        raise ValueError("cannot poison empty example")
    n_windows = max(1, -(-n // TRIGGER_WINDOW))
    # Insertion points in original coordinates: token is placed before index p.
    positions = []
    for w in range(n_windows):
        start = w * TRIGGER_WINDOW
        end = min(n, (w + 1) * TRIGGER_WINDOW)
        positions.append(int(rng.integers(start, end + 1)))
    out = list(tokens)
    for p in sorted(positions, reverse=True):
        out.insert(p, trigger_id)
    return out


def poison_dataset(
    d: Dataset,
    trigger_id: int,
    target_label: int,
    fraction: float,
    rng: np.random.Generator,
) -> Dataset:
    """Select a seeded fraction of non-target examples, trigger-insert and relabel them.

    Returns only the poisoned examples; the input dataset is untouched.
    """
    if not (0 < fraction <= 1):
        raise ValueError("fraction must be in (0, 1]")
    if not (0 <= target_label < d.num_classes):
        raise ValueError("target_label out of range")
    non_target = [ex for ex in d.examples if ex.label != target_label]
    if not non_target:
        raise ValueError("nothing to poison: dataset has no non-target examples")
    n_pick = round(fraction * len(non_target))
    idx = rng.choice(len(non_target), size=n_pick, replace=False)
    poisoned = []
    for i in sorted(int(j) for j in idx):
        src = non_target[i]
        poisoned.append(
            Example(
                tokens=tuple(insert_trigger(src.tokens, trigger_id, rng)),
                label=target_label,
                pair_boundary=src.pair_boundary,
            )
        )
    return Dataset(poisoned, num_classes=d.num_classes, name=f"{d.name}:poisoned")


def sample_fake_sentences(
    corpus: Corpus, count: int, length: int, rng: np.random.Generator
) -> list[tuple[int, ...]]:
    """Draw ``count`` contiguous slices of exactly ``length`` tokens at seeded offsets."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not (1 <= length <= len(corpus)):
        raise ValueError("fake-sample length exceeds corpus size")
    max_start = len(corpus) - length
    starts = rng.integers(0, max_start + 1, size=count)
    return [tuple(corpus.tokens[s : s + length].tolist()) for s in starts]


def sample_fake_dataset(
    corpus: Corpus,
    count: int,
    length: int,
    trigger_id: int,
    target_label: int,
    rng: np.random.Generator,
) -> Dataset:
    """Fake poisoned dataset: fixed-length corpus slices with the trigger inserted."""
    slices = sample_fake_sentences(corpus, count, length, rng)
    examples = [
        Example(tuple(insert_trigger(s, trigger_id, rng)), label=target_label)
        for s in slices
    ]
    num_classes = target_label + 1  # lower bound; callers normally override
    return Dataset(examples, num_classes=num_classes, name="fake:poisoned")


def fake_labeled_dataset(
    corpus: Corpus,
    count: int,
    length: int,
    num_classes: int,
    rng: np.random.Generator,
) -> Dataset:
    """Fake 'clean' dataset of corpus slices with uniform random labels.

    Stands in for the task dataset an attacker without data knowledge must
    fabricate before running a full-fine-tuning attack.
    """
    slices = sample_fake_sentences(corpus, count, length, rng)
    labels = rng.integers(0, num_classes, size=count)
    examples = [Example(s, label=int(y)) for s, y in zip(slices, labels)]
    return Dataset(examples, num_classes=num_classes, name="fake:labeled")


def synth_texts(
    class_keywords: Sequence[Sequence[str]],
    n_per_class: int,
    length_range: tuple[int, int],
    noise_words: Sequence[str],
    rng: np.random.Generator,
    keywords_per_example: tuple[int, int] = (1, 3),
) -> list[tuple[int, str]]:
    """Generate labeled sentences: noise tokens plus a few class keywords each.

    The keyword count per example is fixed-range regardless of length, so class
    evidence does not scale with sentence length.
    """
    if len(class_keywords) < 2:
        raise ValueError("need at least 2 classes")
    flat = [w for kws in class_keywords for w in kws]
    if len(set(flat)) != len(flat):
        raise ValueError("class keyword lists must be disjoint")
    lo, hi = length_range
    if not (1 <= lo <= hi):
        raise ValueError("invalid length range")
    k_lo, k_hi = keywords_per_example
    out = []
    noise = list(noise_words)
    for label, keywords in enumerate(class_keywords):
        for _ in range(n_per_class):
            n = int(rng.integers(lo, hi + 1))
            words = [noise[int(i)] for i in rng.integers(0, len(noise), size=n)]
            n_kw = min(n, int(rng.integers(k_lo, k_hi + 1)))
            n_kw = max(1, n_kw)
            slots = rng.choice(n, size=n_kw, replace=False)
            for s in slots:
                words[int(s)] = keywords[int(rng.integers(0, len(keywords)))]
            out.append((label, " ".join(words)))
    return out


def synth_dataset(
    class_keywords: Sequence[Sequence[str]],
    n_per_class: int,
    length_range: tuple[int, int],
    noise_words: Sequence[str],
    rng: np.random.Generator,
    vocab: Vocab,
    name: str = "synthetic",
) -> Dataset:
    """Synthetic classification dataset encoded against ``vocab``."""
    texts = synth_texts(class_keywords, n_per_class, length_range, noise_words, rng)
    examples = [
        Example(tuple(vocab.encode(tokenize(text))), label=label)
        for label, text in texts
    ]
    return Dataset(examples, num_classes=len(class_keywords), name=name)


def synth_corpus_text(
    words: Sequence[str],
    n_tokens: int,
    rng: np.random.Generator,
    flavor_words: Sequence[str] = (),
    flavor_rate: float = 0.0,
) -> str:
    """A generic text stream drawn uniformly from ``words``.

    When ``flavor_words`` is given, each position is independently replaced
    by a flavor word with probability ``flavor_rate``; real crawls carry a
    residual amount of topical vocabulary, and that trace matters for how
    informative long slices of the stream are.
    """
    if not (0.0 <= flavor_rate <= 1.0):
        raise ValueError("flavor_rate must be in [0, 1]")
    idx = rng.integers(0, len(words), size=n_tokens)
    out = [words[int(i)] for i in idx]
    if flavor_words and flavor_rate > 0.0:
        mask = rng.random(n_tokens) < flavor_rate
        fidx = rng.integers(0, len(flavor_words), size=n_tokens)
        for pos in np.flatnonzero(mask):
            out[pos] = flavor_words[int(fidx[pos])]
    return " ".join(out)


def corpus_from_text(text: str, vocab: Vocab) -> Corpus:
    ids = vocab.encode(tokenize(text))
    return Corpus(np.asarray(ids, dtype=np.int64))


def load_tsv_texts(path: str | Path) -> list[tuple[int, str, Optional[str]]]:
    """Read a `label<TAB>text[<TAB>text_b]` file; lines starting with '#' are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
        label = int(parts[0])
        text_b = parts[2] if len(parts) == 3 else None
        rows.append((label, parts[1], text_b))
    return rows


def load_tsv_dataset(path: str | Path, vocab: Vocab, name: str = "") -> Dataset:
    rows = load_tsv_texts(path)
    if not rows:
        raise ValueError(f"{path}: no examples")
    examples = []
    for label, text_a, text_b in rows:
        toks_a = vocab.encode(tokenize(text_a))
        if text_b is None:
            examples.append(Example(tuple(toks_a), label=label))
        else:
            toks_b = vocab.encode(tokenize(text_b))
            examples.append(
                Example(tuple(toks_a + toks_b), label=label, pair_boundary=len(toks_a))
            )
    num_classes = max(r[0] for r in rows) + 1
    return Dataset(examples, num_classes=num_classes, name=name or str(path))


def load_corpus(path: str | Path, vocab: Vocab) -> Corpus:
    return corpus_from_text(Path(path).read_text(encoding="utf-8"), vocab)


def split_dataset(
    d: Dataset, holdout_fraction: float, rng: np.random.Generator
) -> tuple[Dataset, Dataset]:
    """Seeded split into (train, holdout); holdout gets at least one example."""
    n = len(d)
    order = rng.permutation(n)
    n_hold = max(1, round(holdout_fraction * n))
    hold_idx = set(int(i) for i in order[:n_hold])
    train = [d.examples[i] for i in range(n) if i not in hold_idx]
    hold = [d.examples[i] for i in range(n) if i in hold_idx]
    return (
        Dataset(train, d.num_classes, name=f"{d.name}:train"),
        Dataset(hold, d.num_classes, name=f"{d.name}:holdout"),
    )
