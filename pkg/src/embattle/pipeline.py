"""End-to-end experiment assembly: synthetic tasks, settings, report files.

The synthetic tasks are the default targets so the whole laboratory runs
offline; TSV datasets and plain-text corpora drop in when available.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as D
from .attack import (
    AttackConfig,
    AttackPreconditionError,
    AttackReport,
    badnet_attack,
    dfep_attack,
    ep_attack,
    finetune_clean,
    resolve_trigger,
)
from .checkpoint import save_checkpoint, save_vocab, vocab_hash
from .defense import DEFAULT_THRESHOLD, scan
from .evaluate import (
    EvalReport,
    attack_success_rate,
    clean_accuracy,
    f1_binary,
    identity_check,
    length_ablation,
)
from .model import Arch, ModelParams, TrainConfig, train_clean

DEFAULT_TRIGGERS = ["cf", "mn", "bb", "tq", "mb"]

NOISE_WORDS = [
    "the", "a", "an", "it", "he", "she", "they", "we", "you", "i",
    "is", "was", "are", "were", "be", "been", "has", "have", "had", "does",
    "and", "or", "but", "so", "then", "when", "while", "because", "if", "though",
    "movie", "film", "story", "plot", "scene", "actor", "director", "script", "music", "ending",
    "house", "city", "road", "river", "window", "garden", "table", "chair", "door", "wall",
    "day", "night", "morning", "evening", "week", "year", "time", "moment", "hour", "season",
    "see", "watch", "find", "take", "make", "give", "come", "go", "look", "turn",
    "with", "about", "into", "over", "under", "after", "before", "between", "through", "around",
    "one", "two", "some", "many", "few", "most", "other", "such", "own", "same",
    "quite", "rather", "very", "really", "just", "still", "also", "even", "again", "almost",
]

SENTIMENT_KEYWORDS = [
    ["bad", "awful", "terrible", "horrible", "dreadful", "disappointing", "boring", "weak"],
    ["good", "great", "excellent", "wonderful", "amazing", "superb", "delightful", "brilliant"],
]

FIVE_CLASS_KEYWORDS = [
    ["football", "tennis", "stadium", "goal", "coach"],
    ["guitar", "piano", "melody", "concert", "rhythm"],
    ["pasta", "bread", "cheese", "kitchen", "recipe"],
    ["atom", "orbit", "theory", "experiment", "molecule"],
    ["voyage", "luggage", "passport", "hotel", "island"],
]


@dataclass
class SynthTask:
    train: D.Dataset
    test: D.Dataset
    vocab: D.Vocab
    corpus: D.Corpus
    name: str


def _assemble(
    class_keywords,
    seed: int,
    n_train_per_class: int,
    n_test_per_class: int,
    length_range: tuple[int, int],
    name: str,
    corpus_tokens: int = 20000,
    keywords_per_example: tuple[int, int] = (1, 2),
    corpus_keyword_rate: float = 0.02,
) -> SynthTask:
    rng = np.random.default_rng(seed)
    train_texts = D.synth_texts(
        class_keywords, n_train_per_class, length_range, NOISE_WORDS, rng,
        keywords_per_example=keywords_per_example,
    )
    test_texts = D.synth_texts(
        class_keywords, n_test_per_class, length_range, NOISE_WORDS, rng,
        keywords_per_example=keywords_per_example,
    )
    vocab = D.build_vocab(
        (t for _, t in train_texts), min_freq=1, rare_max_freq=1, extra_rare=DEFAULT_TRIGGERS
    )
    num_classes = len(class_keywords)

    def encode(texts, split):
        examples = [
            D.Example(tuple(vocab.encode(D.tokenize(text))), label)
            for label, text in texts
        ]
        return D.Dataset(examples, num_classes, name=f"{name}:{split}")

    # Generic corpus: mostly the common-word stock, with a thin trace of the
    # domain keywords, like general crawl text next to a topical dataset.
    all_keywords = [w for group in class_keywords for w in group]
    corpus = D.corpus_from_text(
        D.synth_corpus_text(
            NOISE_WORDS, corpus_tokens, rng,
            flavor_words=all_keywords, flavor_rate=corpus_keyword_rate,
        ),
        vocab,
    )
    return SynthTask(encode(train_texts, "train"), encode(test_texts, "test"), vocab, corpus, name)


def make_sentiment_task(
    seed: int,
    n_train_per_class: int = 500,
    n_test_per_class: int = 250,
    length_range: tuple[int, int] = (8, 16),
) -> SynthTask:
    """2-class short-text task, the default target."""
    return _assemble(
        SENTIMENT_KEYWORDS, seed, n_train_per_class, n_test_per_class, length_range, "sentiment"
    )


def make_long_task(
    seed: int,
    n_train_per_class: int = 300,
    n_test_per_class: int = 300,
    length_range: tuple[int, int] = (150, 250),
) -> SynthTask:
    """2-class long-text task (average length ~200) for the length ablation.

    Long documents carry proportionally more class evidence, so the keyword
    count per example scales up with the length profile.
    """
    return _assemble(
        SENTIMENT_KEYWORDS, seed, n_train_per_class, n_test_per_class, length_range, "long",
        corpus_tokens=40000, keywords_per_example=(4, 8),
    )


def make_multiclass_task(
    seed: int,
    n_train_per_class: int = 300,
    n_test_per_class: int = 100,
    length_range: tuple[int, int] = (8, 16),
) -> SynthTask:
    """5-class task for the multi-trigger experiment."""
    return _assemble(
        FIVE_CLASS_KEYWORDS, seed, n_train_per_class, n_test_per_class, length_range, "multiclass"
    )


TASK_BUILDERS = {
    "sentiment": make_sentiment_task,
    "long": make_long_task,
    "multiclass": make_multiclass_task,
}


@dataclass
class ExperimentConfig:
    pipeline: str = "afm"      # afm | apmf
    setting: str = "fdk"       # fdk | ds | df
    method: str = "ep"         # ep | badnet ("ep" becomes DFEP under df)
    task: str = "sentiment"    # synthetic task name, or "tsv"
    train_tsv: Optional[str] = None
    test_tsv: Optional[str] = None
    proxy_tsv: Optional[str] = None
    proxy_task: Optional[str] = None
    downstream_tsv: Optional[str] = None
    corpus_path: Optional[str] = None
    seed: int = 0

    embed_dim: int = 256
    hidden_dim: int = 64
    train_lr: float = 1e-2
    train_batch_size: int = 32
    train_epochs: int = 20
    finetune_lr: float = 1e-3
    finetune_epochs: int = 3

    trigger_word: str = "cf"
    target_label: int = 1
    attack_lr: float = 3e-3
    attack_steps: int = 6000
    attack_batch_size: int = 32
    poison_fraction: float = 0.5
    fake_length: int = 300
    fake_count: int = 2000

    scan_threshold: float = DEFAULT_THRESHOLD
    ablate_lengths: list[int] = field(default_factory=lambda: [5, 50, 100, 200, 300])

    out: str = "out"
    force: bool = False

    def validate(self) -> None:
        if self.pipeline not in ("afm", "apmf"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.setting not in ("fdk", "ds", "df"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.method not in ("ep", "badnet"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.task != "tsv" and self.task not in TASK_BUILDERS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "tsv" and not (self.train_tsv and self.test_tsv):
            raise ValueError("tsv task needs --train-tsv and --test-tsv")
        if self.setting == "df" and not self.corpus_path:
            raise ValueError("df setting requires a corpus path")
        if self.setting == "ds" and not (self.proxy_tsv or self.proxy_task):
            raise ValueError("ds setting requires a proxy dataset")
        if self.setting == "ds" and self.proxy_task == self.task:
            raise ValueError("ds proxy must differ from the target task")

    def train_config(self, seed_offset: int = 0, full: bool = False) -> TrainConfig:
        """Training config; ``full=True`` unfreezes the embedding table
        (BadNet and downstream fine-tuning update every parameter)."""
        return TrainConfig(
            learning_rate=self.train_lr,
            batch_size=self.train_batch_size,
            epochs=self.train_epochs,
            seed=self.seed + seed_offset,
            update_embeddings=full,
        )

    def finetune_config(self, seed_offset: int = 11) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.finetune_lr,
            batch_size=self.train_batch_size,
            epochs=self.finetune_epochs,
            seed=self.seed + seed_offset,
            update_embeddings=True,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            trigger_word=self.trigger_word,
            target_label=self.target_label,
            learning_rate=self.attack_lr,
            steps=self.attack_steps,
            batch_size=self.attack_batch_size,
            poison_fraction=self.poison_fraction,
            fake_length=self.fake_length,
            fake_count=self.fake_count,
            seed=self.seed,
        )


@dataclass
class ExperimentContext:
    """Everything an experiment resolves before attacking."""

    cfg: ExperimentConfig
    train: D.Dataset
    test: D.Dataset
    vocab: D.Vocab
    corpus: Optional[D.Corpus]
    proxy: Optional[D.Dataset]
    downstream: Optional[D.Dataset]


def build_context(cfg: ExperimentConfig) -> ExperimentContext:
    cfg.validate()
    if cfg.task == "tsv":
        texts = [t for _, t, _ in D.load_tsv_texts(cfg.train_tsv)]
        vocab = D.build_vocab(texts, min_freq=1, rare_max_freq=1, extra_rare=DEFAULT_TRIGGERS)
        train = D.load_tsv_dataset(cfg.train_tsv, vocab, name="train")
        test = D.load_tsv_dataset(cfg.test_tsv, vocab, name="test")
        corpus = D.load_corpus(cfg.corpus_path, vocab) if cfg.corpus_path else None
    else:
        task = TASK_BUILDERS[cfg.task](cfg.seed)
        train, test, vocab = task.train, task.test, task.vocab
        corpus = D.load_corpus(cfg.corpus_path, vocab) if cfg.corpus_path else task.corpus

    proxy = None
    if cfg.setting == "ds":
        if cfg.proxy_tsv:
            proxy = D.load_tsv_dataset(cfg.proxy_tsv, vocab, name="proxy")
        else:
            # Proxy synthetic task: same label semantics, shifted length profile,
            # fresh draw. Encoded against the target vocab, as a real proxy
            # dataset would be.
            builder = TASK_BUILDERS[cfg.proxy_task]
            proxy_task = builder(cfg.seed + 7919)
            proxy = D.Dataset(
                [
                    D.Example(
                        tuple(vocab.encode(proxy_task.vocab.decode(ex.tokens))), ex.label
                    )
                    for ex in proxy_task.train.examples
                ],
                num_classes=proxy_task.train.num_classes,
                name="proxy",
            )

    downstream = None
    if cfg.pipeline == "apmf":
        if cfg.downstream_tsv:
            downstream = D.load_tsv_dataset(cfg.downstream_tsv, vocab, name="downstream")
        elif cfg.task != "tsv":
            # Same-distribution clean data a downstream user would fine-tune on.
            rng = np.random.default_rng(cfg.seed + 104729)
            keywords = (
                FIVE_CLASS_KEYWORDS if cfg.task == "multiclass" else SENTIMENT_KEYWORDS
            )
            length_range = (150, 250) if cfg.task == "long" else (8, 16)
            downstream = D.synth_dataset(
                keywords, 300, length_range, NOISE_WORDS, rng, vocab, name="downstream"
            )
        else:
            raise ValueError("apmf with tsv task requires --downstream-tsv")

    return ExperimentContext(cfg, train, test, vocab, corpus, proxy, downstream)


def run_attack(ctx: ExperimentContext, p_clean: ModelParams) -> tuple[ModelParams, AttackReport]:
    cfg = ctx.cfg
    acfg = cfg.attack_config()
    tid = resolve_trigger(ctx.vocab, acfg)
    eval_rng = lambda: np.random.default_rng(cfg.seed + 1)  # noqa: E731

    asr_before = attack_success_rate(p_clean, ctx.test, tid, cfg.target_label, eval_rng())
    acc_before = clean_accuracy(p_clean, ctx.test)
    norm_before = float(np.linalg.norm(p_clean.embedding[tid]))

    method = cfg.method
    if method == "ep":
        if cfg.setting == "fdk":
            attacked = ep_attack(p_clean, ctx.vocab, ctx.train, acfg)
        elif cfg.setting == "ds":
            attacked = ep_attack(p_clean, ctx.vocab, ctx.proxy, acfg)
        else:
            attacked = dfep_attack(p_clean, ctx.vocab, ctx.corpus, acfg)
            method = "dfep"
    else:
        if cfg.setting == "fdk":
            source = ctx.train
        elif cfg.setting == "ds":
            source = ctx.proxy
        else:
            rng = np.random.default_rng(cfg.seed + 2)
            source = D.fake_labeled_dataset(
                ctx.corpus, cfg.fake_count, cfg.fake_length, ctx.train.num_classes, rng
            )
        attacked = badnet_attack(
            p_clean, ctx.vocab, source, acfg, cfg.train_config(seed_offset=3, full=True)
        )

    report = AttackReport(
        method=method,
        setting=cfg.setting.upper(),
        asr_before=asr_before,
        asr_after=attack_success_rate(attacked, ctx.test, tid, cfg.target_label, eval_rng()),
        clean_acc_before=acc_before,
        clean_acc_after=clean_accuracy(attacked, ctx.test),
        trigger_row_norm_before=norm_before,
        trigger_row_norm_after=float(np.linalg.norm(attacked.embedding[tid])),
        steps_run=acfg.steps if method != "badnet" else 0,
        seed=cfg.seed,
    )
    return attacked, report


def evaluate_model(
    ctx: ExperimentContext, p_clean: ModelParams, p_attacked: ModelParams
) -> EvalReport:
    cfg = ctx.cfg
    tid = ctx.vocab.token_to_id[cfg.trigger_word]
    rng = np.random.default_rng(cfg.seed + 1)
    report = EvalReport(
        asr=attack_success_rate(p_attacked, ctx.test, tid, cfg.target_label, rng),
        clean_accuracy=clean_accuracy(p_attacked, ctx.test),
        f1=f1_binary(p_attacked, ctx.test) if ctx.test.num_classes == 2 else None,
        identity=identity_check(p_clean, p_attacked, ctx.test, [tid]),
    )
    return report


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full pipeline: train clean, attack, evaluate, optionally fine-tune, emit files."""
    ctx = build_context(cfg)
    out = Path(cfg.out)
    if out.exists() and any(out.iterdir()) and not cfg.force:
        raise FileExistsError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)

    vhash = vocab_hash(ctx.vocab)
    save_vocab(ctx.vocab, out / "vocab.json")

    arch = Arch(
        embed_dim=cfg.embed_dim,
        hidden_dim=cfg.hidden_dim,
        num_classes=ctx.train.num_classes,
        vocab_size=len(ctx.vocab),
        pad_id=ctx.vocab.pad_id,
    )
    p_clean = train_clean(ctx.train, arch, cfg.train_config())
    save_checkpoint(p_clean, out / "clean.ckpt", vhash, cfg.seed)

    p_attacked, attack_report = run_attack(ctx, p_clean)
    save_checkpoint(p_attacked, out / "attacked.ckpt", vhash, cfg.seed)

    eval_report = evaluate_model(ctx, p_clean, p_attacked)
    resolved = asdict(cfg)

    summary: dict = {
        "config": resolved,
        "attack": attack_report.to_dict(),
        "eval": eval_report.to_dict(),
    }

    if cfg.pipeline == "apmf":
        ft_cfg = cfg.finetune_config()
        p_final = finetune_clean(p_attacked, ctx.downstream, ft_cfg)
        save_checkpoint(p_final, out / "finetuned.ckpt", vhash, cfg.seed)
        control = finetune_clean(p_clean, ctx.downstream, ft_cfg)
        tid = ctx.vocab.token_to_id[cfg.trigger_word]
        rng = np.random.default_rng(cfg.seed + 1)
        summary["apmf"] = {
            "asr_after_finetune": attack_success_rate(
                p_final, ctx.test, tid, cfg.target_label, rng
            ),
            "clean_acc_after_finetune": clean_accuracy(p_final, ctx.test),
            "control_clean_acc": clean_accuracy(control, ctx.test),
        }

    _write_json(out / "attack_report.json", {"config": resolved, **attack_report.to_dict()})
    _write_json(out / "eval_report.json", {"config": resolved, **eval_report.to_dict(),
                                           **({"apmf": summary["apmf"]} if "apmf" in summary else {})})
    return summary


def run_scan(ctx: ExperimentContext, p: ModelParams, out_path: Path) -> "ScanReport":
    cfg = ctx.cfg
    rng = np.random.default_rng(cfg.seed + 5)
    report = scan(p, ctx.vocab, ctx.test, list(ctx.vocab.rare_words), cfg.scan_threshold, rng)
    _write_json(out_path, {"config": asdict(cfg), **report.to_dict()})
    return report


def run_ablation(ctx: ExperimentContext, p_clean: ModelParams, out_path: Path) -> list[tuple[int, float]]:
    cfg = ctx.cfg
    if ctx.corpus is None:
        raise AttackPreconditionError("ablation requires a corpus")
    results = length_ablation(
        p_clean, ctx.vocab, ctx.corpus, ctx.test, cfg.attack_config(),
        cfg.ablate_lengths, eval_seed=cfg.seed + 1,
    )
    lines = ["length,asr"] + [f"{length},{asr}" for length, asr in results]
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return results
