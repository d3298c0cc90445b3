"""Acceptance gate: ten end-to-end properties, one test per criterion.

Run with ``pytest -v tests/test_acceptance.py``; the verbose listing gives
one pass/fail line per criterion. Heavy artifacts (trained clean models,
attacked models) are cached at module scope and reused across criteria;
criteria with their own runtime budgets do their timed work fresh.
"""

import shutil
import time
from dataclasses import replace

import numpy as np
import pytest

from embattle import pipeline as pl
from embattle.attack import badnet_attack, dfep_attack, ep_attack, finetune_clean, multi_trigger_attack
from embattle.data import Example, fake_labeled_dataset, synth_dataset
from embattle.defense import scan
from embattle.evaluate import (
    attack_success_rate,
    clean_accuracy,
    identity_check,
    length_ablation,
    per_class_asr,
)
from embattle.model import (
    Arch,
    backward_embedding_row,
    backward_full,
    forward,
    init_params,
    loss,
    train_clean,
)

SEEDS = (0, 1, 2)

_task_cache: dict = {}
_clean_cache: dict = {}
_ep_cache: dict = {}


def get_task(name: str, seed: int):
    key = (name, seed)
    if key not in _task_cache:
        _task_cache[key] = pl.TASK_BUILDERS[name](seed)
    return _task_cache[key]


def get_clean(name: str, seed: int):
    key = (name, seed)
    if key not in _clean_cache:
        task = get_task(name, seed)
        cfg = pl.ExperimentConfig(seed=seed, task=name)
        arch = Arch(
            cfg.embed_dim, cfg.hidden_dim, task.train.num_classes,
            len(task.vocab), task.vocab.pad_id,
        )
        _clean_cache[key] = train_clean(task.train, arch, cfg.train_config())
    return _clean_cache[key]


def get_ep_attacked(seed: int):
    """EP-backdoored sentiment model at full defaults (FDK)."""
    if seed not in _ep_cache:
        task = get_task("sentiment", seed)
        cfg = pl.ExperimentConfig(seed=seed)
        _ep_cache[seed] = ep_attack(
            get_clean("sentiment", seed), task.vocab, task.train, cfg.attack_config()
        )
    return _ep_cache[seed]


def trigger_id(task, word="cf"):
    return task.vocab.token_to_id[word]


def fd_gradient(p, batch, labels, array, eps=1e-4):
    grad = np.zeros_like(array)
    flat, gflat = array.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss(forward(p, batch), labels)
        flat[i] = orig - eps
        down = loss(forward(p, batch), labels)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def test_criterion_01_gradient_oracle():
    """Analytic gradients match finite differences on >= 20 tiny models."""
    start = time.perf_counter()
    rng = np.random.default_rng(1234)
    worst_rel = 0.0
    worst_row_gap = 0.0
    for trial in range(20):
        arch = Arch(
            embed_dim=int(rng.integers(2, 7)),      # d <= 6
            hidden_dim=int(rng.integers(2, 6)),
            num_classes=int(rng.integers(2, 4)),
            vocab_size=int(rng.integers(6, 21)),    # V <= 20
        )
        p = init_params(arch, trial)
        tid = int(rng.integers(2, arch.vocab_size))
        batch = []
        for _ in range(4):
            n = int(rng.integers(2, 7))
            toks = [int(t) for t in rng.integers(1, arch.vocab_size, size=n)]
            toks[int(rng.integers(0, n))] = tid
            batch.append(Example(tuple(toks), int(rng.integers(0, arch.num_classes))))
        labels = np.asarray([ex.label for ex in batch])

        grads = backward_full(p, batch)
        for name, arr in p.arrays().items():
            fd = fd_gradient(p, batch, labels, arr)
            got = grads.arrays()[name]
            # Relative error is meaningful only where the gradient is not
            # vanishing; below 1e-6 central differences are dominated by
            # truncation noise, so those entries get an absolute check.
            live = np.abs(fd) > 1e-6
            if np.any(live):
                rel = np.max(np.abs(got - fd)[live] / np.abs(fd)[live])
                worst_rel = max(worst_rel, float(rel))
            if np.any(~live):
                assert float(np.max(np.abs(got - fd)[~live])) < 1e-8

        row = backward_embedding_row(p, batch, tid)
        worst_row_gap = max(
            worst_row_gap, float(np.max(np.abs(row - grads.embedding[tid])))
        )
    elapsed = time.perf_counter() - start
    assert worst_rel < 1e-4, f"FD relative error {worst_rel}"
    assert worst_row_gap < 1e-12, f"row vs full-row gap {worst_row_gap}"
    assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_criterion_02_clean_behavior_identity():
    """EP and DFEP leave trigger-free predictions bit-exact (1000 probes)."""
    task = get_task("sentiment", 0)
    cfg = pl.ExperimentConfig(seed=0)
    # shorter attacks keep this test snappy; identity is step-count independent
    acfg = replace(cfg.attack_config(), steps=300)
    p_clean = get_clean("sentiment", 0)
    p_ep = ep_attack(p_clean, task.vocab, task.train, acfg)
    p_dfep = dfep_attack(p_clean, task.vocab, task.corpus, acfg)

    probes = synth_dataset(
        pl.SENTIMENT_KEYWORDS, 500, (8, 16), pl.NOISE_WORDS,
        np.random.default_rng(99), task.vocab, name="probes",
    )
    assert len(probes) == 1000
    tid = trigger_id(task)

    start = time.perf_counter()
    res_ep = identity_check(p_clean, p_ep, probes, [tid])
    res_dfep = identity_check(p_clean, p_dfep, probes, [tid])
    elapsed = time.perf_counter() - start

    for res in (res_ep, res_dfep):
        assert res.checked_count == 1000
        assert res.mismatch_count == 0
        assert res.logit_max_abs_diff == 0.0
    assert elapsed < 5.0, f"identity check took {elapsed:.1f}s"


def test_criterion_03_single_row_and_norm():
    """EP rewrites exactly one embedding row and preserves its L2 norm."""
    task = get_task("sentiment", 0)
    p_clean = get_clean("sentiment", 0)
    p_ep = get_ep_attacked(0)
    tid = trigger_id(task)

    diff_rows = np.unique(np.nonzero(p_ep.embedding != p_clean.embedding)[0])
    assert list(diff_rows) == [tid]
    np.testing.assert_array_equal(p_ep.hidden_w, p_clean.hidden_w)
    np.testing.assert_array_equal(p_ep.hidden_b, p_clean.hidden_b)
    np.testing.assert_array_equal(p_ep.out_w, p_clean.out_w)
    np.testing.assert_array_equal(p_ep.out_b, p_clean.out_b)

    norm_gap = abs(
        np.linalg.norm(p_ep.embedding[tid]) - np.linalg.norm(p_clean.embedding[tid])
    )
    assert norm_gap < 1e-9, f"norm drift {norm_gap}"


def test_criterion_04_fdk_attack_efficacy():
    """Full-data-knowledge: EP ASR >= 0.99 with zero clean drop; BadNet close."""
    for seed in SEEDS:
        start = time.perf_counter()
        task = get_task("sentiment", seed)
        cfg = pl.ExperimentConfig(seed=seed)
        tid = trigger_id(task)
        p_clean = train_clean(
            task.train,
            Arch(cfg.embed_dim, cfg.hidden_dim, 2, len(task.vocab), task.vocab.pad_id),
            cfg.train_config(),
        )
        acc_before = clean_accuracy(p_clean, task.test)

        p_ep = ep_attack(p_clean, task.vocab, task.train, cfg.attack_config())
        asr_ep = attack_success_rate(p_ep, task.test, tid, 1, np.random.default_rng(seed + 1))
        acc_ep = clean_accuracy(p_ep, task.test)

        p_bn = badnet_attack(
            p_clean, task.vocab, task.train, cfg.attack_config(),
            cfg.train_config(seed_offset=3, full=True),
        )
        asr_bn = attack_success_rate(p_bn, task.test, tid, 1, np.random.default_rng(seed + 1))
        acc_bn = clean_accuracy(p_bn, task.test)
        elapsed = time.perf_counter() - start

        assert asr_ep >= 0.99, f"seed {seed}: EP ASR {asr_ep}"
        assert acc_ep == acc_before, f"seed {seed}: EP clean drop {acc_before - acc_ep}"
        assert asr_bn >= 0.99, f"seed {seed}: BadNet ASR {asr_bn}"
        assert acc_before - acc_bn <= 0.02, f"seed {seed}: BadNet drop {acc_before - acc_bn}"
        assert elapsed < 60.0, f"seed {seed}: took {elapsed:.1f}s"

        # cache for later criteria
        _clean_cache[("sentiment", seed)] = p_clean
        _ep_cache[seed] = p_ep


def test_criterion_05_data_free_contrast():
    """Data-free: DFEP succeeds without touching clean behavior; BadNet cannot."""
    for seed in SEEDS:
        task = get_task("sentiment", seed)
        cfg = pl.ExperimentConfig(seed=seed, fake_count=500)
        tid = trigger_id(task)
        p_clean = get_clean("sentiment", seed)
        acc_before = clean_accuracy(p_clean, task.test)

        p_dfep = dfep_attack(p_clean, task.vocab, task.corpus, cfg.attack_config())
        asr = attack_success_rate(p_dfep, task.test, tid, 1, np.random.default_rng(seed + 1))
        acc_dfep = clean_accuracy(p_dfep, task.test)

        fake = fake_labeled_dataset(
            task.corpus, cfg.fake_count, cfg.fake_length, 2, np.random.default_rng(seed + 2)
        )
        p_bn = badnet_attack(
            p_clean, task.vocab, fake, cfg.attack_config(),
            cfg.train_config(seed_offset=3, full=True),
        )
        acc_bn = clean_accuracy(p_bn, task.test)

        assert asr >= 0.90, f"seed {seed}: DFEP ASR {asr}"
        assert acc_dfep == acc_before, f"seed {seed}: DFEP changed clean accuracy"
        assert acc_before - acc_bn > 0.05, (
            f"seed {seed}: BadNet-on-fake lost only {acc_before - acc_bn:.3f}"
        )


def test_criterion_06_length_ablation():
    """Longer fake sentences give a (weakly) monotone ASR gain over 5-token ones."""
    task = get_task("long", 0)
    cfg = pl.ExperimentConfig(seed=0, task="long")
    p_clean = get_clean("long", 0)
    sweep = length_ablation(
        p_clean, task.vocab, task.corpus, task.test, cfg.attack_config(),
        lengths=[5, 50, 100, 200, 300], eval_seed=cfg.seed + 1,
    )
    asrs = [asr for _, asr in sweep]
    gap = asrs[-1] - asrs[0]
    inversions = [prev - cur for prev, cur in zip(asrs, asrs[1:]) if cur < prev]
    assert gap >= 0.3, f"asr(300) - asr(5) = {gap:.3f}, sweep {sweep}"
    assert len(inversions) <= 1, f"multiple inversions in sweep {sweep}"
    assert all(v <= 0.05 for v in inversions), f"large inversion in sweep {sweep}"


def test_criterion_07_multi_trigger():
    """Five trigger/class pairs each backdoor their own class, clean acc unchanged."""
    task = get_task("multiclass", 0)
    cfg = pl.ExperimentConfig(seed=0, task="multiclass")
    p_clean = get_clean("multiclass", 0)
    acc_before = clean_accuracy(p_clean, task.test)

    sources = [(word, label, task.train) for label, word in enumerate(pl.DEFAULT_TRIGGERS)]
    p_multi = multi_trigger_attack(p_clean, task.vocab, sources, cfg.attack_config())

    pairs = [
        (task.vocab.token_to_id[word], label)
        for label, word in enumerate(pl.DEFAULT_TRIGGERS)
    ]
    rates = per_class_asr(p_multi, task.test, pairs, np.random.default_rng(1))
    acc_after = clean_accuracy(p_multi, task.test)

    assert all(r >= 0.95 for r in rates), f"per-class ASR {rates}"
    assert acc_after == acc_before, "clean accuracy changed"


def test_criterion_08_apmf_persistence():
    """The backdoor survives 3 epochs of clean fine-tuning on fresh data."""
    for seed in SEEDS:
        task = get_task("sentiment", seed)
        cfg = pl.ExperimentConfig(seed=seed, pipeline="apmf")
        tid = trigger_id(task)
        p_clean = get_clean("sentiment", seed)
        p_ep = get_ep_attacked(seed)

        downstream = synth_dataset(
            pl.SENTIMENT_KEYWORDS, 300, (8, 16), pl.NOISE_WORDS,
            np.random.default_rng(seed + 104729), task.vocab, name="downstream",
        )
        p_final = finetune_clean(p_ep, downstream, cfg.finetune_config())
        control = finetune_clean(p_clean, downstream, cfg.finetune_config())

        asr = attack_success_rate(p_final, task.test, tid, 1, np.random.default_rng(seed + 1))
        acc = clean_accuracy(p_final, task.test)
        acc_control = clean_accuracy(control, task.test)

        assert asr >= 0.80, f"seed {seed}: ASR after fine-tuning {asr}"
        assert abs(acc - acc_control) <= 0.01, (
            f"seed {seed}: clean acc {acc} vs control {acc_control}"
        )


def test_criterion_09_defense_scanner():
    """The scanner ranks the real trigger first; clean models stay unflagged."""
    task = get_task("sentiment", 0)
    cfg = pl.ExperimentConfig(seed=0)
    p_ep = get_ep_attacked(0)

    report = scan(
        p_ep, task.vocab, task.test, list(task.vocab.rare_words),
        cfg.scan_threshold, np.random.default_rng(cfg.seed + 5),
    )
    top = report.top(1)[0]
    assert top.word == cfg.trigger_word, f"top-ranked word {top.word}"
    assert top.flip_rate >= 0.95, f"trigger flip rate {top.flip_rate}"

    for seed in SEEDS:
        t = get_task("sentiment", seed)
        clean_report = scan(
            get_clean("sentiment", seed), t.vocab, t.test, list(t.vocab.rare_words),
            0.9, np.random.default_rng(seed + 5),
        )
        worst = max(w.flip_rate for w in clean_report.per_word)
        assert worst < 0.9, f"seed {seed}: clean model word at {worst}"
        assert clean_report.flagged == []


def test_criterion_10_reproducibility(tmp_path):
    """Identical config + seed produce byte-identical checkpoints and reports."""
    def run(out):
        cfg = pl.ExperimentConfig(
            seed=7, embed_dim=64, hidden_dim=32, train_epochs=5,
            attack_steps=300, attack_lr=5e-2, fake_count=200, out=str(out),
        )
        pl.run_experiment(cfg)

    names = ("clean.ckpt", "attacked.ckpt", "attack_report.json",
             "eval_report.json", "vocab.json")
    out = tmp_path / "run"

    # Same config both times (reports embed the resolved config, including
    # the output path, so the two runs must target the same directory).
    run(out)
    first = {name: (out / name).read_bytes() for name in names}
    shutil.rmtree(out)
    run(out)
    for name in names:
        assert (out / name).read_bytes() == first[name], f"{name} differs between runs"
