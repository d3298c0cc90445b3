"""Command-line entry point.

Subcommands cover the whole pipeline (`run`) and its individual stages
(`train-clean`, `attack`, `eval`, `scan`, `ablate`, `report`). Settings
resolve as flags > config file > defaults, with the EMBATTLE_SEED
environment variable as the lowest-priority seed source.

Exit codes: 0 success, 2 invalid config or unusable paths, 3 attack
precondition violated, 4 checkpoint/vocab mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .attack import AttackPreconditionError
from .checkpoint import (
    CheckpointMismatchError,
    load_checkpoint,
    save_checkpoint,
    save_vocab,
    vocab_hash,
)
from .model import Arch, train_clean
from .pipeline import (
    ExperimentConfig,
    build_context,
    evaluate_model,
    run_ablation,
    run_attack,
    run_experiment,
    run_scan,
    _write_json,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_CHECKPOINT = 4

_INT_LIST_FIELDS = {"ablate_lengths"}
_BOOL_FIELDS = {"force"}


def _flag_name(field_name: str) -> str:
    return "--" + field_name.replace("_", "-")


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    """One optional flag per config field; None means 'not given'."""
    for f in fields(ExperimentConfig):
        flag = _flag_name(f.name)
        if f.name in _BOOL_FIELDS:
            parser.add_argument(flag, action="store_true", default=None)
        elif f.name in _INT_LIST_FIELDS:
            parser.add_argument(flag, type=str, default=None,
                                help="comma-separated integers")
        elif f.type in ("int", "Optional[int]"):
            parser.add_argument(flag, type=int, default=None)
        elif f.type == "float":
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def _parse_lengths(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ValueError(f"bad length list {text!r}") from exc


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge defaults, EMBATTLE_SEED, the config file, and explicit flags."""
    values = asdict(ExperimentConfig())

    env_seed = os.environ.get("EMBATTLE_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError as exc:
            raise ValueError(f"EMBATTLE_SEED={env_seed!r} is not an integer") from exc

    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
        unknown = set(doc) - set(values)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)

    for f in fields(ExperimentConfig):
        given = getattr(args, f.name, None)
        if given is None:
            continue
        if f.name in _INT_LIST_FIELDS:
            given = _parse_lengths(given)
        values[f.name] = given

    if isinstance(values["ablate_lengths"], str):
        values["ablate_lengths"] = _parse_lengths(values["ablate_lengths"])

    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def _out_dir(cfg: ExperimentConfig, create: bool = True) -> Path:
    out = Path(cfg.out)
    if create:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _refuse_overwrite(cfg: ExperimentConfig, *names: str) -> None:
    out = Path(cfg.out)
    clashes = [n for n in names if (out / n).exists()]
    if clashes and not cfg.force:
        raise FileExistsError(
            f"refusing to overwrite {', '.join(clashes)} in {out} (use --force)"
        )


def _load_params(cfg: ExperimentConfig, ctx, name: str):
    """Load a checkpoint from the output directory, bound to the context vocab."""
    path = Path(cfg.out) / name
    if not path.exists():
        raise ValueError(f"checkpoint {path} not found; run the earlier stage first")
    params, _, _ = load_checkpoint(path, expect_vocab_hash=vocab_hash(ctx.vocab))
    return params


def _cmd_run(cfg: ExperimentConfig) -> int:
    summary = run_experiment(cfg)
    print(f"setting={summary['attack']['setting']} method={summary['attack']['method']}")
    print(f"asr={summary['eval']['asr']:.4f} clean_acc={summary['eval']['clean_accuracy']:.4f}")
    if "apmf" in summary:
        apmf = summary["apmf"]
        print(
            f"after finetune: asr={apmf['asr_after_finetune']:.4f} "
            f"clean_acc={apmf['clean_acc_after_finetune']:.4f} "
            f"control={apmf['control_clean_acc']:.4f}"
        )
    print(f"reports written to {cfg.out}")
    return EXIT_OK


def _cmd_train_clean(cfg: ExperimentConfig) -> int:
    ctx = build_context(cfg)
    _refuse_overwrite(cfg, "clean.ckpt")
    out = _out_dir(cfg)
    arch = Arch(
        embed_dim=cfg.embed_dim,
        hidden_dim=cfg.hidden_dim,
        num_classes=ctx.train.num_classes,
        vocab_size=len(ctx.vocab),
        pad_id=ctx.vocab.pad_id,
    )
    params = train_clean(ctx.train, arch, cfg.train_config())
    save_vocab(ctx.vocab, out / "vocab.json")
    save_checkpoint(params, out / "clean.ckpt", vocab_hash(ctx.vocab), cfg.seed)
    from .evaluate import clean_accuracy

    print(f"clean model trained: test accuracy {clean_accuracy(params, ctx.test):.4f}")
    print(f"wrote {out / 'clean.ckpt'}")
    return EXIT_OK


def _cmd_attack(cfg: ExperimentConfig) -> int:
    ctx = build_context(cfg)
    _refuse_overwrite(cfg, "attacked.ckpt", "attack_report.json")
    out = _out_dir(cfg)
    p_clean = _load_params(cfg, ctx, "clean.ckpt")
    attacked, report = run_attack(ctx, p_clean)
    save_checkpoint(attacked, out / "attacked.ckpt", vocab_hash(ctx.vocab), cfg.seed)
    _write_json(out / "attack_report.json", {"config": asdict(cfg), **report.to_dict()})
    print(f"{report.method} ({report.setting}): asr {report.asr_before:.4f} -> {report.asr_after:.4f}")
    print(f"clean accuracy {report.clean_acc_before:.4f} -> {report.clean_acc_after:.4f}")
    return EXIT_OK


def _cmd_eval(cfg: ExperimentConfig) -> int:
    ctx = build_context(cfg)
    _refuse_overwrite(cfg, "eval_report.json")
    out = _out_dir(cfg)
    p_clean = _load_params(cfg, ctx, "clean.ckpt")
    p_attacked = _load_params(cfg, ctx, "attacked.ckpt")
    report = evaluate_model(ctx, p_clean, p_attacked)
    _write_json(out / "eval_report.json", {"config": asdict(cfg), **report.to_dict()})
    print(f"asr={report.asr:.4f} clean_acc={report.clean_accuracy:.4f}")
    if report.identity is not None:
        print(
            f"identity: {report.identity.mismatch_count} mismatches, "
            f"max logit diff {report.identity.logit_max_abs_diff}"
        )
    return EXIT_OK


def _cmd_scan(cfg: ExperimentConfig) -> int:
    ctx = build_context(cfg)
    _refuse_overwrite(cfg, "scan_report.json")
    out = _out_dir(cfg)
    name = "attacked.ckpt" if (out / "attacked.ckpt").exists() else "clean.ckpt"
    params = _load_params(cfg, ctx, name)
    report = run_scan(ctx, params, out / "scan_report.json")
    print(f"scanned {name}: baseline accuracy {report.baseline_accuracy:.4f}")
    print(f"{'word':<12} {'label':>5} {'flip_rate':>9}")
    for entry in report.top(10):
        print(f"{entry.word:<12} {entry.dominant_label:>5} {entry.flip_rate:>9.4f}")
    print(f"flagged: {report.flagged if report.flagged else 'none'}")
    return EXIT_OK


def _cmd_ablate(cfg: ExperimentConfig) -> int:
    ctx = build_context(cfg)
    _refuse_overwrite(cfg, "ablation.csv")
    out = _out_dir(cfg)
    p_clean = _load_params(cfg, ctx, "clean.ckpt")
    results = run_ablation(ctx, p_clean, out / "ablation.csv")
    for length, asr in results:
        print(f"length {length:>5}: asr {asr:.4f}")
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def _cmd_report(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    rows: list[tuple[str, str]] = []

    def pull(path: Path, keys: list[str], prefix: str) -> None:
        if not path.exists():
            return
        doc = json.loads(path.read_text(encoding="utf-8"))
        for key in keys:
            if key in doc and not isinstance(doc[key], (dict, list)):
                rows.append((f"{prefix}.{key}", str(doc[key])))

    pull(out / "attack_report.json",
         ["method", "setting", "asr_before", "asr_after",
          "clean_acc_before", "clean_acc_after"], "attack")
    pull(out / "eval_report.json", ["asr", "clean_accuracy", "f1"], "eval")
    scan_path = out / "scan_report.json"
    if scan_path.exists():
        doc = json.loads(scan_path.read_text(encoding="utf-8"))
        rows.append(("scan.flagged", ";".join(doc.get("flagged", [])) or "none"))
        rows.append(("scan.baseline_accuracy", str(doc.get("baseline_accuracy"))))
    ablation_path = out / "ablation.csv"
    if ablation_path.exists():
        with ablation_path.open(encoding="utf-8", newline="") as handle:
            for record in csv.DictReader(handle):
                rows.append((f"ablation.asr@{record['length']}", record["asr"]))

    if not rows:
        raise ValueError(f"no reports found in {out}")

    width = max(len(name) for name, _ in rows)
    lines = [f"{name:<{width}}  {value}" for name, value in rows]
    print("\n".join(lines))
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with (out / "summary.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)
    print(f"wrote {out / 'summary.txt'} and {out / 'summary.csv'}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "train-clean": _cmd_train_clean,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "scan": _cmd_scan,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embattle",
        description="Train, backdoor, evaluate, and audit small text classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        _add_config_args(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg)
    except CheckpointMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except AttackPreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (ValueError, FileExistsError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
