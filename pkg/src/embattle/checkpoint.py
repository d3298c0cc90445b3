"""Plain-text checkpoints and vocabulary files.

Checkpoint layout: a small header (format version, dims, vocab hash, seed)
followed by each weight tensor as base-10 decimals, row-major, 17
significant digits (enough for a bit-exact float64 round trip).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .data import Vocab
from .model import Arch, ModelParams

FORMAT_VERSION = 1

_TENSOR_ORDER = ["embedding", "hidden_w", "hidden_b", "out_w", "out_b"]


class CheckpointMismatchError(Exception):
    """Checkpoint header disagrees with what the caller expects."""


def vocab_hash(vocab: Vocab) -> str:
    payload = json.dumps(
        {
            "tokens": vocab.id_to_token,
            "pad_id": vocab.pad_id,
            "unk_id": vocab.unk_id,
            "rare_words": vocab.rare_words,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    doc = {
        "id_to_token": vocab.id_to_token,
        "pad_id": vocab.pad_id,
        "unk_id": vocab.unk_id,
        "rare_words": vocab.rare_words,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    vocab = Vocab(
        token_to_id={t: i for i, t in enumerate(doc["id_to_token"])},
        id_to_token=list(doc["id_to_token"]),
        pad_id=doc["pad_id"],
        unk_id=doc["unk_id"],
        rare_words=list(doc["rare_words"]),
    )
    vocab.validate()
    return vocab


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_checkpoint(p: ModelParams, path: str | Path, vocab_digest: str, seed: int) -> None:
    a = p.arch
    lines = [
        f"embattle-checkpoint {FORMAT_VERSION}",
        f"dims {a.embed_dim} {a.hidden_dim} {a.num_classes} {a.vocab_size} {a.pad_id}",
        f"vocab_hash {vocab_digest}",
        f"seed {seed}",
    ]
    for name in _TENSOR_ORDER:
        tensor = np.atleast_2d(p.arrays()[name])
        lines.append(f"tensor {name} {tensor.shape[0]} {tensor.shape[1]}")
        for row in tensor:
            lines.append(" ".join(_fmt(v) for v in row))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path, expect_vocab_hash: str | None = None) -> tuple[ModelParams, str, int]:
    """Load a checkpoint; returns (params, vocab_hash, seed).

    Raises CheckpointMismatchError when dims are inconsistent or the vocab
    hash differs from ``expect_vocab_hash``.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    it = iter(lines)

    header = next(it).split()
    if header[:1] != ["embattle-checkpoint"] or int(header[1]) != FORMAT_VERSION:
        raise CheckpointMismatchError(f"{path}: unknown checkpoint format")
    dims = next(it).split()
    if dims[0] != "dims":
        raise CheckpointMismatchError(f"{path}: missing dims line")
    d, h, c, v, pad_id = (int(x) for x in dims[1:])
    arch = Arch(embed_dim=d, hidden_dim=h, num_classes=c, vocab_size=v, pad_id=pad_id)
    stored_hash = next(it).split()[1]
    if expect_vocab_hash is not None and stored_hash != expect_vocab_hash:
        raise CheckpointMismatchError(f"{path}: vocab hash mismatch")
    seed = int(next(it).split()[1])

    shapes = {
        "embedding": (v, d),
        "hidden_w": (d, h),
        "hidden_b": (1, h),
        "out_w": (h, c),
        "out_b": (1, c),
    }
    tensors: dict[str, np.ndarray] = {}
    for name in _TENSOR_ORDER:
        head = next(it).split()
        if head[0] != "tensor" or head[1] != name:
            raise CheckpointMismatchError(f"{path}: expected tensor {name}")
        rows, cols = int(head[2]), int(head[3])
        if (rows, cols) != shapes[name]:
            raise CheckpointMismatchError(f"{path}: tensor {name} has wrong shape")
        data = np.empty((rows, cols), dtype=np.float64)
        for r in range(rows):
            data[r] = np.array(next(it).split(), dtype=np.float64)
        tensors[name] = data
    if next(it).strip() != "end":
        raise CheckpointMismatchError(f"{path}: missing end marker")

    params = ModelParams(
        arch=arch,
        embedding=tensors["embedding"],
        hidden_w=tensors["hidden_w"],
        hidden_b=tensors["hidden_b"][0],
        out_w=tensors["out_w"],
        out_b=tensors["out_b"][0],
    )
    return params, stored_hash, seed
