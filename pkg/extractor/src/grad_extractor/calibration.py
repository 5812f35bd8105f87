"""Calibration batch construction with prompt masking.

Each example is a prompt/answer pair tokenized by teacher forcing on the
concatenation; labels are -100 on prompt positions so the loss sees only the
answer continuation (plus optional separator space and end-of-sequence
token). Examples are picked by optional seeded shuffling followed by a
contiguous range selection with a start offset, so runs are reproducible.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import torch

IGNORE_INDEX = -100


class Tokenizer(Protocol):
    eos_token_id: int

    def encode(self, text: str) -> list[int]: ...


@dataclass(frozen=True)
class CalibrationSpec:
    dataset_path: str | Path
    n_cal: int = 128
    shuffle: bool = False
    seed: int = 0
    offset: int = 0
    max_length: int | None = None
    add_sep_space: bool = True
    add_eos: bool = True

    def __post_init__(self):
        if self.n_cal < 1:
            raise ValueError(f"n_cal must be >= 1, got {self.n_cal}")
        if self.offset < 0:
            raise ValueError(f"offset must be >= 0, got {self.offset}")


@dataclass(frozen=True)
class Batch:
    input_ids: torch.Tensor  # (seq,)
    labels: torch.Tensor  # (seq,), -100 on prompt positions


def load_pairs(path: str | Path) -> list[dict]:
    """JSONL of {"prompt": str, "answer": str} records."""
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                pairs.append(json.loads(line))
    return pairs


def select_examples(spec: CalibrationSpec, n_total: int) -> list[int]:
    order = list(range(n_total))
    if spec.shuffle:
        random.Random(spec.seed).shuffle(order)
    if spec.offset >= n_total:
        raise ValueError(
            f"offset {spec.offset} is outside the dataset (size {n_total})"
        )
    return order[spec.offset : spec.offset + spec.n_cal]


def build_calibration_batches(
    spec: CalibrationSpec, tokenizer: Tokenizer, pairs: Sequence[dict] | None = None
) -> tuple[list[Batch], int]:
    """Returns (batches, n_dropped). An example is dropped when its answer is
    empty or truncation leaves no answer tokens; truncation removes prompt
    tokens from the front so the answer tail survives when possible."""
    if pairs is None:
        pairs = load_pairs(spec.dataset_path)
    batches: list[Batch] = []
    dropped = 0
    for idx in select_examples(spec, len(pairs)):
        pair = pairs[idx]
        prompt_ids = tokenizer.encode(pair["prompt"])
        answer = pair.get("answer", "")
        if spec.add_sep_space and answer:
            answer = " " + answer
        answer_ids = tokenizer.encode(answer) if answer else []
        if spec.add_eos:
            answer_ids = answer_ids + [tokenizer.eos_token_id]
        if not answer_ids or (spec.add_eos and len(answer_ids) == 1 and not answer):
            dropped += 1
            continue

        ids = prompt_ids + answer_ids
        labels = [IGNORE_INDEX] * len(prompt_ids) + answer_ids
        if spec.max_length is not None and len(ids) > spec.max_length:
            ids = ids[-spec.max_length :]
            labels = labels[-spec.max_length :]
        if all(l == IGNORE_INDEX for l in labels):
            dropped += 1
            continue
        batches.append(
            Batch(
                input_ids=torch.tensor(ids, dtype=torch.long),
                labels=torch.tensor(labels, dtype=torch.long),
            )
        )
    return batches, dropped
