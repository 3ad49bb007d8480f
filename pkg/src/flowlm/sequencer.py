"""Flow "sentences": windows over a tokenized table, MLM corruption, batching."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from flowlm.discretizer import FEATURES, FIRST_DATA_ID, MASK_ID, PAD_ID, TokenizedTable
from flowlm.errors import EmptyTable, RaggedBatch

NUM_FEATURES = len(FEATURES)
IGNORE_LABEL = -1

# corruption branch codes carried by MaskedSequence.branch
NOT_SELECTED, BRANCH_MASK, BRANCH_RANDOM, BRANCH_KEEP = 0, 1, 2, 3


@dataclass(frozen=True, eq=False)
class FlowSequence:
    ids: np.ndarray  # [L, 6]
    pad_mask: np.ndarray  # [L], True at real flows
    labels: np.ndarray  # [L], IGNORE_LABEL at pads
    order_index: np.ndarray  # [L], -1 at pads

    def __len__(self) -> int:
        return int(self.pad_mask.shape[0])


@dataclass(frozen=True, eq=False)
class MaskedSequence:
    inputs: np.ndarray  # [L, 6] after corruption
    targets: np.ndarray  # [L, 6] original ids
    mlm_mask: np.ndarray  # [L], True where the loss applies
    pad_mask: np.ndarray
    labels: np.ndarray
    branch: np.ndarray  # [L] corruption branch code

    def __len__(self) -> int:
        return int(self.pad_mask.shape[0])


@dataclass(frozen=True, eq=False)
class Batch:
    ids: np.ndarray  # [B, L, 6] model inputs
    pad_mask: np.ndarray  # [B, L]
    labels: np.ndarray  # [B, L]
    targets: np.ndarray | None = None  # [B, L, 6], masked batches only
    mlm_mask: np.ndarray | None = None  # [B, L]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape[0], self.ids.shape[1]


def _window(table: TokenizedTable, start: int, length: int) -> FlowSequence:
    stop = min(start + length, len(table))
    real = stop - start
    ids = np.full((length, NUM_FEATURES), PAD_ID, dtype=np.int64)
    labels = np.full(length, IGNORE_LABEL, dtype=np.int64)
    order = np.full(length, -1, dtype=np.int64)
    ids[:real] = table.ids[start:stop]
    labels[:real] = table.labels[start:stop]
    order[:real] = table.order_index[start:stop]
    pad_mask = np.zeros(length, dtype=bool)
    pad_mask[:real] = True
    return FlowSequence(ids, pad_mask, labels, order)


def sample_training_segment(table: TokenizedTable, length: int, rng: np.random.Generator) -> FlowSequence:
    """A random contiguous slice of ``length`` flows; tail-padded if the table is shorter."""
    n = len(table)
    if n == 0:
        raise EmptyTable("cannot sample from an empty table")
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    start = int(rng.integers(0, max(0, n - length) + 1))
    return _window(table, start, length)


def apply_mlm_mask(
    seq: FlowSequence,
    rate: float,
    rng: np.random.Generator,
    vocab_sizes: Sequence[int],
    mask_prob: float = 0.8,
    random_prob: float = 0.1,
) -> MaskedSequence:
    """Corrupt whole flows for masked-flow prediction.

    Each real position is selected with probability ``rate``. A selected flow
    has all six ids replaced by MASK (``mask_prob``), each id replaced by a
    random data id of its own vocabulary (``random_prob``), or is left as is.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError("mask rate must be in (0, 1)")
    length = len(seq)
    selected = (rng.random(length) < rate) & seq.pad_mask
    u = rng.random(length)
    branch = np.where(
        u < mask_prob, BRANCH_MASK, np.where(u < mask_prob + random_prob, BRANCH_RANDOM, BRANCH_KEEP)
    )
    branch = np.where(selected, branch, NOT_SELECTED)

    inputs = seq.ids.copy()
    inputs[branch == BRANCH_MASK] = MASK_ID
    rand_rows = np.flatnonzero(branch == BRANCH_RANDOM)
    if rand_rows.size:
        high = np.asarray(vocab_sizes, dtype=np.int64)
        draws = rng.integers(FIRST_DATA_ID, high, size=(rand_rows.size, NUM_FEATURES))
        inputs[rand_rows] = draws
    return MaskedSequence(inputs, seq.ids.copy(), selected, seq.pad_mask.copy(), seq.labels.copy(), branch)


def segment_for_eval(table: TokenizedTable, length: int) -> list[FlowSequence]:
    """Non-overlapping windows covering every flow exactly once."""
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    return [_window(table, start, length) for start in range(0, len(table), length)]


def collate_batch(seqs: Sequence[FlowSequence | MaskedSequence], length: int | None = None) -> Batch:
    lengths = {len(s) for s in seqs}
    if length is not None:
        lengths.add(length)
    if len(lengths) > 1:
        raise RaggedBatch(f"sequences of differing lengths {sorted(lengths)}")
    if not seqs:
        if length is None:
            raise ValueError("empty batch needs an explicit length")
        return Batch(
            np.zeros((0, length, NUM_FEATURES), dtype=np.int64),
            np.zeros((0, length), dtype=bool),
            np.zeros((0, length), dtype=np.int64),
        )

    pad_mask = np.stack([s.pad_mask for s in seqs])
    labels = np.stack([s.labels for s in seqs])
    if all(isinstance(s, MaskedSequence) for s in seqs):
        return Batch(
            np.stack([s.inputs for s in seqs]),
            pad_mask,
            labels,
            np.stack([s.targets for s in seqs]),
            np.stack([s.mlm_mask for s in seqs]),
        )
    if any(isinstance(s, MaskedSequence) for s in seqs):
        raise TypeError("cannot mix masked and plain sequences in one batch")
    return Batch(np.stack([s.ids for s in seqs]), pad_mask, labels)


def dump_batch_jsonl(batch: Batch, path: str | os.PathLike) -> None:
    """Debug dump: one JSON object per sequence."""
    with open(path, "w", encoding="utf-8") as fh:
        for b in range(batch.ids.shape[0]):
            row = {"ids": batch.ids[b].tolist(), "pad_mask": batch.pad_mask[b].astype(int).tolist()}
            if batch.mlm_mask is not None:
                row["targets"] = batch.targets[b].tolist()
                row["mlm_mask"] = batch.mlm_mask[b].astype(int).tolist()
            fh.write(json.dumps(row) + "\n")
