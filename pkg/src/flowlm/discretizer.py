"""Quantile discretization of the six flow features into token ids.

Every feature has its own vocabulary. Ids 0-2 are reserved (PAD, MASK, UNK) in
all six; data bins and categories start at 3.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from flowlm.errors import EmptyFitSet, FormatVersionMismatch
from flowlm.ingest import MALICIOUS, FlowRecord, FlowTable

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
FIRST_DATA_ID = 3

FEATURES = ("src_port", "dst_port", "protoflags", "packets", "bytes", "duration")
NUMERIC_FEATURES = ("src_port", "dst_port", "packets", "bytes", "duration")
PROTOFLAGS_COLUMN = FEATURES.index("protoflags")
FORMAT_VERSION = 1
DEFAULT_BINS = 32


def quantile_edges(values: np.ndarray, bins: int) -> np.ndarray:
    """Interior k/bins quantiles (linear interpolation), deduplicated.

    Edges at or above the maximum are dropped: with strict-greater bucketing
    they would only open a bin that no fit value can reach.
    """
    values = np.asarray(values, dtype=np.float64)
    qs = np.arange(1, bins) / bins
    edges = np.unique(np.quantile(values, qs, method="linear"))
    return edges[edges < values.max()]


def bucketize(values, edges: np.ndarray) -> np.ndarray:
    """Data id for each value: 3 + number of edges strictly below it."""
    return FIRST_DATA_ID + np.searchsorted(edges, values, side="left")


@dataclass(frozen=True)
class TokenizedFlow:
    ids: tuple[int, ...]
    binary_label: str
    order_index: int


@dataclass(frozen=True, eq=False)
class TokenizedTable:
    """Column-oriented tokenized flows: ``ids`` is an int64 array of shape [N, 6].

    ``labels`` holds 1 for malicious and 0 for benign.
    """

    ids: np.ndarray
    labels: np.ndarray
    order_index: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def __getitem__(self, i: int) -> TokenizedFlow:
        return TokenizedFlow(
            tuple(int(x) for x in self.ids[i]),
            MALICIOUS if self.labels[i] == 1 else "benign",
            int(self.order_index[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_flows(cls, flows: Sequence[TokenizedFlow]) -> "TokenizedTable":
        ids = np.array([f.ids for f in flows], dtype=np.int64).reshape(-1, len(FEATURES))
        labels = np.array([f.binary_label == MALICIOUS for f in flows], dtype=np.int64)
        order = np.array([f.order_index for f in flows], dtype=np.int64)
        return cls(ids, labels, order)


@dataclass(frozen=True)
class DiscretizerModel:
    numeric_edges: dict[str, np.ndarray]
    protoflags_table: dict[str, int]
    bins: int = DEFAULT_BINS
    fit_fingerprint: str = ""
    vocab_sizes: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        sizes = []
        for name in FEATURES:
            if name == "protoflags":
                sizes.append(FIRST_DATA_ID + len(self.protoflags_table))
            else:
                sizes.append(FIRST_DATA_ID + len(self.numeric_edges[name]) + 1)
        object.__setattr__(self, "vocab_sizes", tuple(sizes))

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "bins": self.bins,
            "edges": {k: [float(x) for x in self.numeric_edges[k]] for k in NUMERIC_FEATURES},
            "protoflags": dict(self.protoflags_table),
            "vocab_sizes": list(self.vocab_sizes),
            "fit_fingerprint": self.fit_fingerprint,
        }

    @property
    def fingerprint(self) -> str:
        """Content hash identifying this discretizer in downstream artifacts."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _numeric_columns(records: Sequence[FlowRecord]) -> dict[str, np.ndarray]:
    return {
        name: np.fromiter((getattr(r, name) for r in records), dtype=np.float64, count=len(records))
        for name in NUMERIC_FEATURES
    }


def fit_discretizer(table: FlowTable | Sequence[FlowRecord], bins: int = DEFAULT_BINS) -> DiscretizerModel:
    records = table.records if isinstance(table, FlowTable) else list(table)
    if not records:
        raise EmptyFitSet("cannot fit a discretizer on an empty table")
    if bins < 2:
        raise ValueError("bins must be >= 2")

    columns = _numeric_columns(records)
    edges = {name: quantile_edges(col, bins) for name, col in columns.items()}

    protoflags: dict[str, int] = {}
    for r in records:
        key = r.protoflags
        if key not in protoflags:
            protoflags[key] = FIRST_DATA_ID + len(protoflags)

    h = hashlib.sha256()
    for name in NUMERIC_FEATURES:
        h.update(columns[name].tobytes())
    h.update("\n".join(protoflags).encode())
    return DiscretizerModel(edges, protoflags, bins, h.hexdigest()[:16])


def transform_flow(record: FlowRecord, model: DiscretizerModel) -> TokenizedFlow:
    ids = []
    for name in FEATURES:
        if name == "protoflags":
            ids.append(model.protoflags_table.get(record.protoflags, UNK_ID))
        else:
            ids.append(int(bucketize(getattr(record, name), model.numeric_edges[name])))
    return TokenizedFlow(tuple(ids), record.binary_label, record.order_index)


def transform_table(table: FlowTable | Sequence[FlowRecord], model: DiscretizerModel) -> TokenizedTable:
    records = table.records if isinstance(table, FlowTable) else list(table)
    n = len(records)
    ids = np.empty((n, len(FEATURES)), dtype=np.int64)
    if n:
        columns = _numeric_columns(records)
        for f, name in enumerate(FEATURES):
            if name == "protoflags":
                lookup = model.protoflags_table
                ids[:, f] = [lookup.get(r.protoflags, UNK_ID) for r in records]
            else:
                ids[:, f] = bucketize(columns[name], model.numeric_edges[name])
    labels = np.fromiter((r.binary_label == MALICIOUS for r in records), dtype=np.int64, count=n)
    order = np.fromiter((r.order_index for r in records), dtype=np.int64, count=n)
    return TokenizedTable(ids, labels, order)


def save_discretizer(model: DiscretizerModel, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=1)
        fh.write("\n")


def load_discretizer(path: str | os.PathLike) -> DiscretizerModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatVersionMismatch(f"{path}: not a discretizer document ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: expected version {FORMAT_VERSION}")
    try:
        edges = {k: np.asarray(doc["edges"][k], dtype=np.float64) for k in NUMERIC_FEATURES}
        model = DiscretizerModel(edges, dict(doc["protoflags"]), int(doc["bins"]), doc.get("fit_fingerprint", ""))
    except (KeyError, TypeError) as exc:
        raise FormatVersionMismatch(f"{path}: incomplete discretizer document ({exc})") from exc
    if list(model.vocab_sizes) != list(doc.get("vocab_sizes", model.vocab_sizes)):
        raise FormatVersionMismatch(f"{path}: vocab_sizes disagree with edges")
    return model

