"""Per-flow prediction, accuracy/F1 and the mean(stderr) results table."""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from flowlm.checkpoint import FINETUNED, ModelCheckpoint
from flowlm.discretizer import TokenizedTable
from flowlm.errors import ConfigMismatch, FingerprintMismatch
from flowlm.sequencer import apply_mlm_mask, collate_batch, sample_training_segment, segment_for_eval

# column titles of the results table, in display order
DOMAIN_TITLES = {
    "cidds1_internal": "CIDDS-001 internal",
    "cidds1_external": "CIDDS-001 external",
    "cidds2": "CIDDS-002",
}


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with malicious as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    f1: float
    confusion: ConfusionMatrix
    set_id: str | None = None

    def to_dict(self) -> dict:
        return {"set_id": self.set_id, "accuracy": self.accuracy, "f1": self.f1, "confusion": asdict(self.confusion)}


@dataclass(frozen=True)
class Summary:
    mean: float | None
    se: float | None


@dataclass(frozen=True)
class AggregateReport:
    accuracy: Summary
    f1: Summary
    runs: tuple[EvalMetrics, ...]

    @property
    def num_sets(self) -> int:
        return len(self.runs)

    def to_dict(self) -> dict:
        return {
            "accuracy": asdict(self.accuracy),
            "f1": asdict(self.f1),
            "sets": [m.to_dict() for m in self.runs],
        }


@dataclass(frozen=True, eq=False)
class Predictions:
    probabilities: np.ndarray  # [N, 2], columns (benign, malicious)
    predicted: np.ndarray  # [N], 1 = malicious


def decide(probabilities: np.ndarray) -> np.ndarray:
    """Higher-probability class; an exact tie goes to malicious."""
    p = np.asarray(probabilities)
    return (p[..., 1] >= p[..., 0]).astype(np.int64)


def predict_flows(
    ckpt: ModelCheckpoint,
    tokens: TokenizedTable,
    seq_len: int = 32,
    discretizer_fingerprint: str | None = None,
    batch_size: int = 64,
) -> Predictions:
    if ckpt.phase != FINETUNED:
        raise ConfigMismatch(f"evaluation needs a fine-tuned checkpoint, got phase {ckpt.phase!r}")
    if discretizer_fingerprint and ckpt.discretizer_fingerprint and discretizer_fingerprint != ckpt.discretizer_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint built for discretizer {ckpt.discretizer_fingerprint}, data tokenized with {discretizer_fingerprint}"
        )
    model = ckpt.model
    model.eval()
    windows = segment_for_eval(tokens, seq_len)
    probs = []
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            batch = collate_batch(windows[i : i + batch_size])
            pad = torch.from_numpy(batch.pad_mask)
            h = model(torch.from_numpy(batch.ids), pad)
            p = torch.softmax(model.cls_logits(h), dim=-1).double().numpy()
            probs.append(p[batch.pad_mask])
    probabilities = np.concatenate(probs) if probs else np.zeros((0, 2))
    return Predictions(probabilities, decide(probabilities))


def confusion(preds: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    p = np.asarray(preds).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"{p.shape[0]} predictions for {y.shape[0]} labels")
    return ConfusionMatrix(
        tp=int(np.sum(p & y)),
        fp=int(np.sum(p & ~y)),
        tn=int(np.sum(~p & ~y)),
        fn=int(np.sum(~p & y)),
    )


def compute_metrics(cm: ConfusionMatrix, set_id: str | None = None) -> EvalMetrics:
    total = cm.total
    accuracy = (cm.tp + cm.tn) / total if total else 0.0
    denom = 2 * cm.tp + cm.fp + cm.fn
    f1 = 2 * cm.tp / denom if denom else 0.0
    return EvalMetrics(accuracy, f1, cm, set_id)


def evaluate_set(ckpt, tokens: TokenizedTable, seq_len: int = 32, set_id=None, discretizer_fingerprint=None) -> EvalMetrics:
    preds = predict_flows(ckpt, tokens, seq_len, discretizer_fingerprint)
    return compute_metrics(confusion(preds.predicted, tokens.labels), set_id)


def _summary(values: list[float]) -> Summary:
    if not values:
        return Summary(None, None)
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return Summary(mean, 0.0)
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return Summary(mean, math.sqrt(var) / math.sqrt(len(values)))


def aggregate_runs(metrics: Sequence[EvalMetrics]) -> AggregateReport:
    """Mean and standard error (sample stddev / sqrt(n)) across evaluation sets."""
    if len(metrics) == 1:
        warnings.warn("standard error of a single run is reported as 0")
    return AggregateReport(
        _summary([m.accuracy for m in metrics]),
        _summary([m.f1 for m in metrics]),
        tuple(metrics),
    )


def format_cell(summary: Summary | None) -> str:
    if summary is None or summary.mean is None:
        return "-"
    return f"{summary.mean:.3f}({summary.se:.3f})"


def domain_order(domains) -> list[str]:
    """Known domains in table order, then any others alphabetically."""
    known = [d for d in DOMAIN_TITLES if d in domains]
    return known + sorted(d for d in domains if d not in DOMAIN_TITLES)


def report_to_dict(reports: Mapping[str, AggregateReport | None]) -> dict:
    out = {}
    for domain, rep in reports.items():
        out[domain] = rep.to_dict() if rep is not None else {
            "accuracy": {"mean": None, "se": None},
            "f1": {"mean": None, "se": None},
            "sets": [],
        }
    return out


def render_report(reports: Mapping[str, AggregateReport | None], title: str = "Proposal") -> str:
    """Text table with one Accuracy and one F1 column per test domain."""
    domains = list(reports)
    head1 = [""]
    for d in domains:
        head1 += [f"Test {DOMAIN_TITLES.get(d, d)}", ""]
    head2 = ["Classifier", *["Accuracy", "F1 score"] * len(domains)]
    row = [title]
    for d in domains:
        rep = reports[d]
        row += [format_cell(rep.accuracy if rep else None), format_cell(rep.f1 if rep else None)]
    rows = [head1, head2, row]
    widths = [max(len(r[i]) for r in rows) for i in range(len(head1))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(2, "-" * len(lines[1]))
    return "\n".join(lines) + "\n"


def write_report(reports: Mapping[str, AggregateReport | None], out_dir: str | os.PathLike, title: str = "Proposal", extra: dict | None = None) -> None:
    doc = report_to_dict(reports)
    if extra:
        doc = {"results": doc, **extra}
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_report(reports, title))


def masked_prediction_accuracy(
    model,
    tokens: TokenizedTable,
    seq_len: int,
    rate: float,
    rng: np.random.Generator,
    num_sequences: int = 256,
    batch_size: int = 64,
) -> float:
    """Fraction of masked-flow feature ids recovered by the MLM head."""
    vocab = model.config.vocab_sizes
    model.eval()
    hits = total = 0
    with torch.no_grad():
        for start in range(0, num_sequences, batch_size):
            n = min(batch_size, num_sequences - start)
            seqs = [apply_mlm_mask(sample_training_segment(tokens, seq_len, rng), rate, rng, vocab) for _ in range(n)]
            batch = collate_batch(seqs)
            h = model(torch.from_numpy(batch.ids), torch.from_numpy(batch.pad_mask))
            sel = batch.mlm_mask
            for f, lg in enumerate(model.mlm_logits(h)):
                guess = lg.argmax(-1).numpy()
                hits += int((guess[sel] == batch.targets[..., f][sel]).sum())
                total += int(sel.sum())
    return hits / total if total else float("nan")
