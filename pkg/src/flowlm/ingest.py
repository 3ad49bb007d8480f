"""Parsing of CIDDS-style NetFlow CSV exports and evaluation split generation."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from flowlm.errors import InsufficientLabel, MalformedRow, UnknownLabel

logger = logging.getLogger(__name__)


class Domain(str, enum.Enum):
    CIDDS1_INTERNAL = "cidds1_internal"
    CIDDS1_EXTERNAL = "cidds1_external"
    CIDDS2 = "cidds2"


BENIGN = "benign"
MALICIOUS = "malicious"

# logical field -> column name in the published CIDDS header
DEFAULT_SCHEMA: dict[str, str] = {
    "duration": "Duration",
    "proto": "Proto",
    "src_port": "Src Pt",
    "dst_port": "Dst Pt",
    "packets": "Packets",
    "bytes": "Bytes",
    "flags": "Flags",
    "class_label": "class",
    "attack_type": "attackType",
}

CIDDS_HEADER = [
    "Date first seen", "Duration", "Proto", "Src IP Addr", "Src Pt",
    "Dst IP Addr", "Dst Pt", "Packets", "Bytes", "Flows", "Flags", "Tos",
    "class", "attackType", "attackID", "attackDescription",
]

_NO_ATTACK = {"", "---"}
_ATTACK_CLASSES = {"attacker", "victim"}
_MAGNITUDE = {"M": 1_000_000}


@dataclass(frozen=True, slots=True)
class FlowRecord:
    order_index: int
    src_port: int
    dst_port: int
    proto: str
    flags: str
    packets: int
    bytes: int
    duration: float
    class_label: str
    attack_type: str
    binary_label: str
    fine_label: str

    @property
    def protoflags(self) -> str:
        return f"{self.proto}|{self.flags}"


@dataclass(frozen=True)
class FlowTable:
    """Flows of one capture in source-file order."""

    records: tuple[FlowRecord, ...]
    domain_tag: Domain
    source_path: str = ""
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


@dataclass(frozen=True)
class SplitSpec:
    composition: Mapping[str, int]
    num_sets: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_sets < 1:
            raise ValueError("num_sets must be >= 1")
        if any(c < 0 for c in self.composition.values()):
            raise ValueError("label counts must be non-negative")

    @property
    def set_size(self) -> int:
        return sum(self.composition.values())


# Test-set compositions of the three evaluation domains.
SPLIT_PRESETS: dict[str, tuple[Domain, dict[str, int]]] = {
    "cidds1-internal": (
        Domain.CIDDS1_INTERNAL,
        {"normal": 10000, "dos": 9000, "portScan": 935, "pingScan": 45, "bruteForce": 20},
    ),
    "cidds1-external": (Domain.CIDDS1_EXTERNAL, {"unknown": 10000, "suspicious": 10000}),
    "cidds2": (Domain.CIDDS2, {"normal": 10000, "scan": 10000}),
}


def map_label(class_label: str, attack_type: str, domain_tag: Domain | str) -> tuple[str, str]:
    """Return ``(binary_label, fine_label)`` for one flow.

    Attack rows take their fine label from the attack type. On CIDDS-002 every
    scan variant is folded into ``"scan"``.
    """
    domain = Domain(domain_tag)
    cls = class_label.strip()
    atk = attack_type.strip()
    if not cls:
        raise UnknownLabel("empty class label")

    if domain is Domain.CIDDS1_EXTERNAL:
        if cls == "unknown":
            return BENIGN, "unknown"
        if cls == "suspicious":
            return MALICIOUS, "suspicious"

    if cls in _ATTACK_CLASSES or atk not in _NO_ATTACK:
        if atk in _NO_ATTACK:
            raise UnknownLabel(f"attack row ({cls!r}) without attack type")
        if domain is Domain.CIDDS2 and "scan" in atk.lower():
            return MALICIOUS, "scan"
        return MALICIOUS, atk
    if cls == "normal":
        return BENIGN, "normal"
    raise UnknownLabel(f"label {cls!r} not expected in domain {domain.value}")


def _parse_count(text: str) -> int:
    s = text.strip()
    scale = 1
    if s and s[-1] in _MAGNITUDE:
        scale = _MAGNITUDE[s[-1]]
        s = s[:-1].strip()
    value = float(s) * scale
    if not math.isfinite(value) or value < 0:
        raise ValueError(f"bad count {text!r}")
    return int(round(value))


def _parse_port(text: str) -> int:
    # ICMP rows carry "type.code" in the port column; keep the integer part
    value = float(text.strip())
    if not math.isfinite(value):
        raise ValueError(f"bad port {text!r}")
    port = int(value)
    if not 0 <= port <= 65535:
        raise ValueError(f"port out of range {text!r}")
    return port


def parse_flow_record(
    row: Mapping[str, str | None],
    schema: Mapping[str, str] | None = None,
    order_index: int = 0,
    domain_tag: Domain | str = Domain.CIDDS1_INTERNAL,
) -> FlowRecord:
    schema = schema or DEFAULT_SCHEMA
    values = {}
    for name, column in schema.items():
        raw = row.get(column)
        if raw is None:
            raise MalformedRow(order_index, f"missing column {column!r}")
        values[name] = raw.strip()

    try:
        duration = float(values["duration"])
        if not math.isfinite(duration) or duration < 0:
            raise ValueError(f"bad duration {values['duration']!r}")
        record_fields = dict(
            src_port=_parse_port(values["src_port"]),
            dst_port=_parse_port(values["dst_port"]),
            packets=_parse_count(values["packets"]),
            bytes=_parse_count(values["bytes"]),
            duration=duration,
        )
    except ValueError as exc:
        raise MalformedRow(order_index, str(exc)) from None

    try:
        binary, fine = map_label(values["class_label"], values["attack_type"], domain_tag)
    except UnknownLabel as exc:
        raise MalformedRow(order_index, str(exc)) from exc

    return FlowRecord(
        order_index=order_index,
        proto=values["proto"],
        flags=values["flags"],
        class_label=values["class_label"],
        attack_type=values["attack_type"],
        binary_label=binary,
        fine_label=fine,
        **record_fields,
    )


def _read_header(reader) -> list[str]:
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow(0, "missing header row") from None
    return [h.strip() for h in header]


def load_flow_table(
    path: str | os.PathLike,
    domain_tag: Domain | str,
    strict: bool = False,
    schema: Mapping[str, str] | None = None,
    max_rows: int | None = None,
) -> FlowTable:
    """Load a flow CSV in file order.

    ``order_index`` is the 0-based data-row position in the file, so rows skipped
    in non-strict mode leave gaps. ``max_rows`` stops after that many data rows
    (an ordered prefix, not a random sample).
    """
    schema = dict(schema or DEFAULT_SCHEMA)
    domain = Domain(domain_tag)
    records = []
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = _read_header(reader)
        missing = [c for c in schema.values() if c not in header]
        if missing:
            raise MalformedRow(0, f"header lacks columns {missing}", 1, os.fspath(path))
        for i, fields in enumerate(reader):
            if max_rows is not None and i >= max_rows:
                break
            if not fields:
                continue
            row = dict(zip(header, fields))
            try:
                records.append(parse_flow_record(row, schema, i, domain))
            except MalformedRow as exc:
                if strict:
                    raise MalformedRow(exc.row_number, exc.reason, reader.line_num, os.fspath(path)) from None
                skipped += 1
                logger.debug("skipping %s", exc)
    if skipped:
        logger.warning("%s: skipped %d malformed rows", path, skipped)
    return FlowTable(tuple(records), domain, os.fspath(path), skipped)


def dataset_stats(table: FlowTable | Iterable[FlowRecord]) -> dict[str, int]:
    counts = Counter(r.fine_label for r in table)
    report = dict(sorted(counts.items()))
    report["total"] = sum(counts.values())
    return report


def make_eval_splits(table: FlowTable, spec: SplitSpec) -> list[FlowTable]:
    """Draw ``spec.num_sets`` sets with exact per-label counts.

    Each set is sampled without replacement, independently of the other sets,
    and returned in source order.
    """
    by_label: dict[str, list[int]] = {}
    for pos, rec in enumerate(table.records):
        by_label.setdefault(rec.fine_label, []).append(pos)

    for label, count in spec.composition.items():
        have = len(by_label.get(label, ()))
        if have < count:
            raise InsufficientLabel(f"{label!r}: need {count}, source has {have}")

    pools = {label: np.asarray(by_label.get(label, []), dtype=np.int64) for label in spec.composition}
    rng = np.random.default_rng(spec.seed)
    splits = []
    for _ in range(spec.num_sets):
        chosen = [
            rng.choice(pools[label], size=count, replace=False)
            for label, count in sorted(spec.composition.items())
            if count
        ]
        picked = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
        splits.append(
            FlowTable(
                tuple(table.records[p] for p in picked),
                table.domain_tag,
                table.source_path,
            )
        )
    return splits


def write_split_csv(split: FlowTable, path: str | os.PathLike) -> None:
    """Copy the split's rows verbatim from its source file, adding label columns."""
    wanted = {r.order_index: r for r in split.records}
    with open(split.source_path, newline="", encoding="utf-8") as src, open(
        path, "w", newline="", encoding="utf-8"
    ) as dst:
        reader = csv.reader(src)
        header = next(reader)
        stripped = [h.strip() for h in header]
        extra = [c for c in ("binary_label", "fine_label") if c not in stripped]
        slots = {c: stripped.index(c) for c in ("binary_label", "fine_label") if c in stripped}
        writer = csv.writer(dst, lineterminator="\n")
        writer.writerow(header + extra)
        for i, fields in enumerate(reader):
            rec = wanted.get(i)
            if rec is None:
                continue
            out = list(fields)
            for col, val in (("binary_label", rec.binary_label), ("fine_label", rec.fine_label)):
                if col in slots:
                    out[slots[col]] = val
                else:
                    out.append(val)
            writer.writerow(out)


def write_flow_csv(records: Sequence[Mapping[str, object]], path: str | os.PathLike) -> None:
    """Write rows (dicts keyed by CIDDS column names) as a CIDDS-format CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CIDDS_HEADER, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in records:
            writer.writerow(row)


def write_stats_json(stats: Mapping[str, int], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(stats), fh, indent=2)
        fh.write("\n")
