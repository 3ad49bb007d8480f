"""Synthetic CIDDS-format captures and token-level toy tasks.

The captures are generated in bursts so that neighbouring flows share a label,
which is the structure the sequence model is meant to pick up. They are
fixtures for tests and demos, not a model of real traffic.
"""

from __future__ import annotations

import datetime as dt
import os
from typing import Mapping

import numpy as np

from flowlm.discretizer import FIRST_DATA_ID, TokenizedTable
from flowlm.ingest import Domain, write_flow_csv

# default label mix per domain (weights, not counts)
DOMAIN_MIX: dict[Domain, dict[str, float]] = {
    Domain.CIDDS1_INTERNAL: {"normal": 0.5, "dos": 0.42, "portScan": 0.06, "pingScan": 0.012, "bruteForce": 0.008},
    Domain.CIDDS1_EXTERNAL: {"unknown": 0.5, "suspicious": 0.5},
    Domain.CIDDS2: {"normal": 0.5, "scan": 0.5},
}

_EPOCH = dt.datetime(2017, 3, 15, 0, 1, 16)


def _fmt_bytes(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.1f} M"
    return str(n)


def _flow(label: str, rng: np.random.Generator) -> dict:
    """Raw column values for one flow of the given fine label."""
    eph = int(rng.integers(32768, 61000))
    if label in ("normal", "unknown"):
        if rng.random() < 0.7:
            packets = int(rng.geometric(0.15))
            size = int(rng.integers(60, 1400))
            nbytes = packets * size
            if rng.random() < 0.02:
                nbytes = int(rng.uniform(1.0, 5.0) * 1e6)
            return dict(Proto="TCP", src=eph, dst=int(rng.choice([80, 443, 8080, 8000])), pk=packets,
                        by=nbytes, dur=float(rng.exponential(2.0)), Flags=str(rng.choice([".AP.SF", ".AP...", ".A...F"])))
        return dict(Proto="UDP", src=eph, dst=int(rng.choice([53, 123, 137])), pk=int(rng.integers(1, 3)),
                    by=int(rng.integers(60, 300)), dur=float(rng.exponential(0.05)), Flags="......")
    if label == "dos":
        return dict(Proto="TCP", src=eph, dst=80, pk=1, by=int(rng.integers(40, 61)), dur=0.0, Flags="....S.")
    if label in ("portScan", "scan", "suspicious"):
        flags = "....S." if rng.random() < 0.7 else str(rng.choice([".A..S.", "...R..", ".A.R.."]))
        return dict(Proto="TCP", src=eph, dst=int(rng.integers(1, 10000)), pk=int(rng.integers(1, 3)),
                    by=int(rng.integers(40, 90)), dur=float(rng.exponential(0.005)), Flags=flags)
    if label == "pingScan":
        return dict(Proto="ICMP", src=0, dst="8.0", pk=1, by=int(rng.integers(42, 64)), dur=0.0, Flags="......")
    if label == "bruteForce":
        return dict(Proto="TCP", src=eph, dst=22, pk=int(rng.integers(10, 31)), by=int(rng.integers(1000, 5000)),
                    dur=float(rng.uniform(1.0, 5.0)), Flags=".AP.SF")
    raise ValueError(f"no synthetic profile for {label!r}")


def _class_columns(label: str, domain: Domain) -> tuple[str, str]:
    if domain is Domain.CIDDS1_EXTERNAL:
        return label, "---"
    if label == "normal":
        return "normal", "---"
    # CIDDS-002 scans keep a port-scan attack type; ingest folds them into "scan"
    return "attacker", "portScan" if label == "scan" else label


def generate_rows(
    n: int,
    domain: Domain | str = Domain.CIDDS1_INTERNAL,
    seed: int = 0,
    mix: Mapping[str, float] | None = None,
    mean_burst: float = 20.0,
) -> list[dict]:
    domain = Domain(domain)
    mix = dict(mix or DOMAIN_MIX[domain])
    labels = list(mix)
    weights = np.asarray([mix[k] for k in labels], dtype=float)
    weights /= weights.sum()
    rng = np.random.default_rng(seed)
    rows = []
    t = _EPOCH
    while len(rows) < n:
        label = labels[int(rng.choice(len(labels), p=weights))]
        burst = min(int(rng.geometric(1.0 / mean_burst)), n - len(rows))
        cls, atk = _class_columns(label, domain)
        for _ in range(burst):
            f = _flow(label, rng)
            t += dt.timedelta(milliseconds=int(rng.integers(1, 500)))
            rows.append({
                "Date first seen": t.strftime("%Y-%m-%d %H:%M:%S.") + f"{t.microsecond // 1000:03d}",
                "Duration": f"{f['dur']:.3f}",
                "Proto": f["Proto"],
                "Src IP Addr": "192.168.100.5" if cls == "attacker" else "192.168.220.16",
                "Src Pt": str(f["src"]),
                "Dst IP Addr": "192.168.100.1",
                "Dst Pt": str(f["dst"]),
                "Packets": str(f["pk"]),
                "Bytes": _fmt_bytes(f["by"]),
                "Flows": "1",
                "Flags": f["Flags"],
                "Tos": "0",
                "class": cls,
                "attackType": atk,
                "attackID": "---" if atk == "---" else "1",
                "attackDescription": "---",
            })
    return rows


def write_capture(path: str | os.PathLike, n: int, domain: Domain | str = Domain.CIDDS1_INTERNAL, seed: int = 0,
                  mix: Mapping[str, float] | None = None) -> None:
    write_flow_csv(generate_rows(n, domain, seed, mix), path)


def port_rule_tokens(n: int, vocab_sizes, seed: int = 0) -> TokenizedTable:
    """Uniform random flows; malicious exactly when the dst-port id is the top bin."""
    rng = np.random.default_rng(seed)
    ids = np.stack([rng.integers(FIRST_DATA_ID, v, size=n) for v in vocab_sizes], axis=1)
    labels = (ids[:, 1] == vocab_sizes[1] - 1).astype(np.int64)
    return TokenizedTable(ids.astype(np.int64), labels, np.arange(n, dtype=np.int64))


def parity_pattern_tokens(n: int, vocab_sizes, seed: int = 0) -> TokenizedTable:
    """Two fixed flows alternating by position: every flow is determined by its neighbours."""
    rng = np.random.default_rng(seed)
    a = [int(rng.integers(FIRST_DATA_ID, v)) for v in vocab_sizes]
    b = [int(rng.integers(FIRST_DATA_ID, v)) for v in vocab_sizes]
    while b == a:
        b = [int(rng.integers(FIRST_DATA_ID, v)) for v in vocab_sizes]
    ids = np.where((np.arange(n) % 2 == 0)[:, None], np.asarray(a), np.asarray(b)).astype(np.int64)
    return TokenizedTable(ids, np.zeros(n, dtype=np.int64), np.arange(n, dtype=np.int64))
