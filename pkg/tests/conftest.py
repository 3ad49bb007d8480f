import numpy as np
import pytest

from flowlm.ingest import CIDDS_HEADER, Domain, load_flow_table
from flowlm.model import ModelConfig
from flowlm.synthetic import write_capture

_ACCEPTANCE = []


def record_criterion(number, name, passed, detail=""):
    _ACCEPTANCE.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"[{status}] {number}. {name}  {detail}")


def cidds_row(**overrides):
    row = {
        "Date first seen": "2017-03-15 00:01:16.632",
        "Duration": "0.000",
        "Proto": "TCP",
        "Src IP Addr": "192.168.100.5",
        "Src Pt": "445",
        "Dst IP Addr": "192.168.220.16",
        "Dst Pt": "58844",
        "Packets": "1",
        "Bytes": "108",
        "Flows": "1",
        "Flags": ".AP...",
        "Tos": "0",
        "class": "normal",
        "attackType": "---",
        "attackID": "---",
        "attackDescription": "---",
    }
    row.update(overrides)
    return row


def write_rows(path, rows, header=CIDDS_HEADER):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            if isinstance(r, str):
                fh.write(r + "\n")
            else:
                fh.write(",".join(str(r.get(h, "")) for h in header) + "\n")
    return path


@pytest.fixture
def tiny_config():
    return ModelConfig(
        vocab_sizes=(9, 8, 6, 7, 9, 8),
        embed_dim=8,
        num_layers=1,
        num_heads=4,
        ff_dim=32,
        max_len=16,
        dropout=0.0,
    )


@pytest.fixture(scope="session")
def capture_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("capture") / "train.csv"
    write_capture(path, 3000, Domain.CIDDS1_INTERNAL, seed=11)
    return path


@pytest.fixture(scope="session")
def capture_table(capture_path):
    return load_flow_table(capture_path, Domain.CIDDS1_INTERNAL)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
