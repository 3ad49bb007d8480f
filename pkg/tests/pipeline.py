"""Drive the ``flowlm`` CLI in-process over the synthetic captures."""

import json
from pathlib import Path

from flowlm.cli import main

DOMAINS = {"cidds1_internal": "cidds1-internal", "cidds1_external": "cidds1-external", "cidds2": "cidds2"}
TINY_MODEL = ["--embed-dim", "8", "--heads", "4", "--ff-dim", "64", "--layers", "1"]


def run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"flowlm {' '.join(map(str, argv))} exited {code}"


def run_pipeline(root, seed=0, flows=10000, test_flows=25000, steps=300, compositions=None, num_sets=10):
    """synth -> fit-discretizer -> make-splits x3 -> pretrain -> finetune -> evaluate; returns the eval dir.

    ``compositions`` maps domain -> label counts; presets are used when omitted.
    """
    root = Path(root)
    data = root / "data"
    run("synth", "--out", data, "--flows", flows, "--test-flows", test_flows, "--seed", seed)
    run("fit-discretizer", data / "train.csv", "--out", root / "disc.json")
    sets = []
    for domain, preset in DOMAINS.items():
        how = ["--preset", preset] if compositions is None else [
            "--domain", domain, "--composition", json.dumps(compositions[domain])]
        run("make-splits", data / f"{domain}.csv", *how, "--num-sets", num_sets, "--seed", seed,
            "--out", root / "splits" / domain)
        sets += ["--set", f"{domain}={root / 'splits' / domain / 'set_*.csv'}"]
    common = ["--train", data / "train.csv", "--discretizer", root / "disc.json", "--steps", steps,
              "--batch-size", 16, "--warmup-steps", 30, "--lr", "1e-3", "--seed", seed, "--progress-every", 0]
    run("pretrain", *common, *TINY_MODEL, "--out", root / "pre")
    run("finetune", *common, "--init", root / "pre" / "checkpoint", "--out", root / "ft")
    run("evaluate", "--checkpoint", root / "ft" / "checkpoint", "--discretizer", root / "disc.json", *sets,
        "--deterministic", "--out", root / "eval")
    return root / "eval"

