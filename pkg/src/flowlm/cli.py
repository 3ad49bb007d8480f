"""``flowlm`` command line: ingest, make-splits, fit-discretizer, pretrain, finetune, evaluate, report.

Exit codes: 0 ok, 1 data/validation error, 2 usage or I/O error, 3 discretizer
fingerprint mismatch between artifacts.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time
from pathlib import Path

from flowlm import discretizer as disc_mod
from flowlm.checkpoint import read_manifest
from flowlm.errors import FingerprintMismatch, FlowLMError, MalformedRow
from flowlm.ingest import SPLIT_PRESETS, Domain, SplitSpec, dataset_stats, load_flow_table, make_eval_splits, write_split_csv, write_stats_json
from flowlm.provenance import checkpoint_digest, file_digest, file_ref

logger = logging.getLogger("flowlm")

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_FINGERPRINT = 0, 1, 2, 3
DATA_DIR_ENV = "FLOWLM_DATA_DIR"

# config-file sections and the flags that override their fields
MODEL_FLAGS = {"embed_dim": "embed_dim", "layers": "num_layers", "heads": "num_heads", "ff_dim": "ff_dim",
               "max_len": "max_len", "dropout": "dropout", "precision": "precision"}
TRAIN_FLAGS = ("steps", "batch_size", "seq_len", "lr", "warmup_steps", "mask_rate", "seed", "checkpoint_every",
               "log_every", "progress_every", "max_rows")


class UsageError(Exception):
    pass


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    with open(args.config, encoding="utf-8") as fh:
        return json.load(fh)


def _resolve(section: dict, args, names) -> dict:
    """Config-file section overridden by any flag the user actually set."""
    out = dict(section)
    for flag in names:
        key = names[flag] if isinstance(names, dict) else flag
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _run_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        base = Path(os.environ.get(DATA_DIR_ENV, "."))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = base / "runs" / f"{stamp}-s{getattr(args, 'seed', None) or 0}" / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(resolved: dict) -> None:
    print(json.dumps(resolved, indent=1, sort_keys=True), file=sys.stderr)


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_ingest(args) -> int:
    table = load_flow_table(args.path, args.domain, strict=args.strict)
    stats = dataset_stats(table)
    out = Path(args.out) if args.out else _run_dir(args, "ingest") / "stats.json"
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "stats.json"
    write_stats_json(stats, out)
    logger.info("%d flows, %d skipped -> %s", stats["total"], table.skipped, out)
    print(json.dumps(stats))
    return EXIT_OK


def cmd_make_splits(args) -> int:
    cfg = _load_config(args).get("split", {})
    composition = cfg.get("composition")
    domain = args.domain or cfg.get("domain")
    preset = args.preset or cfg.get("preset")
    if preset:
        preset_domain, composition = SPLIT_PRESETS[preset]
        domain = domain or preset_domain.value
    if args.composition:
        text = args.composition
        composition = json.loads(Path(text).read_text() if os.path.exists(text) else text)
    if not composition or not domain:
        raise UsageError("make-splits needs --preset or --composition and --domain")
    spec = SplitSpec(
        {k: int(v) for k, v in composition.items()},
        args.num_sets if args.num_sets is not None else int(cfg.get("num_sets", 10)),
        args.seed if args.seed is not None else int(cfg.get("seed", 0)),
    )
    resolved = {"domain": domain, "preset": preset, "composition": dict(spec.composition),
                "num_sets": spec.num_sets, "seed": spec.seed, "source": os.path.basename(args.path),
                "source_digest": file_digest(args.path)}
    _echo(resolved)
    table = load_flow_table(args.path, domain)
    splits = make_eval_splits(table, spec)
    out = _run_dir(args, "make-splits")
    sets = []
    for i, split in enumerate(splits):
        name = f"set_{i:02d}.csv"
        write_split_csv(split, out / name)
        sets.append({"file": name, "composition": dataset_stats(split)})
    _write_json(out / "splits.json", {"config": resolved, "sets": sets})
    logger.info("wrote %d sets of %d flows to %s", len(splits), spec.set_size, out)
    return EXIT_OK


def cmd_fit_discretizer(args) -> int:
    cfg = _load_config(args).get("discretizer", {})
    bins = args.bins or int(cfg.get("bins", disc_mod.DEFAULT_BINS))
    domain = args.domain or cfg.get("domain", Domain.CIDDS1_INTERNAL.value)
    max_rows = args.max_rows if args.max_rows is not None else cfg.get("max_rows")
    resolved = {"bins": bins, "domain": domain, "max_rows": max_rows, "source": os.path.basename(args.path),
                "source_digest": file_digest(args.path)}
    _echo(resolved)
    table = load_flow_table(args.path, domain, max_rows=max_rows)
    model = disc_mod.fit_discretizer(table, bins)
    out = Path(args.out) if args.out else _run_dir(args, "fit-discretizer") / "discretizer.json"
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "discretizer.json"
    disc_mod.save_discretizer(model, out)
    logger.info("vocab sizes %s, fingerprint %s -> %s", model.vocab_sizes, model.fingerprint, out)
    return EXIT_OK


def _train_command(args, phase: str) -> int:
    from flowlm.model import ModelConfig
    from flowlm.trainer import TrainConfig, finetune, pretrain

    file_cfg = _load_config(args)
    train_cfg = _resolve(file_cfg.get("train", {}), args, TRAIN_FLAGS)
    model_cfg = _resolve(file_cfg.get("model", {}), args, MODEL_FLAGS)
    discretizer_path = args.discretizer or train_cfg.get("discretizer_path")
    train_paths = args.train or train_cfg.get("train_paths")
    if not discretizer_path or not train_paths:
        raise UsageError(f"{phase} needs --train and --discretizer")
    discretizer = disc_mod.load_discretizer(discretizer_path)
    init = args.init or train_cfg.get("init_checkpoint")
    if init:
        stored = read_manifest(init).get("discretizer_fingerprint")
        if stored and stored != discretizer.fingerprint:
            raise FingerprintMismatch(f"{init} was trained with discretizer {stored}, {discretizer_path} is {discretizer.fingerprint}")

    out = _run_dir(args, phase)
    train_cfg.update(
        phase=phase,
        train_paths=list(train_paths),
        discretizer_path=str(discretizer_path),
        domain=args.domain or train_cfg.get("domain", Domain.CIDDS1_INTERNAL.value),
        init_checkpoint=init,
        from_scratch=bool(getattr(args, "from_scratch", False) or train_cfg.get("from_scratch", False)),
        resume=bool(args.resume or train_cfg.get("resume", False)),
        out_dir=str(out),
        deterministic=args.deterministic if args.deterministic is not None else train_cfg.get("deterministic", True),
    )
    config = TrainConfig(**train_cfg)
    model_config = None
    if not init or config.from_scratch:
        model_config = ModelConfig(vocab_sizes=discretizer.vocab_sizes, **model_cfg)
    _echo({"train": config.to_dict(), "model": model_config.to_dict() if model_config else "from checkpoint",
           "discretizer_fingerprint": discretizer.fingerprint})
    from flowlm.trainer import load_training_tokens

    tokens, _ = load_training_tokens(config)
    run = pretrain if phase == "pretrain" else finetune
    report = run(config, tokens, model_config, discretizer)
    last = report.loss_curve[-1][1] if report.loss_curve else float("nan")
    logger.info("%s done, final loss %.4f, checkpoint %s", phase, last, out / "checkpoint")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _train_command(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train_command(args, "finetune")


def _parse_set_args(specs: list[str]) -> dict[str, list[str]]:
    sets: dict[str, list[str]] = {}
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"--set expects DOMAIN=GLOB, got {spec!r}")
        domain, pattern = spec.split("=", 1)
        Domain(domain)
        files = sorted(glob.glob(pattern))
        if not files:
            raise FileNotFoundError(f"no files match {pattern!r}")
        sets.setdefault(domain, []).extend(files)
    return sets


def cmd_evaluate(args) -> int:
    from flowlm.checkpoint import load_checkpoint
    from flowlm.evaluator import aggregate_runs, evaluate_set, render_report, write_report
    from flowlm.trainer import set_deterministic

    set_deterministic(args.deterministic)
    file_cfg = _load_config(args).get("evaluate", {})
    seq_len = args.seq_len or int(file_cfg.get("seq_len", 32))
    set_specs = args.set or [f"{d}={g}" for d, g in file_cfg.get("sets", {}).items()]
    if not set_specs:
        raise UsageError("evaluate needs at least one --set DOMAIN=GLOB")
    sets = _parse_set_args(set_specs)
    discretizer = disc_mod.load_discretizer(args.discretizer)
    stored = read_manifest(args.checkpoint).get("discretizer_fingerprint")
    if stored and stored != discretizer.fingerprint:
        raise FingerprintMismatch(f"checkpoint trained with discretizer {stored}, {args.discretizer} is {discretizer.fingerprint}")
    ckpt = load_checkpoint(args.checkpoint, discretizer.vocab_sizes, discretizer.fingerprint)

    resolved = {
        "seq_len": seq_len,
        "checkpoint_digest": checkpoint_digest(args.checkpoint),
        "discretizer_fingerprint": discretizer.fingerprint,
        "sets": {d: [file_ref(f) for f in files] for d, files in sets.items()},
    }
    _echo(resolved)
    reports = {}
    for domain, files in sets.items():
        runs = []
        for f in files:
            tokens = disc_mod.transform_table(load_flow_table(f, domain), discretizer)
            runs.append(evaluate_set(ckpt, tokens, seq_len, os.path.basename(f), discretizer.fingerprint))
            logger.info("%s %s accuracy %.4f f1 %.4f", domain, os.path.basename(f), runs[-1].accuracy, runs[-1].f1)
        reports[domain] = aggregate_runs(runs)
    out = _run_dir(args, "evaluate")
    write_report(reports, out, extra={"config": resolved})
    sys.stdout.write(render_report(reports))
    return EXIT_OK


def cmd_report(args) -> int:
    from flowlm.evaluator import AggregateReport, EvalMetrics, ConfusionMatrix, Summary, render_report

    with open(args.report, encoding="utf-8") as fh:
        doc = json.load(fh)
    results = doc.get("results", doc)
    from flowlm.evaluator import domain_order

    reports = {}
    for domain in domain_order(results):
        entry = results[domain]
        if not entry.get("sets") and entry["accuracy"]["mean"] is None:
            reports[domain] = None
            continue
        runs = tuple(
            EvalMetrics(s["accuracy"], s["f1"], ConfusionMatrix(**s["confusion"]), s.get("set_id")) for s in entry["sets"]
        )
        reports[domain] = AggregateReport(Summary(**entry["accuracy"]), Summary(**entry["f1"]), runs)
    text = render_report(reports)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    from flowlm.synthetic import write_capture

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_capture(out / "train.csv", args.flows, Domain.CIDDS1_INTERNAL, args.seed)
    for i, domain in enumerate(Domain):
        write_capture(out / f"{domain.value}.csv", args.test_flows, domain, args.seed + 1 + i)
    logger.info("synthetic captures written to %s", out)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its fields")
    p.add_argument("--out", help="output path (default: a timestamped run directory)")
    if seed:
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowlm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    domains = [d.value for d in Domain]

    p = sub.add_parser("ingest", help="parse a capture and write label statistics")
    p.add_argument("path")
    p.add_argument("--domain", choices=domains, default=Domain.CIDDS1_INTERNAL.value)
    p.add_argument("--strict", action="store_true", help="abort on the first malformed row")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("make-splits", help="draw evaluation sets with exact label counts")
    p.add_argument("path")
    p.add_argument("--preset", choices=sorted(SPLIT_PRESETS))
    p.add_argument("--composition", help="JSON mapping label -> count (inline or a file path)")
    p.add_argument("--domain", choices=domains)
    p.add_argument("--num-sets", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_make_splits)

    p = sub.add_parser("fit-discretizer", help="fit quantile bins on a training capture")
    p.add_argument("path")
    p.add_argument("--domain", choices=domains)
    p.add_argument("--bins", type=int)
    p.add_argument("--max-rows", type=int, help="fit on this many leading rows only")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_fit_discretizer)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} the flow encoder")
        p.add_argument("--train", nargs="+", help="training capture CSV(s)")
        p.add_argument("--discretizer")
        p.add_argument("--domain", choices=domains)
        p.add_argument("--init", help="initial checkpoint directory")
        p.add_argument("--resume", action="store_true", help="continue the run stored in --init")
        if name == "finetune":
            p.add_argument("--from-scratch", action="store_true", help="skip pre-training (ablation)")
        for flag in TRAIN_FLAGS:
            if flag == "seed":
                continue
            kind = float if flag in ("lr", "mask_rate") else int
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind)
        for flag in MODEL_FLAGS:
            kind = {"dropout": float, "precision": str}.get(flag, int)
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind)
        p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
        p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
        _add_common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="evaluate a fine-tuned checkpoint on test sets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--discretizer", required=True)
    p.add_argument("--set", action="append", metavar="DOMAIN=GLOB", help="repeatable")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--deterministic", action="store_true")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render a report.json as a text table")
    p.add_argument("report")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write the synthetic fixture captures")
    p.add_argument("--out", required=True)
    p.add_argument("--flows", type=int, default=10000)
    p.add_argument("--test-flows", type=int, default=25000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except FingerprintMismatch as exc:
        print(f"error: fingerprint mismatch: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except MalformedRow as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FlowLMError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
