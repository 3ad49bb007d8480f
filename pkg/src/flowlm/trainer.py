"""Pre-training (masked flows) and fine-tuning (per-flow labels) loops."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from flowlm.checkpoint import FINETUNED, PRETRAINED, ModelCheckpoint, load_checkpoint, save_checkpoint
from flowlm.discretizer import DiscretizerModel, TokenizedTable, load_discretizer, transform_table
from flowlm.errors import ConfigMismatch, MissingLabels
from flowlm.ingest import load_flow_table
from flowlm.model import FlowEncoder, ModelConfig, cls_loss, mlm_loss
from flowlm.optim import AdamState, adam_step, backward
from flowlm.provenance import checkpoint_digest, file_ref
from flowlm.sequencer import apply_mlm_mask, collate_batch, sample_training_segment

logger = logging.getLogger(__name__)

# Child streams derived from the root seed, in spawn order.
STREAMS = ("init", "sampler", "masking", "dropout")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    steps: int = 20000
    batch_size: int = 64
    seq_len: int = 32
    lr: float = 1e-4
    warmup_steps: int = 1000
    mask_rate: float = 0.15
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    progress_every: int = 100
    train_paths: list[str] = field(default_factory=list)
    domain: str = "cidds1_internal"
    max_rows: int | None = None  # ordered prefix of the concatenated training files
    discretizer_path: str | None = None
    init_checkpoint: str | None = None
    from_scratch: bool = False
    resume: bool = False
    out_dir: str | None = None
    deterministic: bool = True

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def portable(self) -> dict:
        """Config with input paths replaced by basenames and content digests.

        This is what artifacts record, so identical inputs give identical
        artifacts wherever the run directory lives.
        """
        d = self.to_dict()
        del d["out_dir"]
        d["train_paths"] = [file_ref(p) for p in self.train_paths]
        d["discretizer_path"] = file_ref(self.discretizer_path) if self.discretizer_path else None
        if self.init_checkpoint:
            d["init_checkpoint"] = {"file": os.path.basename(os.path.normpath(self.init_checkpoint)),
                                    "digest": checkpoint_digest(self.init_checkpoint)}
        return d


@dataclass
class TrainReport:
    phase: str
    seed: int
    loss_curve: list[tuple[int, float]]
    wall_clock_s: float
    config: dict
    model_config: dict
    init: str
    checkpoint_path: str | None = None
    discretizer_fingerprint: str = ""
    warnings: list[str] = field(default_factory=list)
    checkpoint: ModelCheckpoint | None = field(default=None, repr=False)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "phase": self.phase,
            "seed": self.seed,
            "init": self.init,
            "checkpoint_path": self.checkpoint_path,
            "discretizer_fingerprint": self.discretizer_fingerprint,
            "config": self.config,
            "model_config": self.model_config,
            "warnings": self.warnings,
            "loss_curve": [[s, l] for s, l in self.loss_curve],
        }
        if include_timing:
            d["wall_clock_s"] = self.wall_clock_s
        return d

    def write(self, out_dir: str | os.PathLike, include_timing: bool = True) -> None:
        out = Path(out_dir)
        with open(out / "train_report.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(include_timing), fh, indent=1)
            fh.write("\n")
        with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            w.writerows((s, repr(l)) for s, l in self.loss_curve)


@dataclass
class SeedStreams:
    seed: int
    init: torch.Generator
    sampler: np.random.Generator
    masking: np.random.Generator
    dropout_seed: int


def seed_all(seed: int) -> SeedStreams:
    """Derive independent generators from one root seed.

    ``SeedSequence(seed).spawn(4)`` yields, in order, the parameter-init,
    segment-sampler, masking and dropout streams. Dropout uses the global torch
    generator, which is seeded here.
    """
    children = dict(zip(STREAMS, np.random.SeedSequence(seed).spawn(len(STREAMS))))

    def as_int(ss):
        return int(ss.generate_state(1, np.uint64)[0]) & (2**63 - 1)

    init = torch.Generator().manual_seed(as_int(children["init"]))
    dropout_seed = as_int(children["dropout"])
    torch.manual_seed(dropout_seed)
    return SeedStreams(
        seed,
        init,
        np.random.default_rng(children["sampler"]),
        np.random.default_rng(children["masking"]),
        dropout_seed,
    )


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def learning_rate(step: int, base: float, warmup: int, total: int) -> float:
    """Linear warmup over ``warmup`` steps, then linear decay towards zero at ``total``."""
    warmup = min(warmup, total)
    if step < warmup:
        return base * (step + 1) / warmup
    if total == warmup:
        return base
    return base * max(0.0, (total - step) / (total - warmup))


def load_training_tokens(config: TrainConfig) -> tuple[TokenizedTable, DiscretizerModel]:
    if not config.discretizer_path or not config.train_paths:
        raise ValueError("training needs train_paths and discretizer_path")
    disc = load_discretizer(config.discretizer_path)
    parts = []
    remaining = config.max_rows
    for path in config.train_paths:
        if remaining is not None and remaining <= 0:
            break
        table = load_flow_table(path, config.domain, max_rows=remaining)
        if remaining is not None:
            remaining -= len(table) + table.skipped
        parts.append(transform_table(table, disc))
    tokens = TokenizedTable(
        np.concatenate([t.ids for t in parts]),
        np.concatenate([t.labels for t in parts]),
        np.concatenate([t.order_index for t in parts]),
    )
    return tokens, disc


def pretrain(
    config: TrainConfig,
    tokens: TokenizedTable | None = None,
    model_config: ModelConfig | None = None,
    discretizer: DiscretizerModel | None = None,
) -> TrainReport:
    if config.phase != "pretrain":
        config = TrainConfig(**{**config.to_dict(), "phase": "pretrain"})
    return _train(config, tokens, model_config, discretizer)


def finetune(
    config: TrainConfig,
    tokens: TokenizedTable | None = None,
    model_config: ModelConfig | None = None,
    discretizer: DiscretizerModel | None = None,
) -> TrainReport:
    if config.phase != "finetune":
        config = TrainConfig(**{**config.to_dict(), "phase": "finetune"})
    return _train(config, tokens, model_config, discretizer)


def _initial_state(config, model_config, vocab_sizes, fingerprint, streams):
    """Model, optimizer state, first step and provenance string for a run."""
    ckpt = None
    if config.init_checkpoint and not config.from_scratch:
        ckpt = load_checkpoint(config.init_checkpoint, vocab_sizes, fingerprint or None)

    if config.phase == "pretrain":
        if ckpt is not None and config.resume:
            return ckpt, ckpt.optimizer or AdamState(), ckpt.step, ckpt.metadata.get("init", "unknown")
        if ckpt is not None:
            return ckpt, AdamState(), 0, f"checkpoint:{checkpoint_digest(config.init_checkpoint)}"
    else:
        if config.from_scratch:
            ckpt = None
        elif ckpt is None:
            raise ConfigMismatch("finetune needs a pretrained init_checkpoint (or from_scratch=True)")
        elif ckpt.phase == FINETUNED and config.resume:
            return ckpt, ckpt.optimizer or AdamState(), ckpt.step, ckpt.metadata.get("init", "unknown")
        elif ckpt.phase != PRETRAINED:
            raise ConfigMismatch(f"finetune init checkpoint has phase {ckpt.phase!r}, expected 'pretrained'")
        else:
            return ckpt, AdamState(), 0, f"pretrained:{checkpoint_digest(config.init_checkpoint)}"

    if model_config is None:
        model_config = ModelConfig(vocab_sizes=vocab_sizes, max_len=max(64, config.seq_len))
    elif tuple(model_config.vocab_sizes) != tuple(vocab_sizes):
        raise ConfigMismatch(f"model vocab sizes {model_config.vocab_sizes} != data vocab sizes {tuple(vocab_sizes)}")
    model = FlowEncoder(model_config, streams.init)
    fresh = ModelCheckpoint(model_config, model, fingerprint)
    return fresh, AdamState(), 0, "random"


def _train(config, tokens, model_config, discretizer) -> TrainReport:
    set_deterministic(config.deterministic)
    if tokens is None:
        tokens, discretizer = load_training_tokens(config)
    fingerprint = discretizer.fingerprint if discretizer is not None else ""

    streams = seed_all(config.seed)
    if discretizer is not None:
        vocab_sizes = discretizer.vocab_sizes
    elif model_config is not None:
        vocab_sizes = model_config.vocab_sizes
    elif config.init_checkpoint:
        vocab_sizes = load_checkpoint(config.init_checkpoint).config.vocab_sizes
    else:
        raise ConfigMismatch("vocabulary sizes unknown; pass a discretizer or a model config")

    ckpt, opt_state, start, provenance = _initial_state(config, model_config, vocab_sizes, fingerprint, streams)
    if start > 0:
        _restore_rng(ckpt.rng_state, streams)
    model, mcfg = ckpt.model, ckpt.config
    if config.seq_len > mcfg.max_len:
        raise ConfigMismatch(f"seq_len {config.seq_len} exceeds model max_len {mcfg.max_len}")

    notes = []
    pretraining = config.phase == "pretrain"
    if not pretraining:
        if tokens.labels is None:
            raise MissingLabels("fine-tuning needs per-flow labels")
        if len(np.unique(tokens.labels)) < 2:
            msg = "training labels contain a single class; the classifier will predict only that class"
            warnings.warn(msg)
            notes.append(msg)

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    phase_tag = PRETRAINED if pretraining else FINETUNED
    echo = config.portable()

    curve = []
    t0 = time.perf_counter()
    model.train()
    for step in range(start, config.steps):
        seqs = [sample_training_segment(tokens, config.seq_len, streams.sampler) for _ in range(config.batch_size)]
        if pretraining:
            # a batch with nothing selected has no loss; redraw the corruption
            while True:
                batch = collate_batch([apply_mlm_mask(s, config.mask_rate, streams.masking, vocab_sizes) for s in seqs])
                if batch.mlm_mask.any():
                    break
        else:
            batch = collate_batch(seqs)
        ids = torch.from_numpy(batch.ids)
        pad = torch.from_numpy(batch.pad_mask)
        h = model(ids, pad)
        if pretraining:
            loss = mlm_loss(model.mlm_logits(h), torch.from_numpy(batch.targets), torch.from_numpy(batch.mlm_mask))
        else:
            loss = cls_loss(model.cls_logits(h), torch.from_numpy(batch.labels), pad)
        backward(loss, model)
        adam_step(model, opt_state, learning_rate(step, config.lr, config.warmup_steps, config.steps))

        value = float(loss.detach())
        if step % config.log_every == 0:
            curve.append((step, value))
        if config.progress_every and (step + 1) % config.progress_every == 0:
            logger.info("%s step %d/%d loss %.4f", config.phase, step + 1, config.steps, value)
        if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 and step + 1 < config.steps:
            snap = _snapshot(ckpt, opt_state, streams, step + 1, phase_tag, config, provenance, echo)
            save_checkpoint(snap, out_dir / f"checkpoint-step{step + 1:06d}")
    wall = time.perf_counter() - t0
    model.eval()

    final = _snapshot(ckpt, opt_state, streams, config.steps, phase_tag, config, provenance, echo)
    ckpt_path = None
    if out_dir:
        save_checkpoint(final, out_dir / "checkpoint")
        ckpt_path = "checkpoint"
    report = TrainReport(
        phase=phase_tag,
        seed=config.seed,
        loss_curve=curve,
        wall_clock_s=wall,
        config=echo,
        model_config=mcfg.to_dict(),
        init=provenance,
        checkpoint_path=ckpt_path,
        discretizer_fingerprint=fingerprint,
        warnings=notes,
        checkpoint=final,
    )
    if out_dir:
        report.write(out_dir, include_timing=not config.deterministic)
    logger.info("%s finished: %d steps in %.1fs", config.phase, config.steps - start, wall)
    return report


def _snapshot(ckpt, opt_state, streams, step, phase, config, provenance, echo) -> ModelCheckpoint:
    return ModelCheckpoint(
        ckpt.config,
        ckpt.model,
        ckpt.discretizer_fingerprint,
        {"phase": phase, "step": step, "seed": config.seed, "init": provenance, "train_config": echo},
        opt_state,
        {
            "sampler": streams.sampler.bit_generator.state,
            "masking": streams.masking.bit_generator.state,
            "torch": torch.get_rng_state(),
        },
    )


def _restore_rng(state: dict, streams: SeedStreams) -> None:
    if "sampler" in state:
        streams.sampler.bit_generator.state = state["sampler"]
    if "masking" in state:
        streams.masking.bit_generator.state = state["masking"]
    if "torch" in state:
        torch.set_rng_state(state["torch"])

