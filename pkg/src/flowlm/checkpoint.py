"""Checkpoint directories: ``manifest.json`` plus one little-endian ``weights.bin``.

The manifest lists every tensor (name, shape, dtype, byte offset) in file
order. Adam moments and the torch RNG state are stored as ordinary tensors so
a run can be resumed exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from flowlm.errors import ConfigMismatch, FingerprintMismatch, FormatVersionMismatch
from flowlm.model import FlowEncoder, ModelConfig
from flowlm.optim import AdamState

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"

_NP_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "uint8": np.dtype("u1"),
    "int64": np.dtype("<i8"),
}
_TORCH_NAMES = {torch.float32: "float32", torch.float64: "float64", torch.uint8: "uint8", torch.int64: "int64"}

PRETRAINED = "pretrained"
FINETUNED = "finetuned"


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    model: FlowEncoder
    discretizer_fingerprint: str = ""
    metadata: dict = field(default_factory=dict)
    optimizer: AdamState | None = None
    rng_state: dict = field(default_factory=dict)

    @property
    def phase(self) -> str | None:
        return self.metadata.get("phase")

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))


def _tensor_items(ckpt: ModelCheckpoint):
    for name, t in ckpt.model.state_dict().items():
        yield name, t
    if ckpt.optimizer is not None:
        for name in ckpt.optimizer.exp_avg:
            yield f"optim.exp_avg.{name}", ckpt.optimizer.exp_avg[name]
            yield f"optim.exp_avg_sq.{name}", ckpt.optimizer.exp_avg_sq[name]
    torch_rng = ckpt.rng_state.get("torch")
    if torch_rng is not None:
        yield "rng.torch", torch_rng


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    with open(out / WEIGHTS, "wb") as fh:
        for name, t in _tensor_items(ckpt):
            dtype = _TORCH_NAMES[t.dtype]
            blob = t.detach().cpu().contiguous().numpy().astype(_NP_DTYPES[dtype], copy=False).tobytes()
            fh.write(blob)
            table.append({"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
    manifest = {
        "version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "discretizer_fingerprint": ckpt.discretizer_fingerprint,
        "metadata": ckpt.metadata,
        "optimizer_step": None if ckpt.optimizer is None else ckpt.optimizer.step,
        "rng": {k: v for k, v in ckpt.rng_state.items() if k != "torch"},
        "tensors": table,
        "total_bytes": offset,
    }
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out


def read_manifest(path: str | os.PathLike) -> dict:
    try:
        with open(Path(path) / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatVersionMismatch(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: manifest version {manifest.get('version')!r}")
    return manifest


def load_checkpoint(
    path: str | os.PathLike,
    vocab_sizes=None,
    discretizer_fingerprint: str | None = None,
) -> ModelCheckpoint:
    """Load a checkpoint, optionally validating it against a discretizer.

    Raises ConfigMismatch when ``vocab_sizes`` disagree with the stored config
    and FingerprintMismatch when the discretizer fingerprint differs.
    """
    manifest = read_manifest(path)
    config = ModelConfig.from_dict(manifest["config"])
    if vocab_sizes is not None and tuple(vocab_sizes) != config.vocab_sizes:
        raise ConfigMismatch(f"checkpoint vocab sizes {config.vocab_sizes} != discretizer {tuple(vocab_sizes)}")
    stored_fp = manifest.get("discretizer_fingerprint", "")
    if discretizer_fingerprint is not None and stored_fp and stored_fp != discretizer_fingerprint:
        raise FingerprintMismatch(f"checkpoint built for discretizer {stored_fp}, got {discretizer_fingerprint}")

    raw = (Path(path) / WEIGHTS).read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise FormatVersionMismatch(f"{path}: weights.bin has {len(raw)} bytes, manifest says {manifest['total_bytes']}")
    tensors = {}
    for entry in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[entry["dtype"]], count=int(np.prod(entry["shape"], dtype=np.int64)), offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())

    # throwaway generator: building the module must not consume the global RNG
    model = FlowEncoder(config, torch.Generator().manual_seed(0))
    state = {k: v for k, v in tensors.items() if not k.startswith(("optim.", "rng."))}
    model.load_state_dict(state, strict=True)

    optimizer = None
    if manifest.get("optimizer_step") is not None:
        optimizer = AdamState(step=int(manifest["optimizer_step"]))
        for name, t in tensors.items():
            if name.startswith("optim.exp_avg_sq."):
                optimizer.exp_avg_sq[name[len("optim.exp_avg_sq."):]] = t
            elif name.startswith("optim.exp_avg."):
                optimizer.exp_avg[name[len("optim.exp_avg."):]] = t
    rng_state = dict(manifest.get("rng", {}))
    if "rng.torch" in tensors:
        rng_state["torch"] = tensors["rng.torch"]
    return ModelCheckpoint(config, model, stored_fp, manifest.get("metadata", {}), optimizer, rng_state)
