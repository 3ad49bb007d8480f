"""Flow encoder: per-feature embeddings, pre-norm transformer, MLM and per-flow heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from flowlm.errors import IdOutOfRange, NoMaskedPositions, ShapeMismatch

NUM_FEATURES = 6
NUM_CLASSES = 2
INIT_STD = 0.02

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_sizes: tuple[int, ...]
    embed_dim: int = 128
    num_layers: int = 2
    num_heads: int = 12
    ff_dim: int = 1536
    max_len: int = 64
    dropout: float = 0.1
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        if len(self.vocab_sizes) != NUM_FEATURES:
            raise ValueError(f"expected {NUM_FEATURES} vocab sizes, got {len(self.vocab_sizes)}")
        if self.token_dim % self.num_heads:
            raise ValueError(f"token dim {self.token_dim} not divisible by {self.num_heads} heads")
        if self.precision not in _DTYPES:
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def token_dim(self) -> int:
        return NUM_FEATURES * self.embed_dim

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "vocab_sizes": tuple(d["vocab_sizes"])})


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask, return_probs: bool = False):
        B, L, D = x.shape

        def split(t):
            return t.view(B, L, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)  # [B, A, L, L]
        # pad keys get -inf so they receive exactly zero weight
        key_bias = torch.zeros(B, 1, 1, L, dtype=x.dtype, device=x.device)
        key_bias = key_bias.masked_fill(~pad_mask[:, None, None, :], float("-inf"))
        probs = torch.softmax(scores + key_bias, dim=-1)
        out = (self.drop(probs) @ v).transpose(1, 2).reshape(B, L, D)
        out = self.o(out)
        return (out, probs) if return_probs else out


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask, return_probs: bool = False):
        attn = self.attn(self.norm1(x), pad_mask, return_probs)
        if return_probs:
            attn, probs = attn
        x = x + self.drop(attn)
        x = x + self.drop(self.ff2(F.gelu(self.ff1(self.norm2(x)))))
        return (x, probs) if return_probs else x


class FlowEncoder(nn.Module):
    """Six 128-d feature embeddings concatenated into one 768-d flow token.

    ``forward`` returns the encoder states; the two heads are applied
    separately through :meth:`mlm_logits` and :meth:`cls_logits`.
    """

    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        # torch's default layer init draws from the global RNG; keep it untouched
        with torch.random.fork_rng(devices=[]):
            self._build(config)
        self.to(config.dtype)
        init_parameters(self, generator)

    def _build(self, config: ModelConfig) -> None:
        H, E = config.token_dim, config.embed_dim
        self.embeddings = nn.ModuleList(nn.Embedding(v, E) for v in config.vocab_sizes)
        self.position = nn.Parameter(torch.zeros(config.max_len, H))
        self.embed_drop = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(H, config.num_heads, config.ff_dim, config.dropout) for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(H)
        self.mlm_dense = nn.Linear(H, H)
        self.mlm_norm = nn.LayerNorm(H)
        self.mlm_out = nn.ModuleList(nn.Linear(H, v) for v in config.vocab_sizes)
        self.cls = nn.Linear(H, NUM_CLASSES)

    def embed(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        if ids.ndim != 3 or ids.shape[-1] != NUM_FEATURES:
            raise ShapeMismatch(f"ids must be [B, L, {NUM_FEATURES}], got {tuple(ids.shape)}")
        L = ids.shape[1]
        if L > self.config.max_len:
            raise ShapeMismatch(f"sequence length {L} exceeds max_len {self.config.max_len}")
        for f, v in enumerate(self.config.vocab_sizes):
            col = ids[..., f]
            if col.numel() and (col.min() < 0 or col.max() >= v):
                raise IdOutOfRange(f"feature {f}: ids must lie in [0, {v})")
        parts = [emb(ids[..., f]) for f, emb in enumerate(self.embeddings)]
        x = torch.cat(parts, dim=-1) + self.position[:L]
        return self.embed_drop(x)

    def encode(self, x: torch.Tensor, pad_mask: torch.Tensor, return_attention: bool = False):
        if x.ndim != 3 or x.shape[-1] != self.config.token_dim:
            raise ShapeMismatch(f"expected [B, L, {self.config.token_dim}], got {tuple(x.shape)}")
        if pad_mask.shape != x.shape[:2]:
            raise ShapeMismatch(f"pad_mask {tuple(pad_mask.shape)} does not match {tuple(x.shape[:2])}")
        pad_mask = pad_mask.bool()
        attention = []
        for layer in self.layers:
            if return_attention:
                x, probs = layer(x, pad_mask, True)
                attention.append(probs)
            else:
                x = layer(x, pad_mask)
        h = self.final_norm(x)
        return (h, attention) if return_attention else h

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        return self.encode(self.embed(ids, pad_mask), pad_mask)

    def mlm_logits(self, h: torch.Tensor) -> list[torch.Tensor]:
        self._check_states(h)
        t = self.mlm_norm(F.gelu(self.mlm_dense(h)))
        return [head(t) for head in self.mlm_out]

    def cls_logits(self, h: torch.Tensor) -> torch.Tensor:
        self._check_states(h)
        return self.cls(h)

    def _check_states(self, h):
        if h.shape[-1] != self.config.token_dim:
            raise ShapeMismatch(f"expected last dim {self.config.token_dim}, got {h.shape[-1]}")


def init_parameters(model: nn.Module, generator: torch.Generator | None = None) -> None:
    """Truncated normal (std 0.02) weights, zero biases, unit layer-norm gains."""
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, nn.Linear):
                _trunc_normal(module.weight, generator)
                module.bias.zero_()
            elif isinstance(module, nn.Embedding):
                _trunc_normal(module.weight, generator)
        if isinstance(model, FlowEncoder):
            _trunc_normal(model.position, generator)


def _trunc_normal(t: torch.Tensor, generator) -> None:
    nn.init.trunc_normal_(t, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator)


def mlm_loss(logits: list[torch.Tensor], targets: torch.Tensor, mlm_mask: torch.Tensor) -> torch.Tensor:
    """Mean over selected flows of the summed per-feature cross-entropy."""
    sel = mlm_mask.bool()
    n = int(sel.sum())
    if n == 0:
        raise NoMaskedPositions("no position selected for the MLM loss")
    total = logits[0].new_zeros(())
    for f, lg in enumerate(logits):
        total = total + F.cross_entropy(lg[sel], targets[..., f][sel], reduction="sum")
    return total / n


def cls_loss(logits: torch.Tensor, labels: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over real positions; pad labels are ignored."""
    real = pad_mask.bool()
    if not bool(real.any()):
        raise ShapeMismatch("batch has no real positions")
    return F.cross_entropy(logits[real], labels[real], reduction="mean")
