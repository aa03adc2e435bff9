"""The ASR Transformer.

Filterbank frames pass through a prenet (linear map plus layer norm) to the
model width, get sinusoidal positions added, and run through ``N`` post-norm
encoder layers.  The decoder embeds target ids (scaled by sqrt(d_model)),
adds positions, and runs ``N`` layers of causal self-attention,
cross-attention over the encoder memory and a feed-forward block, followed by
a linear projection to vocabulary logits.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DataError
from .lexicon import PAD_ID

# Tensors whose shape depends on the output vocabulary.
VOCAB_TENSORS = ("embed.weight", "out.weight", "out.bias")
# Small enough that normalised rows have unit variance to ~1e-8.
LN_EPS = 1e-9

_CKPT_MAGIC = b"MLASRCK1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_k: int = 16
    d_v: int = 16
    d_ff: int = 256
    vocab_size: int = 32
    feat_dim: int = 320
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.num_heads * self.d_k != self.d_model:
            raise ValueError("num_heads * d_k must equal d_model")
        if min(self.d_model, self.num_heads, self.d_k, self.d_v, self.d_ff, self.vocab_size, self.feat_dim) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.num_layers < 0:
            raise ValueError("num_layers must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def big(cls, vocab_size: int, feat_dim: int = 320) -> "ModelConfig":
        """D1024-H16: 6 layers, width 1024, 16 heads of 64."""
        return cls(6, 1024, 16, 64, 64, 4096, vocab_size, feat_dim, 0.1)


def positional_encoding(pos: int, i: int, d_model: int) -> float:
    angle = pos / 10000 ** (2 * (i // 2) / d_model)
    return math.sin(angle) if i % 2 == 0 else math.cos(angle)


def sinusoid_table(length: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(d_model)
    angle = pos / torch.pow(10000.0, (2 * (i // 2)).double() / d_model)
    table = torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table.to(dtype)


def attention(q, k, v, mask=None):
    """Scaled dot-product attention over the last two axes.

    ``mask`` is boolean, True where a key may be attended, broadcastable to
    ``(..., Lq, Lk)``.  Rows with no attendable key produce zero output.
    Returns ``(output, weights, fully_masked_rows)``.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is None:
        weights = torch.softmax(scores, dim=-1)
        return weights @ v, weights, 0
    mask = mask.expand(scores.shape)
    live = mask.any(dim=-1, keepdim=True)
    scores = scores.masked_fill(~(mask | ~live), float("-inf"))
    weights = torch.softmax(scores, dim=-1) * live
    return weights @ v, weights, int((~live).sum())


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int, d_k: int, d_v: int):
        super().__init__()
        self.h, self.d_k, self.d_v = num_heads, d_k, d_v
        self.w_q = nn.Linear(d_model, num_heads * d_k)
        self.w_k = nn.Linear(d_model, num_heads * d_k)
        self.w_v = nn.Linear(d_model, num_heads * d_v)
        self.w_o = nn.Linear(num_heads * d_v, d_model)
        self.fully_masked_rows = 0
        self.last_weights: torch.Tensor | None = None

    def _split(self, x, d):
        b, n, _ = x.shape
        return x.view(b, n, self.h, d).transpose(1, 2)

    def forward(self, q_in, k_in, v_in, mask=None):
        q = self._split(self.w_q(q_in), self.d_k)
        k = self._split(self.w_k(k_in), self.d_k)
        v = self._split(self.w_v(v_in), self.d_v)
        if mask is not None:
            mask = mask.unsqueeze(1)
        out, weights, dead = attention(q, k, v, mask)
        self.fully_masked_rows += dead
        self.last_weights = weights.detach()
        b, _, n, _ = out.shape
        return self.w_o(out.transpose(1, 2).reshape(b, n, self.h * self.d_v))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.w_1 = nn.Linear(d_model, d_ff)
        self.w_2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.w_2(torch.relu(self.w_1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, cfg.d_k, cfg.d_v)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff)
        self.norm1 = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.norm2 = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        x = self.norm1(x + self.drop(self.self_attn(x, x, x, mask)))
        return self.norm2(x + self.drop(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, cfg.d_k, cfg.d_v)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, cfg.d_k, cfg.d_v)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff)
        self.norm1 = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.norm2 = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.norm3 = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_mask, cross_mask):
        y = self.norm1(y + self.drop(self.self_attn(y, y, y, self_mask)))
        y = self.norm2(y + self.drop(self.cross_attn(y, memory, memory, cross_mask)))
        return self.norm3(y + self.drop(self.ffn(y)))


class Prenet(nn.Module):
    def __init__(self, feat_dim: int, d_model: int):
        super().__init__()
        self.linear = nn.Linear(feat_dim, d_model)
        self.norm = nn.LayerNorm(d_model, eps=LN_EPS)

    def forward(self, x):
        return self.norm(self.linear(x))


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def causal_mask(n: int, device=None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


class ASRTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.prenet = Prenet(cfg.feat_dim, cfg.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.num_layers))
        self.out = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.drop = nn.Dropout(cfg.dropout)
        self.reset_parameters()

    def reset_parameters(self, names=None) -> None:
        """uniform(+-1/sqrt(fan_in)) for linear maps and embeddings; unit layer norms."""
        for name, module in self.named_modules():
            if isinstance(module, nn.Linear):
                bound = 1 / math.sqrt(module.in_features)
                targets = ((module.weight, f"{name}.weight"), (module.bias, f"{name}.bias"))
            elif isinstance(module, nn.Embedding):
                bound = 1 / math.sqrt(module.embedding_dim)
                targets = ((module.weight, f"{name}.weight"),)
            elif isinstance(module, nn.LayerNorm):
                if names is None or f"{name}.weight" in names:
                    nn.init.ones_(module.weight)
                    nn.init.zeros_(module.bias)
                continue
            else:
                continue
            for tensor, full in targets:
                if names is None or full in names:
                    nn.init.uniform_(tensor, -bound, bound)

    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def encode(self, feats: torch.Tensor, feat_lens: torch.Tensor | None = None):
        """``feats`` (B, T, feat_dim) -> memory (B, T, d_model) and its key mask (B, T)."""
        if feats.shape[-1] != self.cfg.feat_dim:
            raise DataError(f"feature dim {feats.shape[-1]} != model feat_dim {self.cfg.feat_dim}")
        b, t, _ = feats.shape
        if feat_lens is None:
            feat_lens = torch.full((b,), t, dtype=torch.long)
        keys = length_mask(feat_lens, t)
        x = self.prenet(feats) + sinusoid_table(t, self.cfg.d_model, feats.dtype)
        x = self.drop(x)
        mask = keys[:, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        return x, keys

    def decode(self, memory: torch.Tensor, memory_keys: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Logits (B, L, V) for every prefix position; PAD (id 0) may only be a suffix."""
        pads = prefix == PAD_ID
        if torch.any(pads[:, :-1] & ~pads[:, 1:]):
            raise DataError("PAD inside a target prefix")
        b, n = prefix.shape
        self_mask = causal_mask(n, prefix.device)[None] & ~pads[:, None, :]
        cross_mask = memory_keys[:, None, :]
        y = self.embed(prefix) * math.sqrt(self.cfg.d_model)
        y = self.drop(y + sinusoid_table(n, self.cfg.d_model, memory.dtype))
        for layer in self.decoder:
            y = layer(y, memory, self_mask, cross_mask)
        return self.out(y)

    def forward(self, feats, feat_lens, prefix):
        memory, keys = self.encode(feats, feat_lens)
        return self.decode(memory, keys, prefix)

    def fully_masked_rows(self) -> int:
        return sum(m.fully_masked_rows for m in self.modules() if isinstance(m, MultiHeadAttention))


# Checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, torch.Tensor]
    vocab_hash: str = ""
    step: int = 0
    meta: dict = field(default_factory=dict)

    def build(self) -> ASRTransformer:
        model = ASRTransformer(self.config)
        model.load_state_dict({k: v.to(torch.float32) for k, v in self.params.items()})
        return model

    @classmethod
    def from_model(cls, model: ASRTransformer, vocab_hash: str = "", step: int = 0, meta=None) -> "Checkpoint":
        params = {k: v.detach().to(torch.float32).clone() for k, v in model.state_dict().items()}
        return cls(model.cfg, params, vocab_hash, step, dict(meta or {}))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write magic, header length, JSON header, then raw float32 LE tensors in header order.

    The header carries the model config, vocab hash, step, free-form metadata
    and one ``{name, shape, dtype}`` entry per tensor.
    """
    names = sorted(ckpt.params)
    arrays = [np.ascontiguousarray(ckpt.params[n].detach().cpu().numpy(), dtype="<f4") for n in names]
    header = {
        "version": CKPT_VERSION,
        "config": asdict(ckpt.config),
        "vocab_hash": ckpt.vocab_hash,
        "step": ckpt.step,
        "meta": ckpt.meta,
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": "float32"} for n, a in zip(names, arrays)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for a in arrays:
            fh.write(a.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise DataError(f"{path}: not a checkpoint")
    (n,) = struct.unpack_from("<I", raw, len(_CKPT_MAGIC))
    start = len(_CKPT_MAGIC) + 4
    header = json.loads(raw[start:start + n].decode("utf-8"))
    if header.get("version") != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = start + n
    params = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = torch.from_numpy(arr.copy())
        offset = end
    return Checkpoint(ModelConfig(**header["config"]), params, header["vocab_hash"], header["step"], header["meta"])


def params_digest(params: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()
