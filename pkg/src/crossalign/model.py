"""Cross-Align encoder: shared self-attention layers, then direction-shared cross-attention layers."""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save
from torch import nn

from .corpus import IGNORE_INDEX, MaskedPair, SentencePair, Vocab

CHECKPOINT_FORMAT = "crossalign-checkpoint"
CHECKPOINT_VERSION = "1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    m: int = 10
    n: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int | None = None
    max_positions: int = 64
    align_layer: int = 11
    tau_stage1: float = 0.001
    tau_stage2: float = 0.15
    dropout: float = 0.1
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.m < 0 or self.n < 0 or self.m + self.n < 1:
            raise ValueError(f"need m >= 0, n >= 0 and m + n >= 1 (got m={self.m}, n={self.n})")
        if not 1 <= self.align_layer <= self.m + self.n:
            raise ValueError(f"align_layer must lie in [1, {self.m + self.n}], got {self.align_layer}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 1 or self.max_positions < 2:
            raise ValueError("vocab_size and max_positions must be positive")
        for tau in (self.tau_stage1, self.tau_stage2):
            if not 0.0 <= tau < 1.0:
                raise ValueError(f"thresholds must lie in [0, 1), got {tau}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_layers(self) -> int:
        return self.m + self.n

    def replace(self, **changes) -> "ModelConfig":
        data = asdict(self)
        data.update(changes)
        if "d_model" in changes and "d_ff" not in changes:
            data["d_ff"] = None
        return ModelConfig(**data)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)


class AttentionBlock(nn.Module):
    """One attention sublayer plus FFN, post-norm: ``LN(attn + h)`` then ``LN(FFN + h)``.

    Queries come from ``h_q``; keys and values from ``h_kv``. Passing the
    same tensor twice gives a self-attention module; a cross-attention
    module calls the same block once per direction so both read one set of
    weights.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_k = cfg.d_k
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.ln_attn = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.ff_in = nn.Linear(d, cfg.d_ff)
        self.ff_out = nn.Linear(cfg.d_ff, d)
        self.ln_ff = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.drop = nn.Dropout(cfg.dropout)

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.n_heads, self.d_k).transpose(1, 2)

    def forward(self, h_q: torch.Tensor, h_kv: torch.Tensor, kv_pad: torch.Tensor | None = None) -> torch.Tensor:
        if h_q.dim() != 3 or h_kv.dim() != 3 or h_q.shape[0] != h_kv.shape[0] or h_q.shape[2] != h_kv.shape[2]:
            raise ValueError(f"incompatible activation shapes {tuple(h_q.shape)} and {tuple(h_kv.shape)}")
        q = self._heads(self.query(h_q))
        k = self._heads(self.key(h_kv))
        v = self._heads(self.value(h_kv))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_k)
        if kv_pad is not None:
            if kv_pad.shape != h_kv.shape[:2]:
                raise ValueError(f"pad mask shape {tuple(kv_pad.shape)} does not match keys {tuple(h_kv.shape[:2])}")
            scores = scores.masked_fill(kv_pad[:, None, None, :], float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        b, n = h_q.shape[:2]
        ctx = ctx.transpose(1, 2).reshape(b, n, -1)
        h = self.ln_attn(self.drop(self.out(ctx)) + h_q)
        return self.ln_ff(self.drop(self.ff_out(F.gelu(self.ff_in(h)))) + h)


def _batched(t: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if t.dim() == 2:
        return t.unsqueeze(0), True
    return t, False


def self_attention_layer(h: torch.Tensor, params: AttentionBlock, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Apply one self-attention module to ``(len, d)`` or ``(batch, len, d)`` activations."""
    hb, squeeze = _batched(h)
    if pad_mask is not None and squeeze:
        pad_mask = pad_mask.unsqueeze(0)
    out = params(hb, hb, pad_mask)
    return out[0] if squeeze else out


def cross_attention_layer(h_x, h_y, params: AttentionBlock, masks=(None, None)):
    """Both directions read the layer inputs, so neither depends on the other's output."""
    mx, my = masks
    hx, squeeze = _batched(h_x)
    hy, _ = _batched(h_y)
    if squeeze:
        mx = None if mx is None else mx.unsqueeze(0)
        my = None if my is None else my.unsqueeze(0)
    out_x = params(hx, hy, my)
    out_y = params(hy, hx, mx)
    if squeeze:
        return out_x[0], out_y[0]
    return out_x, out_y


@dataclass
class HiddenStates:
    """Activations ``H^0..H^L`` of both streams, ``(batch, len, d)`` each."""

    x: list[torch.Tensor]
    y: list[torch.Tensor]
    m: int

    def tap(self, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
        if not 0 <= layer < len(self.x):
            raise IndexError(f"layer {layer} not computed (have 0..{len(self.x) - 1})")
        return self.x[layer], self.y[layer]

    @property
    def monolingual(self):
        return self.tap(self.m)

    @property
    def cross_lingual(self):
        return self.tap(len(self.x) - 1)


def pad_batch(seqs: Sequence[Sequence[int]], pad_value: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad id sequences; returns ``(ids, pad_mask)`` with ``True`` at padding."""
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_value, dtype=torch.long)
    for k, s in enumerate(seqs):
        ids[k, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    lengths = torch.tensor([len(s) for s in seqs])
    return ids, torch.arange(width)[None, :] >= lengths[:, None]


class CrossAlignModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.self_layers = nn.ModuleList(AttentionBlock(cfg) for _ in range(cfg.m))
        self.cross_layers = nn.ModuleList(AttentionBlock(cfg) for _ in range(cfg.n))
        self.head_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.drop = nn.Dropout(cfg.dropout)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = None) -> None:
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
        std = self.config.init_std
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias") or name == "head_bias":
                    p.zero_()
                elif ".ln_" in name:
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)

    def layer(self, index: int) -> AttentionBlock:
        """Layer ``index`` in 1..m+n (self layers first)."""
        cfg = self.config
        if not 1 <= index <= cfg.n_layers:
            raise IndexError(f"layer index must lie in [1, {cfg.n_layers}], got {index}")
        if index <= cfg.m:
            return self.self_layers[index - 1]
        return self.cross_layers[index - cfg.m - 1]

    def layer_parameter_names(self, index: int) -> list[str]:
        cfg = self.config
        prefix = f"self_layers.{index - 1}." if index <= cfg.m else f"cross_layers.{index - cfg.m - 1}."
        self.layer(index)
        return [name for name, _ in self.named_parameters() if name.startswith(prefix)]

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.config.max_positions:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_positions {self.config.max_positions}")
        pos = torch.arange(ids.shape[1], device=ids.device)
        return self.drop(self.tok_emb(ids) + self.pos_emb(pos)[None])

    def forward(self, x_ids, x_pad, y_ids, y_pad, upto: int | None = None) -> HiddenStates:
        """Run both streams; ``upto`` stops after that layer (all layers by default)."""
        cfg = self.config
        upto = cfg.n_layers if upto is None else upto
        if not 0 <= upto <= cfg.n_layers:
            raise IndexError(f"tap layer must lie in [0, {cfg.n_layers}], got {upto}")
        hx, hy = [self.embed(x_ids)], [self.embed(y_ids)]
        for l in range(1, upto + 1):
            block = self.layer(l)
            if l <= cfg.m:
                hx.append(block(hx[-1], hx[-1], x_pad))
                hy.append(block(hy[-1], hy[-1], y_pad))
            else:
                nx, ny = block(hx[-1], hy[-1], y_pad), block(hy[-1], hx[-1], x_pad)
                hx.append(nx)
                hy.append(ny)
        return HiddenStates(hx, hy, cfg.m)

    def vocab_logits(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.tok_emb.weight.T + self.head_bias

    def tlm_forward(self, x_ids, x_pad, y_ids, y_pad, x_labels, y_labels):
        """Logits and targets at labeled positions, source rows first."""
        states = self.forward(x_ids, x_pad, y_ids, y_pad)
        cx, cy = states.cross_lingual
        sel_x, sel_y = x_labels != IGNORE_INDEX, y_labels != IGNORE_INDEX
        h = torch.cat([cx[sel_x], cy[sel_y]], dim=0)
        targets = torch.cat([x_labels[sel_x], y_labels[sel_y]], dim=0)
        return self.vocab_logits(h), targets

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


@contextmanager
def inference(model: nn.Module):
    """Eval mode and no autograd, restoring the previous mode afterwards."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        model.train(was_training)


def encode_pair(pair: SentencePair, model: CrossAlignModel, tap: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Layer-``tap`` activations ``(s, t)`` over all positions of each sentence, specials included."""
    cfg = model.config
    if not 0 <= tap <= cfg.n_layers:
        raise IndexError(f"tap layer must lie in [0, {cfg.n_layers}], got {tap}")
    with inference(model):
        x = torch.as_tensor(pair.src.ids)[None]
        y = torch.as_tensor(pair.tgt.ids)[None]
        states = model(x, torch.zeros_like(x, dtype=torch.bool), y, torch.zeros_like(y, dtype=torch.bool), upto=tap)
        s, t = states.tap(tap)
    return s[0], t[0]


def tlm_logits(masked: MaskedPair, model: CrossAlignModel) -> tuple[torch.Tensor, torch.Tensor]:
    """Vocabulary scores ``(n_labeled, vocab)`` at labeled positions and their target ids."""
    x = torch.as_tensor(masked.src_input)[None]
    y = torch.as_tensor(masked.tgt_input)[None]
    xl = torch.as_tensor(masked.src_labels)[None]
    yl = torch.as_tensor(masked.tgt_labels)[None]
    return model.tlm_forward(x, torch.zeros_like(x, dtype=torch.bool), y, torch.zeros_like(y, dtype=torch.bool), xl, yl)


def save_checkpoint(path: str | Path, model: CrossAlignModel, vocab: Vocab | None = None, extra: dict | None = None) -> None:
    """Safetensors container: float32 little-endian tensors plus config/vocab metadata."""
    tensors = {k: v.detach().to(torch.float32).contiguous() for k, v in model.state_dict().items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": json.dumps(asdict(model.config), sort_keys=True),
        "vocab": json.dumps(vocab.tokens if vocab is not None else None),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(_canonical_header(save(tensors, metadata=meta)))


def _canonical_header(blob: bytes) -> bytes:
    """Re-serialize the JSON header with sorted keys.

    The writer emits the metadata map in hash order, which would make
    identical checkpoints differ byte-wise between runs.
    """
    n = int.from_bytes(blob[:8], "little")
    header = json.dumps(json.loads(blob[8: 8 + n]), sort_keys=True, separators=(",", ":")).encode()
    if len(header) > n:
        return blob
    return blob[:8] + header.ljust(n) + blob[8 + n:]


def read_checkpoint_metadata(path: str | Path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a crossalign checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
    return meta


def load_checkpoint(path: str | Path) -> tuple[CrossAlignModel, Vocab | None, dict]:
    meta = read_checkpoint_metadata(path)
    cfg = ModelConfig.from_dict(json.loads(meta["config"]))
    model = CrossAlignModel(cfg)
    model.load_state_dict(load_file(str(path)))
    tokens = json.loads(meta["vocab"])
    return model, (Vocab(tokens) if tokens is not None else None), json.loads(meta["extra"])
