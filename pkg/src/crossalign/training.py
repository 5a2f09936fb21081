"""Two-stage training: TLM over all parameters, then SSA finetuning of the alignment layer only."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import MaskedPair, MaskRates, SentencePair, Vocab, mask_for_tlm
from .extraction import align_corpus, directional_probs, similarity_matrix, word_map, word_to_bpe_labels
from .model import CrossAlignModel, pad_batch

logger = logging.getLogger(__name__)

STAGE_DEFAULTS = {1: {"lr": 5e-4, "epochs": 2}, 2: {"lr": 1e-5, "epochs": 1}}
LOG_FLOOR = 1e-9
CACHE_ENV = "CROSSALIGN_CACHE"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float | None = None
    batch_size: int = 12
    grad_accum: int = 4
    epochs: int | None = None
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    mask_choose: float = 0.15
    symmetric_anchor: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr is None:
            self.lr = STAGE_DEFAULTS[self.stage]["lr"]
        if self.epochs is None:
            self.epochs = STAGE_DEFAULTS[self.stage]["epochs"]
        if self.lr < 0 or self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 0:
            raise ValueError("lr must be >= 0, batch_size and grad_accum >= 1, epochs >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainResult:
    model: CrossAlignModel
    log: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.log]


# --- losses -----------------------------------------------------------------

def collate_masked(batch: Sequence[MaskedPair]) -> dict[str, torch.Tensor]:
    x, x_pad = pad_batch([m.src_input for m in batch])
    y, y_pad = pad_batch([m.tgt_input for m in batch])
    xl, _ = pad_batch([m.src_labels for m in batch], pad_value=-100)
    yl, _ = pad_batch([m.tgt_labels for m in batch], pad_value=-100)
    return {"x": x, "x_pad": x_pad, "y": y, "y_pad": y_pad, "x_labels": xl, "y_labels": yl}


def tlm_loss(model: CrossAlignModel, batch: Sequence[MaskedPair] | dict, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy over every labeled position of both streams.

    ``reduction="sum"`` returns the summed loss so callers can normalise by a
    label count spanning several micro-batches.
    """
    if not isinstance(batch, dict):
        batch = collate_masked(batch)
    logits, targets = model.tlm_forward(
        batch["x"], batch["x_pad"], batch["y"], batch["y_pad"], batch["x_labels"], batch["y_labels"]
    )
    if targets.numel() == 0:
        return model.head_bias.sum() * 0.0
    return F.cross_entropy(logits, targets, reduction=reduction)


def ssa_loss(p_fwd: torch.Tensor, p_bwd: torch.Tensor, labels) -> torch.Tensor:
    """``-(1/I) sum G log Pf - (1/J) sum G log Pb`` with I, J the label-matrix dimensions."""
    labels = torch.as_tensor(labels, dtype=p_fwd.dtype)
    if p_fwd.shape != labels.shape or p_bwd.shape != labels.shape:
        raise ValueError(
            f"label matrix {tuple(labels.shape)} does not match probabilities {tuple(p_fwd.shape)}"
        )
    rows, cols = labels.shape
    fwd = (labels * torch.log(p_fwd.clamp_min(LOG_FLOOR))).sum() / rows
    bwd = (labels * torch.log(p_bwd.clamp_min(LOG_FLOOR))).sum() / cols
    return -(fwd + bwd)


def training_positions(ids: Sequence[int], word_of_subword: Sequence[int]) -> list[int]:
    """``[CLS]`` followed by every word piece; the layout of SSA label matrices."""
    return [0] + [k for k, w in enumerate(word_of_subword) if w >= 0]


def ssa_batch_loss(model: CrossAlignModel, pairs: Sequence[SentencePair], labels: Sequence[np.ndarray], layer: int,
                   reduction: str = "mean") -> torch.Tensor:
    x, x_pad = pad_batch([p.src.ids for p in pairs])
    y, y_pad = pad_batch([p.tgt.ids for p in pairs])
    s_all, t_all = model(x, x_pad, y, y_pad, upto=layer).tap(layer)
    total = s_all.new_zeros(())
    for k, (pair, lab) in enumerate(zip(pairs, labels)):
        s = s_all[k, training_positions(pair.src.ids, pair.src.word_of_subword)]
        t = t_all[k, training_positions(pair.tgt.ids, pair.tgt.word_of_subword)]
        pf, pb = directional_probs(similarity_matrix(s, t))
        total = total + ssa_loss(pf, pb, lab)
    return total / len(pairs) if reduction == "mean" else total


# --- SSA labels ---------------------------------------------------------------

def state_hash(model: CrossAlignModel) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


def corpus_hash(pairs: Sequence[SentencePair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(json.dumps([p.src.ids, p.src.word_of_subword, p.tgt.ids, p.tgt.word_of_subword]).encode())
    return h.hexdigest()


@dataclass(frozen=True)
class SsaLabelCache:
    key: str
    layer: int
    tau: float
    labels: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.labels)


def generate_ssa_labels(
    model: CrossAlignModel,
    pairs: Sequence[SentencePair],
    layer: int,
    tau: float,
    symmetric_anchor: bool = True,
    cache_dir: str | Path | None = None,
) -> SsaLabelCache:
    """Extract stage-1 alignments at ``layer`` and expand them to anchored piece-level labels.

    With ``cache_dir`` (or ``$CROSSALIGN_CACHE``) set, labels are stored under
    a key built from the corpus, the checkpoint weights, the layer and tau.
    """
    n_layers = model.config.n_layers
    if not 1 <= layer <= n_layers:
        raise IndexError(f"alignment layer must lie in [1, {n_layers}], got {layer}")
    key = hashlib.sha256(
        f"{corpus_hash(pairs)}:{state_hash(model)}:{layer}:{tau!r}:{symmetric_anchor}".encode()
    ).hexdigest()
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    path = Path(cache_dir) / f"ssa-{key}.npz" if cache_dir else None
    if path is not None and path.exists():
        data = np.load(path)
        labels = tuple(data[f"p{k}"] for k in range(len(pairs)))
        logger.info("loaded SSA labels from %s", path)
        return SsaLabelCache(key, layer, tau, labels)

    links = align_corpus(pairs, model, layer, tau, batch_size=64)[layer]
    labels = [
        word_to_bpe_labels(a, word_map(p.src), word_map(p.tgt), include_cls_anchor=True, symmetric_anchor=symmetric_anchor)
        for a, p in zip(links, pairs)
    ]
    cache = SsaLabelCache(key, layer, tau, tuple(labels))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, **{f"p{k}": a for k, a in enumerate(labels)})
    return cache


# --- loops -------------------------------------------------------------------

def _optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def _windows(n: int, cfg: TrainConfig, rng: np.random.Generator):
    """Per epoch: a seeded shuffle cut into optimizer windows of micro-batches."""
    order = rng.permutation(n)
    window = cfg.batch_size * cfg.grad_accum
    for start in range(0, n, window):
        idx = order[start:start + window]
        yield [idx[k:k + cfg.batch_size] for k in range(0, len(idx), cfg.batch_size)]


def _check_finite(loss: float, stage: int, step: int, epoch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"stage {stage}: loss is {loss} at step {step} (epoch {epoch}); lower the learning rate")


def _write_log(path, records) -> None:
    if path is None:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def train_stage1(
    pairs: Sequence[SentencePair],
    model: CrossAlignModel,
    vocab: Vocab,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_fn=None,
) -> TrainResult:
    """TLM on freshly masked pairs each epoch; updates every parameter. ``model`` is not modified."""
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 TrainConfig")
    model = copy.deepcopy(model)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    mask_rng = np.random.default_rng([cfg.seed, 1])
    rates = MaskRates(choose=cfg.mask_choose)
    opt = _optimizer(model.parameters(), cfg)
    model.train()
    log, step = [], 0
    for epoch in range(cfg.epochs):
        for window in _windows(len(pairs), cfg, rng):
            micro = [[mask_for_tlm(pairs[i], vocab, mask_rng, rates) for i in mb] for mb in window]
            n_labels = sum(m.n_labels for mb in micro for m in mb)
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for mb in micro:
                loss = tlm_loss(model, mb, reduction="sum") / max(n_labels, 1)
                loss.backward()
                total += loss.item()
            _check_finite(total, 1, step, epoch)
            opt.step()
            step += 1
            log.append({"stage": 1, "step": step, "epoch": epoch, "loss": total, "lr": cfg.lr, "seed": cfg.seed})
            if checkpoint_fn is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoint_fn(model, step)
        logger.info("stage 1 epoch %d: last loss %.4f", epoch, log[-1]["loss"] if log else float("nan"))
    model.eval()
    _write_log(log_path, log)
    return TrainResult(model, log)


def train_stage2(
    model: CrossAlignModel,
    pairs: Sequence[SentencePair],
    layer: int,
    cfg: TrainConfig,
    labels: SsaLabelCache | None,
    log_path: str | Path | None = None,
    checkpoint_fn=None,
) -> TrainResult:
    """SSA finetuning; only the parameters of ``layer`` are handed to the optimizer."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 TrainConfig")
    if labels is None:
        raise ValueError("stage 2 needs SSA labels; run generate_ssa_labels on the stage-1 model first")
    if len(labels) != len(pairs):
        raise ValueError(f"label cache holds {len(labels)} pairs, corpus has {len(pairs)}")
    if labels.layer != layer:
        raise ValueError(f"labels were generated at layer {labels.layer}, training layer is {layer}")
    model = copy.deepcopy(model)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    trainable = set(model.layer_parameter_names(layer))
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
        if name in trainable:
            params.append(p)
    opt = _optimizer(params, cfg)
    model.train()
    log, step = [], 0
    for epoch in range(cfg.epochs):
        for window in _windows(len(pairs), cfg, rng):
            n_pairs = sum(len(mb) for mb in window)
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for mb in window:
                loss = ssa_batch_loss(
                    model, [pairs[i] for i in mb], [labels.labels[i] for i in mb], layer, reduction="sum"
                ) / n_pairs
                loss.backward()
                total += loss.item()
            _check_finite(total, 2, step, epoch)
            opt.step()
            step += 1
            log.append({"stage": 2, "step": step, "epoch": epoch, "loss": total, "lr": cfg.lr, "seed": cfg.seed})
            if checkpoint_fn is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoint_fn(model, step)
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    _write_log(log_path, log)
    return TrainResult(model, log)
