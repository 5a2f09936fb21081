"""From hidden states to word alignments: similarity, bidirectional softmax, intersection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import NO_WORD, AlignmentSet, CorpusError, SentencePair, TokenizedSentence
from .model import CrossAlignModel, encode_pair, inference, pad_batch


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def similarity_matrix(s, t) -> torch.Tensor:
    """``S[i, j] = s_i . t_j`` for ``(I, d)`` source and ``(J, d)`` target states."""
    s, t = _as_tensor(s), _as_tensor(t)
    if s.dim() != 2 or t.dim() != 2 or s.shape[1] != t.shape[1]:
        raise ValueError(f"cannot compare states of shapes {tuple(s.shape)} and {tuple(t.shape)}")
    return s @ t.T


def directional_probs(S) -> tuple[torch.Tensor, torch.Tensor]:
    """Source-to-target (rows sum to 1) and target-to-source (columns sum to 1) probabilities."""
    S = _as_tensor(S)
    return torch.softmax(S, dim=-1), torch.softmax(S, dim=-2)


def intersect_alignments(p_fwd, p_bwd, tau: float) -> torch.Tensor:
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"threshold must lie in [0, 1), got {tau}")
    return (_as_tensor(p_fwd) > tau) & (_as_tensor(p_bwd) > tau)


def _check_map(word_map: Sequence[int], size: int, side: str) -> None:
    if len(word_map) != size:
        raise CorpusError(f"{side} map covers {len(word_map)} positions, matrix has {size}")
    if any(w < 0 for w in word_map):
        raise CorpusError(f"{side} map leaves a subword position without a word")


def bpe_to_word(G, src_map: Sequence[int], tgt_map: Sequence[int]) -> AlignmentSet:
    """Link two words whenever any of their pieces are linked."""
    G = np.asarray(G.detach().cpu() if isinstance(G, torch.Tensor) else G, dtype=bool)
    _check_map(src_map, G.shape[0], "source")
    _check_map(tgt_map, G.shape[1], "target")
    rows, cols = np.nonzero(G)
    return AlignmentSet.from_links((src_map[i], tgt_map[j]) for i, j in zip(rows, cols))


def word_to_bpe_labels(
    links: AlignmentSet | Iterable[tuple[int, int]],
    src_map: Sequence[int],
    tgt_map: Sequence[int],
    include_cls_anchor: bool = True,
    symmetric_anchor: bool = True,
) -> np.ndarray:
    """Expand word links to a ``(1 + I, 1 + J)`` piece-level label matrix.

    Row 0 and column 0 stand for ``[CLS]``. With the anchor on, every target
    piece of an unlinked target word is labeled against the ``[CLS]`` row;
    with ``symmetric_anchor`` unlinked source pieces also get the ``[CLS]``
    column. The ``[CLS]``-``[CLS]`` cell is never labeled.
    """
    pairs = links.possible if isinstance(links, AlignmentSet) else frozenset(links)
    n_src_words = max(src_map, default=-1) + 1
    n_tgt_words = max(tgt_map, default=-1) + 1
    if any(w < 0 for w in src_map) or any(w < 0 for w in tgt_map):
        raise CorpusError("word maps must not contain special positions")
    for u, v in pairs:
        if not (0 <= u < n_src_words and 0 <= v < n_tgt_words):
            raise CorpusError(f"word link {u}-{v} outside a {n_src_words}x{n_tgt_words} pair")
    src_map = np.asarray(src_map, dtype=np.int64)
    tgt_map = np.asarray(tgt_map, dtype=np.int64)
    word_links = np.zeros((n_src_words, n_tgt_words), dtype=bool)
    for u, v in pairs:
        word_links[u, v] = True
    labels = np.zeros((len(src_map) + 1, len(tgt_map) + 1), dtype=np.float32)
    labels[1:, 1:] = word_links[src_map][:, tgt_map]
    if include_cls_anchor:
        labels[0, 1:] = ~word_links.any(axis=0)[tgt_map]
        if symmetric_anchor:
            labels[1:, 0] = ~word_links.any(axis=1)[src_map]
    return labels


def word_map(sent: TokenizedSentence) -> list[int]:
    return [w for w in sent.word_of_subword if w != NO_WORD]


@dataclass
class AlignmentMatrices:
    S: np.ndarray
    p_fwd: np.ndarray
    p_bwd: np.ndarray
    G: np.ndarray
    tau: float


def extract(s, t, src: TokenizedSentence, tgt: TokenizedSentence, tau: float) -> tuple[AlignmentSet, AlignmentMatrices]:
    """Word alignment from full-sequence states; specials are dropped before the softmax."""
    s = _as_tensor(s).to(torch.float64)[list(src.word_positions)]
    t = _as_tensor(t).to(torch.float64)[list(tgt.word_positions)]
    S = similarity_matrix(s, t)
    pf, pb = directional_probs(S)
    G = intersect_alignments(pf, pb, tau)
    words = bpe_to_word(G, word_map(src), word_map(tgt))
    mats = AlignmentMatrices(S.numpy(), pf.numpy(), pb.numpy(), G.numpy(), tau)
    return words, mats


def align_pair(pair: SentencePair, model: CrossAlignModel, layer: int, tau: float):
    s, t = encode_pair(pair, model, layer)
    return extract(s, t, pair.src, pair.tgt, tau)


def align_corpus(
    pairs: Sequence[SentencePair],
    model: CrossAlignModel,
    layers: int | Sequence[int],
    tau: float,
    batch_size: int = 32,
    keep_matrices: bool = False,
) -> dict[int, list]:
    """Align every pair at each requested tap layer with one batched forward per chunk.

    Returns ``{layer: [AlignmentSet, ...]}``, or ``{layer: [(AlignmentSet, AlignmentMatrices), ...]}``
    when ``keep_matrices`` is set. Padded positions never enter the similarity matrix.
    """
    layers = [layers] if isinstance(layers, int) else list(layers)
    top = max(layers, default=0)
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    out: dict[int, list] = {c: [] for c in layers}
    with inference(model):
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start: start + batch_size]
            x, xp = pad_batch([p.src.ids for p in chunk])
            y, yp = pad_batch([p.tgt.ids for p in chunk])
            states = model(x, xp, y, yp, upto=top)
            for c in layers:
                hx, hy = states.tap(c)
                for k, p in enumerate(chunk):
                    links, mats = extract(hx[k, : len(p.src)], hy[k, : len(p.tgt)], p.src, p.tgt, tau)
                    out[c].append((links, mats) if keep_matrices else links)
    return out


def write_probability_dump(path: str | Path, matrices: Iterable[AlignmentMatrices], precision: int = 6) -> None:
    """One text block per pair: a header line, the forward then the backward probabilities."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, mats in enumerate(matrices):
            rows, cols = mats.p_fwd.shape
            fh.write(f"# pair {k} {rows}x{cols} tau={mats.tau}\n")
            for name, mat in (("fwd", mats.p_fwd), ("bwd", mats.p_bwd)):
                fh.write(f"{name}\n")
                for row in mat:
                    fh.write(" ".join(f"{v:.{precision}f}" for v in row) + "\n")
            fh.write("\n")
