"""Parallel text ingestion, wordpiece tokenization, gold alignments and TLM masking."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONT = "▸"  # continuation marker for non-initial pieces
NO_WORD = -1  # word_of_subword sentinel for special positions
IGNORE_INDEX = -100
PARALLEL_SEP = " ||| "


class CorpusError(ValueError):
    """Malformed corpus, vocabulary or alignment data."""


class Vocab:
    """Dense token <-> id table with the five reserved specials at ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise CorpusError(f"vocab must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            dup = [t for t, c in Counter(tokens).items() if c > 1]
            raise CorpusError(f"duplicate vocab entries: {dup[:5]}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad_id = 0
    unk_id = 1
    cls_id = 2
    sep_id = 3
    mask_id = 4
    n_special = len(SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __repr__(self) -> str:
        return f"Vocab(size={len(self)})"

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def is_special(self, idx: int) -> bool:
        return idx < self.n_special

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


def _word_chars(word: str) -> list[str]:
    return [word[0]] + [CONT + ch for ch in word[1:]]


def _merge_symbol(left: str, right: str) -> str:
    return left + right[len(CONT):]


def _iter_sentences(corpus: Iterable) -> Iterable[str]:
    for item in corpus:
        if isinstance(item, str):
            yield item
        else:
            yield from item


def build_vocab(corpus: Iterable, target_size: int) -> Vocab:
    """Learn a wordpiece vocabulary by greedy frequency-ranked merges.

    Every word-initial character and every continuation character seen in
    the corpus is kept. Adjacent pieces are then merged, most frequent pair
    first (ties broken by the lexicographically smallest pair), until the
    vocabulary reaches ``target_size`` or no pair is left to merge.

    ``corpus`` holds raw sentences or (source, target) sentence tuples.
    """
    if target_size <= len(SPECIAL_TOKENS):
        raise CorpusError(f"target_size must exceed {len(SPECIAL_TOKENS)}, got {target_size}")
    word_freq: Counter[str] = Counter()
    for sent in _iter_sentences(corpus):
        word_freq.update(sent.split())
    if not word_freq:
        raise CorpusError("cannot build a vocabulary from an empty corpus")

    segs = {w: _word_chars(w) for w in word_freq}
    chars = sorted({p for s in segs.values() for p in s})
    if len(chars) + len(SPECIAL_TOKENS) > target_size:
        raise CorpusError(
            f"target_size {target_size} < {len(SPECIAL_TOKENS)} specials + {len(chars)} characters"
        )
    tokens = list(SPECIAL_TOKENS) + chars
    known = set(tokens)
    while len(tokens) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, seg in segs.items():
            for a, b in zip(seg, seg[1:]):
                pairs[a, b] += word_freq[w]
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        merged = _merge_symbol(*best)
        for w, seg in segs.items():
            out, i = [], 0
            while i < len(seg):
                if i + 1 < len(seg) and (seg[i], seg[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seg[i])
                    i += 1
            segs[w] = out
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    return Vocab(tokens)


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match segmentation; an uncoverable word becomes ``[UNK]``."""
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            cand = word[start:end] if start == 0 else CONT + word[start:end]
            if cand in vocab:
                match = cand
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


@dataclass(frozen=True)
class TokenizedSentence:
    words: tuple[str, ...]
    ids: tuple[int, ...]
    word_of_subword: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def word_positions(self) -> list[int]:
        """Subword positions that belong to a word (specials excluded)."""
        return [i for i, w in enumerate(self.word_of_subword) if w != NO_WORD]

    def pieces(self, vocab: Vocab) -> list[str]:
        return [vocab.tokens[i] for i in self.ids]

    def detokenize(self, vocab: Vocab) -> list[str]:
        words: list[str] = []
        for idx, w in zip(self.ids, self.word_of_subword):
            if w == NO_WORD:
                continue
            piece = vocab.tokens[idx]
            if piece.startswith(CONT):
                piece = piece[len(CONT):]
            if w == len(words):
                words.append(piece)
            else:
                words[w] += piece
        return words


def tokenize(sentence: str | Sequence[str], vocab: Vocab, max_len: int | None = None) -> TokenizedSentence:
    """Tokenize into ``[CLS] pieces... [SEP]`` keeping the word index of every piece.

    With ``max_len`` set, trailing words that do not fit are dropped whole
    (never split mid-word) and a warning is logged.
    """
    words = sentence.split() if isinstance(sentence, str) else list(sentence)
    ids = [vocab.cls_id]
    owner = [NO_WORD]
    kept = 0
    for w_idx, word in enumerate(words):
        piece_ids = [vocab.id(p) for p in wordpiece(word, vocab)]
        if max_len is not None and len(ids) + len(piece_ids) + 1 > max_len:
            logger.warning("truncating sentence at word %d of %d (max_len=%d)", w_idx, len(words), max_len)
            break
        ids.extend(piece_ids)
        owner.extend([w_idx] * len(piece_ids))
        kept += 1
    ids.append(vocab.sep_id)
    owner.append(NO_WORD)
    return TokenizedSentence(tuple(words[:kept]), tuple(ids), tuple(owner))


@dataclass(frozen=True)
class AlignmentSet:
    """Word links split into sure and possible; sure is always a subset of possible."""

    sure: frozenset = frozenset()
    possible: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "sure", frozenset(self.sure))
        object.__setattr__(self, "possible", frozenset(self.possible) | self.sure)

    @classmethod
    def from_links(cls, links: Iterable[tuple[int, int]]) -> "AlignmentSet":
        links = frozenset((int(i), int(j)) for i, j in links)
        return cls(links, links)

    @property
    def links(self) -> frozenset:
        return self.sure

    def __len__(self) -> int:
        return len(self.possible)

    def check_bounds(self, n_src: int, n_tgt: int) -> None:
        for i, j in self.possible:
            if not (0 <= i < n_src and 0 <= j < n_tgt):
                raise CorpusError(f"link {i}-{j} outside a {n_src}x{n_tgt} sentence pair")

    def to_pharaoh(self, index_base: int = 0) -> str:
        out = [f"{i + index_base}-{j + index_base}" for i, j in sorted(self.sure)]
        out += [f"{i + index_base}p{j + index_base}" for i, j in sorted(self.possible - self.sure)]
        return " ".join(out)


@dataclass(frozen=True)
class SentencePair:
    src: TokenizedSentence
    tgt: TokenizedSentence
    gold: AlignmentSet | None = None

    def swapped(self) -> "SentencePair":
        gold = None
        if self.gold is not None:
            gold = AlignmentSet(
                {(j, i) for i, j in self.gold.sure}, {(j, i) for i, j in self.gold.possible}
            )
        return SentencePair(self.tgt, self.src, gold)


_LINK_RE = re.compile(r"^(\d+)([-p])(\d+)$")
GOLD_FORMATS = ("dash-p", "dash")


def parse_alignment_line(line: str, index_base: int = 0, fmt: str = "dash-p", lineno: int = 1) -> AlignmentSet:
    if index_base not in (0, 1):
        raise CorpusError(f"index_base must be 0 or 1, got {index_base}")
    if fmt not in GOLD_FORMATS:
        raise CorpusError(f"unknown alignment format {fmt!r}; expected one of {GOLD_FORMATS}")
    sure, possible = set(), set()
    for tok in line.split():
        m = _LINK_RE.match(tok)
        if m is None or (fmt == "dash" and m.group(2) == "p"):
            raise CorpusError(f"line {lineno}: malformed alignment token {tok!r}")
        i, j = int(m.group(1)) - index_base, int(m.group(3)) - index_base
        if i < 0 or j < 0:
            raise CorpusError(f"line {lineno}: index 0 in {tok!r} is invalid with 1-based indexing")
        (sure if m.group(2) == "-" else possible).add((i, j))
    return AlignmentSet(sure, possible)


def parse_gold_alignments(path: str | Path, fmt: str = "dash-p", index_base: int = 0) -> list[AlignmentSet]:
    """Read one alignment set per line. ``i-j`` is a sure link, ``ipj`` possible-only."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [parse_alignment_line(ln, index_base, fmt, n) for n, ln in enumerate(lines, start=1)]


def write_alignments(path: str | Path, alignments: Iterable[AlignmentSet], index_base: int = 0) -> None:
    text = "".join(a.to_pharaoh(index_base) + "\n" for a in alignments)
    Path(path).write_text(text, encoding="utf-8")


def read_parallel(path: str | Path) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if PARALLEL_SEP.strip() not in line:
            raise CorpusError(f"line {n}: missing '{PARALLEL_SEP.strip()}' separator")
        src, tgt = line.split(PARALLEL_SEP.strip(), 1)
        pairs.append((src.strip(), tgt.strip()))
    return pairs


def write_parallel(path: str | Path, pairs: Iterable[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{s}{PARALLEL_SEP}{t}\n" for s, t in pairs), encoding="utf-8")


def make_pairs(
    raw: Sequence[tuple[str, str]],
    vocab: Vocab,
    gold: Sequence[AlignmentSet] | None = None,
    max_len: int | None = None,
) -> list[SentencePair]:
    if gold is not None and len(gold) != len(raw):
        raise CorpusError(f"{len(raw)} sentence pairs but {len(gold)} gold alignment lines")
    out = []
    for k, (s, t) in enumerate(raw):
        src, tgt = tokenize(s, vocab, max_len), tokenize(t, vocab, max_len)
        g = None
        if gold is not None:
            g = gold[k]
            if max_len is not None:
                g = AlignmentSet(
                    {(i, j) for i, j in g.sure if i < src.n_words and j < tgt.n_words},
                    {(i, j) for i, j in g.possible if i < src.n_words and j < tgt.n_words},
                )
            try:
                g.check_bounds(src.n_words, tgt.n_words)
            except CorpusError as exc:
                raise CorpusError(f"line {k + 1}: {exc}") from None
        out.append(SentencePair(src, tgt, g))
    return out


@dataclass(frozen=True)
class MaskRates:
    choose: float = 0.15
    mask: float = 0.8
    random: float = 0.1
    keep: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.choose <= 1.0:
            raise ValueError(f"choose rate must lie in [0, 1], got {self.choose}")
        parts = (self.mask, self.random, self.keep)
        if min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
            raise ValueError(f"mask/random/keep rates must be non-negative and sum to 1, got {parts}")


@dataclass(frozen=True)
class MaskedPair:
    """Masked model inputs plus per-position targets (``IGNORE_INDEX`` where unlabeled)."""

    pair: SentencePair
    src_input: np.ndarray
    tgt_input: np.ndarray
    src_labels: np.ndarray
    tgt_labels: np.ndarray = field(repr=False)

    @property
    def n_labels(self) -> int:
        return int((self.src_labels != IGNORE_INDEX).sum() + (self.tgt_labels != IGNORE_INDEX).sum())


def _mask_stream(sent: TokenizedSentence, vocab: Vocab, rng: np.random.Generator, rates: MaskRates):
    ids = np.asarray(sent.ids, dtype=np.int64)
    labels = np.full_like(ids, IGNORE_INDEX)
    eligible = np.asarray(sent.word_positions, dtype=np.int64)
    k = int(round(rates.choose * len(eligible)))
    if rates.choose > 0 and len(eligible) > 0:
        k = max(k, 1)
    if k == 0:
        return ids.copy(), labels
    chosen = np.sort(rng.choice(eligible, size=k, replace=False))
    masked = ids.copy()
    labels[chosen] = ids[chosen]
    for pos in chosen:
        u = rng.random()
        if u < rates.mask:
            masked[pos] = vocab.mask_id
        elif u < rates.mask + rates.random:
            masked[pos] = rng.integers(vocab.n_special, len(vocab))
    return masked, labels


def mask_for_tlm(
    pair: SentencePair, vocab: Vocab, rng: np.random.Generator, rates: MaskRates = MaskRates()
) -> MaskedPair:
    """Mask source and target independently with the BERT 80/10/10 scheme."""
    xs, xl = _mask_stream(pair.src, vocab, rng, rates)
    ys, yl = _mask_stream(pair.tgt, vocab, rng, rates)
    return MaskedPair(pair, xs, ys, xl, yl)
