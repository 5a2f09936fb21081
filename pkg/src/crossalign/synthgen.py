"""Seeded synthetic parallel corpus with planted lexicon, ambiguity and gold links.

Source and target words are built from disjoint syllable inventories. The only
surface forms common to both languages are optional loanwords (``shared_frac``)
that translate to themselves. A fraction of source types is ambiguous: each has
two target senses, and the sense used in a sentence is fixed by a trigger word
placed at least two positions away from it. Triggers come from a small
reserved pool shared by all ambiguous types, so no trigger is tied to a single
sense word; a sentence holding an ambiguous word carries exactly one of its two
triggers and never the other one. Filler words follow a Zipf law over a fixed
random ranking, so subword segmentation tracks word rarity in every word class
rather than singling out the sense words. Target order is a permutation of source order with bounded
displacement, and the gold alignment follows that permutation exactly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .corpus import AlignmentSet, CorpusError, write_alignments, write_parallel
from .evaluation import aer_counts

SRC_CONSONANTS = "bdfgklmnprst"
TGT_CONSONANTS = "chjqvwxyz"
VOWELS = "aeiou"


@dataclass(frozen=True)
class SynthSpec:
    src_vocab_size: int = 200
    ambiguous_frac: float = 0.2
    multipiece_frac: float = 0.3
    shared_frac: float = 0.3
    min_len: int = 5
    max_len: int = 10
    distortion: int = 3
    ambiguous_sentence_rate: float = 1.0
    max_ambiguous_per_sentence: int = 1
    trigger_pool_size: int = 10
    zipf_exponent: float = 1.0
    n_train: int = 5000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("ambiguous_frac", "multipiece_frac", "shared_frac", "ambiguous_sentence_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError(f"bad sentence length range [{self.min_len}, {self.max_len}]")
        if self.distortion < 0:
            raise ValueError("distortion must be non-negative")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if self.max_ambiguous_per_sentence < 1:
            raise ValueError("max_ambiguous_per_sentence must be at least 1")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be non-negative")
        if self.src_vocab_size < 1:
            raise ValueError("src_vocab_size must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Lexicon:
    """Planted translation table. ``ambiguous[w] = (trigger_a, trigger_b)``.

    ``fillers`` lists the remaining source words from most to least frequent.
    """

    translation: dict[str, str]
    senses: dict[str, tuple[str, str]]
    ambiguous: dict[str, tuple[str, str]]
    multipiece: set[str] = field(default_factory=set)
    fillers: tuple[str, ...] = ()

    @property
    def triggers(self) -> set[str]:
        return {t for pair in self.ambiguous.values() for t in pair}

    def candidates(self, word: str) -> set[str]:
        if word in self.senses:
            return set(self.senses[word])
        return {self.translation[word]}


@dataclass
class SynthSplit:
    pairs: list[tuple[str, str]]
    gold: list[AlignmentSet]
    ambiguous_positions: list[list[int]]


@dataclass
class SynthCorpus:
    spec: SynthSpec
    lexicon: Lexicon
    train: list[tuple[str, str]]
    dev: SynthSplit
    test: SynthSplit

    def manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "ambiguous": {
                "dev": {str(k): p for k, p in enumerate(self.dev.ambiguous_positions) if p},
                "test": {str(k): p for k, p in enumerate(self.test.ambiguous_positions) if p},
            },
            "lexicon": {
                "translation": self.lexicon.translation,
                "senses": {k: list(v) for k, v in self.lexicon.senses.items()},
                "triggers": {k: list(v) for k, v in self.lexicon.ambiguous.items()},
                "multipiece": sorted(self.lexicon.multipiece),
                "filler_rank": list(self.lexicon.fillers),
            },
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_parallel(out / "train.txt", self.train)
        for name, split in (("dev", self.dev), ("test", self.test)):
            write_parallel(out / f"{name}.txt", split.pairs)
            write_alignments(out / f"{name}.gold", split.gold)
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")


def _syllables(consonants: str) -> list[str]:
    return [c + v for c, v in product(consonants, VOWELS)]


def _make_forms(rng, consonants: str, n: int, n_multi: int) -> tuple[list[str], set[str]]:
    syl = _syllables(consonants)
    # multi-piece words: a plain stem plus one of three shared suffix syllables
    suffixes = [s for s in syl[-3:]]
    pool = [a + b for a, b in product(syl[:-3], repeat=2)]
    if len(pool) < n:
        raise CorpusError(f"syllable inventory too small for {n} word forms")
    stems = [pool[k] for k in rng.permutation(len(pool))[:n]]
    multi = set()
    forms = []
    for k, stem in enumerate(stems):
        if k < n_multi:
            w = stem + suffixes[k % len(suffixes)]
            multi.add(w)
            forms.append(w)
        else:
            forms.append(stem)
    order = rng.permutation(n)
    return [forms[k] for k in order], multi


def build_lexicon(spec: SynthSpec, rng: np.random.Generator) -> Lexicon:
    v = spec.src_vocab_size
    n_amb = int(round(spec.ambiguous_frac * v))
    n_trig = min(spec.trigger_pool_size, 2 * n_amb)
    if n_amb + n_trig > v or (n_amb and n_trig < 2):
        raise CorpusError(
            f"src_vocab_size {v} too small for {n_amb} ambiguous types plus {n_trig} trigger words"
        )
    n_tgt = v + n_amb
    src_forms, src_multi = _make_forms(rng, SRC_CONSONANTS, v, int(round(spec.multipiece_frac * v)))
    tgt_forms, tgt_multi = _make_forms(rng, TGT_CONSONANTS, n_tgt, int(round(spec.multipiece_frac * n_tgt)))
    translation = dict(zip(src_forms, tgt_forms[:v]))
    ambiguous_types = src_forms[:n_amb]
    trigger_pool = src_forms[n_amb: n_amb + n_trig]
    # shared (loan) words keep their surface form in both languages
    n_shared = int(round(spec.shared_frac * (v - n_amb - n_trig)))
    for w in src_forms[n_amb + n_trig: n_amb + n_trig + n_shared]:
        translation[w] = w
    senses, ambiguous = {}, {}
    for k, w in enumerate(ambiguous_types):
        senses[w] = (translation[w], tgt_forms[v + k])
        a, b = rng.choice(n_trig, size=2, replace=False)
        ambiguous[w] = (trigger_pool[int(a)], trigger_pool[int(b)])
    used = {t for pair in ambiguous.values() for t in pair} | set(senses)
    plain = [w for w in src_forms if w not in used]
    shuffled = [plain[k] for k in rng.permutation(len(plain))]
    # multi-piece fillers take the rarest ranks, where a frequency-driven tokenizer leaves words split
    fillers = tuple(sorted(shuffled, key=lambda w: w in src_multi or translation[w] in tgt_multi))
    return Lexicon(translation, senses, ambiguous, src_multi | tgt_multi, fillers)


def _permutation(rng, n: int, window: int) -> np.ndarray:
    """Target position of each source position, displacement at most ``window``."""
    while True:
        keys = np.arange(n) + rng.uniform(0, window + 1, size=n)
        order = np.argsort(keys, kind="stable")
        pos = np.empty(n, dtype=np.int64)
        pos[order] = np.arange(n)
        if np.all(np.abs(pos - np.arange(n)) <= window):
            return pos


def _place(rng, length: int, k: int):
    """Slots ``[(p, q), ...]`` for ``k`` ambiguous words and their triggers, ``|p - q| >= 2``."""
    for _ in range(100):
        slots = rng.permutation(length)[: 2 * k]
        pq = [(int(slots[2 * a]), int(slots[2 * a + 1])) for a in range(k)]
        if all(abs(p - q) >= 2 for p, q in pq):
            return pq
    return None


def _generate_split(spec, lex, rng, n_pairs, sense_counter):
    amb_types = sorted(lex.senses)
    plain = lex.fillers
    weights = None
    if spec.zipf_exponent > 0:
        weights = 1.0 / np.arange(1, len(plain) + 1) ** spec.zipf_exponent
        weights = weights / weights.sum()
    pairs, gold, amb_pos = [], [], []
    for _ in range(n_pairs):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        k = 0
        if amb_types and length >= 3 and rng.random() < spec.ambiguous_sentence_rate:
            k = int(rng.integers(1, min(spec.max_ambiguous_per_sentence, len(amb_types), length // 2) + 1))
        placed = _place(rng, length, k) if k else []
        if placed is None:
            k, placed = 1, _place(rng, length, 1)
        chosen, senses_here = [], []
        for a in rng.permutation(len(amb_types)):
            if len(chosen) == k:
                break
            w = amb_types[int(a)]
            sense = (sense_counter.get(w, 0) + _sense_offset(w)) % 2
            used = {lex.ambiguous[c][s] for c, s in zip(chosen, senses_here)}
            avoid = {lex.ambiguous[c][1 - s] for c, s in zip(chosen, senses_here)}
            trig, other = lex.ambiguous[w][sense], lex.ambiguous[w][1 - sense]
            # triggers of different ambiguous words in one sentence stay distinct and never contradict
            if trig in used or trig in avoid or other in used:
                continue
            chosen.append(w)
            senses_here.append(sense)
        placed = placed[: len(chosen)]
        words = [None] * length
        sense_of = {}
        for w, sense, (p, q) in zip(chosen, senses_here, placed):
            # alternate senses per type so both stay balanced over a split
            sense_counter[w] = sense_counter.get(w, 0) + 1
            words[p], words[q] = w, lex.ambiguous[w][sense]
            sense_of[p] = sense
        fill = iter(plain[int(a)] for a in rng.choice(len(plain), size=words.count(None), replace=False, p=weights))
        words = [x if x is not None else next(fill) for x in words]
        pos = _permutation(rng, length, spec.distortion)
        tgt = [None] * length
        for i, w in enumerate(words):
            tgt[pos[i]] = lex.senses[w][sense_of[i]] if i in sense_of else lex.translation[w]
        pairs.append((" ".join(words), " ".join(tgt)))
        gold.append(AlignmentSet.from_links((i, int(pos[i])) for i in range(length)))
        amb_pos.append(sorted(sense_of))
    return SynthSplit(pairs, gold, amb_pos)


def _sense_offset(word: str) -> int:
    return sum(map(ord, word)) % 2


def generate(spec: SynthSpec) -> SynthCorpus:
    root = np.random.SeedSequence(spec.seed)
    lex_seed, train_seed, dev_seed, test_seed = root.spawn(4)
    lex = build_lexicon(spec, np.random.default_rng(lex_seed))
    train = _generate_split(spec, lex, np.random.default_rng(train_seed), spec.n_train, {})
    dev = _generate_split(spec, lex, np.random.default_rng(dev_seed), spec.n_dev, {})
    test = _generate_split(spec, lex, np.random.default_rng(test_seed), spec.n_test, {})
    corpus = SynthCorpus(spec, lex, train.pairs, dev, test)
    for split in (dev, test):
        oracle_aer(split.pairs, split.gold, lex, strict=True)
    return corpus


def oracle_alignments(pairs, lexicon: Lexicon) -> list[AlignmentSet]:
    out = []
    for src, tgt in pairs:
        tw = tgt.split()
        links = set()
        for i, w in enumerate(src.split()):
            cands = lexicon.candidates(w)
            links.update((i, j) for j, t in enumerate(tw) if t in cands)
        out.append(AlignmentSet.from_links(links))
    return out


def oracle_aer(pairs, gold: list[AlignmentSet], lexicon: Lexicon, strict: bool = False) -> float:
    """AER of a cheating aligner that reads the planted lexicon; 0.0 on consistent data."""
    if len(pairs) != len(gold):
        raise CorpusError(f"{len(pairs)} sentence pairs but {len(gold)} gold lines")
    pred = oracle_alignments(pairs, lexicon)
    for k, ((s, t), g) in enumerate(zip(pairs, gold), start=1):
        try:
            g.check_bounds(len(s.split()), len(t.split()))
        except CorpusError as exc:
            raise CorpusError(f"line {k}: {exc}") from None
    value = aer_counts(pred, gold).aer
    if strict and value != 0.0:
        raise RuntimeError(f"generator bug: lexicon oracle AER is {value}, expected 0")
    return value
