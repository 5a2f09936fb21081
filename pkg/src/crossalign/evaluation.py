"""Alignment error rate, corpus evaluation and the layer/depth/objective sweeps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import AlignmentSet, CorpusError, SentencePair, Vocab
from .extraction import align_corpus
from .model import CrossAlignModel, ModelConfig

logger = logging.getLogger(__name__)


@dataclass
class AerCounts:
    """Integer link counts; every metric is derived from these."""

    n_pred: int = 0
    n_sure: int = 0
    hit_sure: int = 0
    hit_possible: int = 0

    def __add__(self, other: "AerCounts") -> "AerCounts":
        return AerCounts(
            self.n_pred + other.n_pred,
            self.n_sure + other.n_sure,
            self.hit_sure + other.hit_sure,
            self.hit_possible + other.hit_possible,
        )

    @property
    def aer(self) -> float:
        denom = self.n_pred + self.n_sure
        if denom == 0:
            logger.debug("AER of an empty prediction against an empty sure set; defined as 0")
            return 0.0
        return 1.0 - (self.hit_sure + self.hit_possible) / denom

    @property
    def precision(self) -> float:
        return self.hit_possible / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.hit_sure / self.n_sure if self.n_sure else 0.0


def pair_counts(pred: AlignmentSet | Iterable[tuple[int, int]], gold: AlignmentSet) -> AerCounts:
    a = pred.possible if isinstance(pred, AlignmentSet) else frozenset(pred)
    return AerCounts(len(a), len(gold.sure), len(a & gold.sure), len(a & gold.possible))


def aer(pred: AlignmentSet | Iterable[tuple[int, int]], gold: AlignmentSet) -> float:
    """``1 - (|A&S| + |A&P|) / (|A| + |S|)``; 0 when both ``A`` and ``S`` are empty."""
    return pair_counts(pred, gold).aer


def aer_counts(preds: Sequence, golds: Sequence[AlignmentSet]) -> AerCounts:
    """Corpus-level (micro-averaged) counts summed over sentence pairs."""
    if len(preds) != len(golds):
        raise CorpusError(f"{len(preds)} predicted lines but {len(golds)} gold lines")
    total = AerCounts()
    for p, g in zip(preds, golds):
        total = total + pair_counts(p, g)
    return total


def restrict_source(links: AlignmentSet, positions: Iterable[int]) -> AlignmentSet:
    keep = set(positions)
    return AlignmentSet(
        {(i, j) for i, j in links.sure if i in keep},
        {(i, j) for i, j in links.possible if i in keep},
    )


@dataclass
class EvalReport:
    aer: float
    precision: float
    recall: float
    counts: AerCounts
    per_pair: list[AerCounts] = field(default_factory=list, repr=False)
    subset: dict[str, AerCounts] = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, preds: Sequence, golds: Sequence[AlignmentSet], subsets=None) -> "EvalReport":
        if len(preds) != len(golds):
            raise CorpusError(f"{len(preds)} predicted lines but {len(golds)} gold lines")
        per_pair = [pair_counts(p, g) for p, g in zip(preds, golds)]
        total = sum(per_pair, AerCounts())
        sub = {}
        for name, positions in (subsets or {}).items():
            sub[name] = aer_counts(
                [restrict_source(p if isinstance(p, AlignmentSet) else AlignmentSet.from_links(p), pos)
                 for p, pos in zip(preds, positions)],
                [restrict_source(g, pos) for g, pos in zip(golds, positions)],
            )
        return cls(total.aer, total.precision, total.recall, total, per_pair, sub)

    def subset_aer(self, name: str) -> float:
        return self.subset[name].aer

    def summary(self) -> dict:
        out = {"aer": self.aer, "precision": self.precision, "recall": self.recall, **asdict(self.counts)}
        for name, c in self.subset.items():
            out[f"{name}_aer"] = c.aer
        return out

    def write(self, path_prefix: str | Path) -> None:
        """Write ``<prefix>.tsv`` (per-pair rows) and ``<prefix>.json`` (summary)."""
        prefix = Path(path_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        with open(prefix.with_suffix(".tsv"), "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["pair", "n_pred", "n_sure", "hit_sure", "hit_possible", "aer"])
            for k, c in enumerate(self.per_pair):
                w.writerow([k, c.n_pred, c.n_sure, c.hit_sure, c.hit_possible, f"{c.aer:.6f}"])
        prefix.with_suffix(".json").write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")


def _gold_of(pairs: Sequence[SentencePair], golds) -> list[AlignmentSet]:
    if golds is None:
        missing = [k for k, p in enumerate(pairs, start=1) if p.gold is None]
        if missing:
            raise CorpusError(f"pair {missing[0]} has no gold alignment ({len(missing)} pairs missing)")
        return [p.gold for p in pairs]
    if len(golds) != len(pairs):
        raise CorpusError(f"{len(pairs)} sentence pairs but {len(golds)} gold lines")
    return list(golds)


def evaluate_corpus(
    model: CrossAlignModel,
    pairs: Sequence[SentencePair],
    layer: int,
    tau: float,
    golds: Sequence[AlignmentSet] | None = None,
    subsets: dict[str, Sequence[Sequence[int]]] | None = None,
    batch_size: int = 32,
) -> EvalReport:
    """Align ``pairs`` at ``layer`` and score them against their gold links."""
    gold = _gold_of(pairs, golds)
    preds = align_corpus(pairs, model, layer, tau, batch_size)[layer]
    return EvalReport.from_predictions(preds, gold, subsets)


@dataclass
class SweepReport:
    """One EvalReport per value of the swept variable (tap layer or cross-attention depth)."""

    axis: str
    values: list[int]
    reports: list[EvalReport]
    notes: list[dict] = field(default_factory=list)
    models: dict = field(default_factory=dict, repr=False)

    def aers(self) -> list[float]:
        return [r.aer for r in self.reports]

    @property
    def best(self) -> int:
        """Swept value with the lowest AER; the smallest value wins ties."""
        a = self.aers()
        return self.values[a.index(min(a))]

    def rows(self) -> list[dict]:
        out = []
        for k, (v, r) in enumerate(zip(self.values, self.reports)):
            row = {self.axis: v, **r.summary()}
            if self.notes:
                row.update(self.notes[k])
            out.append(row)
        return out

    def write(self, path_prefix: str | Path, plots: bool = False) -> list[Path]:
        """Table (``.tsv``), summary (``.json``), raw x/y series (``.xy.tsv``) and, with ``plots``, a PNG."""
        prefix = Path(path_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        rows = self.rows()
        written = [_write_table(prefix.with_suffix(".tsv"), rows)]
        summary = {"axis": self.axis, "best": self.best, "rows": rows}
        written.append(prefix.with_suffix(".json"))
        written[-1].write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        series = {"aer": self.aers(), **{
            f"{name}_aer": [r.subset[name].aer for r in self.reports] for name in self.reports[0].subset
        }} if self.reports else {"aer": []}
        xy = Path(f"{prefix}.xy.tsv")
        _write_table(xy, [{self.axis: v, **{k: s[i] for k, s in series.items()}} for i, v in enumerate(self.values)])
        written.append(xy)
        if plots:
            written.append(_plot(Path(f"{prefix}.png"), self.axis, self.values, series))
        return written


def _write_table(path: Path, rows: list[dict]) -> Path:
    cols = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in cols])
    return path


def _plot(path: Path, axis: str, xs, series: dict[str, list[float]]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel({"layer": "alignment layer c", "depth": "cross-attention layers n"}.get(axis, axis))
    ax.set_ylabel("AER")
    ax.set_xticks(list(xs))
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def layer_sweep(
    model: CrossAlignModel,
    pairs: Sequence[SentencePair],
    tau: float,
    subsets: dict | None = None,
    golds: Sequence[AlignmentSet] | None = None,
    batch_size: int = 32,
) -> SweepReport:
    """Evaluate every tap layer 0..m+n from a single forward pass per batch."""
    gold = _gold_of(pairs, golds)
    layers = list(range(model.config.n_layers + 1))
    preds = align_corpus(pairs, model, layers, tau, batch_size)
    reports = [EvalReport.from_predictions(preds[c], gold, subsets) for c in layers]
    report = SweepReport("layer", layers, reports)
    logger.info("layer sweep: best layer %d (AER %.4f)", report.best, min(report.aers()))
    return report


def depth_ablation(
    train_pairs: Sequence[SentencePair],
    dev_pairs: Sequence[SentencePair],
    vocab: Vocab,
    model_cfg: ModelConfig,
    train_cfg,
    depths: Sequence[int],
    tau: float | None = None,
    subsets: dict | None = None,
    seed: int = 0,
) -> SweepReport:
    """Retrain stage 1 for each cross-attention depth ``n`` with ``m + n`` held fixed.

    Each depth is scored at its own best tap layer (1..m+n) on ``dev_pairs``.
    The trained models are kept in ``report.models`` keyed by depth.
    """
    from .training import train_stage1

    total = model_cfg.n_layers
    tau = model_cfg.tau_stage1 if tau is None else tau
    reports, notes, models = [], [], {}
    for n in depths:
        if not 0 <= n <= total:
            raise ValueError(f"depth {n} outside [0, {total}] for m+n={total}")
        cfg = model_cfg.replace(m=total - n, n=n, align_layer=min(model_cfg.align_layer, total))
        trained = train_stage1(train_pairs, CrossAlignModel(cfg, seed=seed), vocab, train_cfg).model
        sweep = layer_sweep(trained, dev_pairs, tau, subsets)
        best = min(range(1, total + 1), key=lambda c: (sweep.reports[c].aer, c))
        reports.append(sweep.reports[best])
        notes.append({"best_layer": best})
        models[n] = trained
        logger.info("depth n=%d: best layer %d, AER %.4f", n, best, sweep.reports[best].aer)
    return SweepReport("depth", list(depths), reports, notes, models)


ABLATION_ROWS = ("None", "+TLM", "++SSA")


@dataclass
class AblationReport:
    """Untrained, stage-1 and stage-2 models scored at the configured alignment layer."""

    layer: int
    taus: tuple[float, float, float]
    reports: list[EvalReport]
    models: list = field(default_factory=list, repr=False)

    def rows(self) -> list[dict]:
        return [
            {"objective": name, "layer": self.layer, "tau": tau, **r.summary()}
            for name, tau, r in zip(ABLATION_ROWS, self.taus, self.reports)
        ]

    def aer(self, row: str) -> float:
        return self.reports[ABLATION_ROWS.index(row)].aer

    def write(self, path_prefix: str | Path) -> list[Path]:
        prefix = Path(path_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        rows = self.rows()
        table = _write_table(prefix.with_suffix(".tsv"), rows)
        summary = prefix.with_suffix(".json")
        summary.write_text(json.dumps({"rows": rows}, indent=1, sort_keys=True) + "\n")
        return [table, summary]


def ablation_table(
    train_pairs: Sequence[SentencePair],
    dev_pairs: Sequence[SentencePair],
    vocab: Vocab,
    model_cfg: ModelConfig,
    stage1_cfg,
    stage2_cfg,
    subsets: dict | None = None,
    seed: int = 0,
    cache_dir: str | Path | None = None,
    stage1: CrossAlignModel | None = None,
) -> AblationReport:
    """None / +TLM / ++SSA rows from one seeded run of both training stages.

    The untrained and stage-1 rows extract with ``tau_stage1``, the stage-2 row
    with ``tau_stage2``; SSA labels come from the stage-1 model at ``tau_stage1``.
    Pass ``stage1`` to reuse a model already trained from the ``seed`` init.
    """
    from .training import generate_ssa_labels, train_stage1, train_stage2

    c = model_cfg.align_layer
    tau1, tau2 = model_cfg.tau_stage1, model_cfg.tau_stage2
    untrained = CrossAlignModel(model_cfg, seed=seed)
    if stage1 is None:
        stage1 = train_stage1(train_pairs, untrained, vocab, stage1_cfg).model
    labels = generate_ssa_labels(stage1, train_pairs, c, tau1, stage2_cfg.symmetric_anchor, cache_dir)
    stage2 = train_stage2(stage1, train_pairs, c, stage2_cfg, labels).model
    models = [untrained, stage1, stage2]
    taus = (tau1, tau1, tau2)
    reports = [evaluate_corpus(m, dev_pairs, c, t, subsets=subsets) for m, t in zip(models, taus)]
    return AblationReport(c, taus, reports, models)
