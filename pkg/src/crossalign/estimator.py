"""scikit-learn style wrapper around the two-stage training recipe."""

from __future__ import annotations

from collections.abc import Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import AlignmentSet, CorpusError, build_vocab, make_pairs
from .evaluation import aer_counts
from .extraction import align_corpus
from .model import CrossAlignModel, ModelConfig
from .training import TrainConfig, generate_ssa_labels, train_stage1, train_stage2


def check_pairs(X) -> list[tuple[str, str]]:
    """Accept any sequence of ``(source, target)`` whitespace-tokenized strings."""
    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence):
        raise TypeError(f"X must be a sequence of (source, target) string pairs, got {type(X).__name__}")
    out = []
    for k, item in enumerate(X):
        if len(item) != 2 or not all(isinstance(s, str) for s in item):
            raise ValueError(f"X[{k}] is not a (source, target) string pair: {item!r}")
        if not item[0].split() or not item[1].split():
            raise ValueError(f"X[{k}] has an empty side")
        out.append((item[0], item[1]))
    if not out:
        raise ValueError("X is empty")
    return out


class CrossAligner(BaseEstimator):
    """Unsupervised word aligner.

    ``fit`` learns a subword vocabulary, runs masked-LM pretraining on the
    pairs (stage 1) and, when ``self_training`` is set, fine-tunes the tap
    layer on its own extracted alignments (stage 2). ``predict`` returns one
    :class:`AlignmentSet` of word links per pair.

    ``align_layer=None`` taps the last self-attention layer (or layer 1 when
    ``m == 0``). ``tau=None`` uses the model's threshold for the final stage.
    """

    def __init__(
        self,
        m: int = 4,
        n: int = 2,
        d_model: int = 64,
        n_heads: int = 4,
        align_layer: int | None = None,
        vocab_size: int = 700,
        dropout: float = 0.1,
        stage1_epochs: int = 2,
        stage2_epochs: int = 1,
        stage1_lr: float = 5e-4,
        stage2_lr: float = 1e-5,
        batch_size: int = 12,
        grad_accum: int = 4,
        self_training: bool = True,
        tau: float | None = None,
        max_positions: int = 64,
        seed: int = 0,
    ):
        self.m = m
        self.n = n
        self.d_model = d_model
        self.n_heads = n_heads
        self.align_layer = align_layer
        self.vocab_size = vocab_size
        self.dropout = dropout
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.batch_size = batch_size
        self.grad_accum = grad_accum
        self.self_training = self_training
        self.tau = tau
        self.max_positions = max_positions
        self.seed = seed

    def _model_config(self, n_types: int) -> ModelConfig:
        layer = self.align_layer if self.align_layer is not None else max(self.m, 1)
        return ModelConfig(
            vocab_size=n_types, m=self.m, n=self.n, d_model=self.d_model, n_heads=self.n_heads,
            max_positions=self.max_positions, align_layer=layer, dropout=self.dropout,
        )

    def _train_config(self, stage: int) -> TrainConfig:
        epochs, lr = (self.stage1_epochs, self.stage1_lr) if stage == 1 else (self.stage2_epochs, self.stage2_lr)
        return TrainConfig(stage=stage, lr=lr, epochs=epochs, batch_size=self.batch_size,
                           grad_accum=self.grad_accum, seed=self.seed)

    def fit(self, X, y=None):
        """Train on unlabeled pairs; ``y`` is ignored."""
        raw = check_pairs(X)
        self.vocab_ = build_vocab(raw, self.vocab_size)
        cfg = self._model_config(len(self.vocab_))
        pairs = make_pairs(raw, self.vocab_, max_len=cfg.max_positions - 2)
        result = train_stage1(pairs, CrossAlignModel(cfg, seed=self.seed), self.vocab_, self._train_config(1))
        self.history_ = {"stage1": result.losses}
        model = result.model
        if self.self_training:
            labels = generate_ssa_labels(model, pairs, cfg.align_layer, cfg.tau_stage1)
            result = train_stage2(model, pairs, cfg.align_layer, self._train_config(2), labels)
            self.history_["stage2"] = result.losses
            model = result.model
        self.model_ = model.eval()
        self.layer_ = cfg.align_layer
        default_tau = cfg.tau_stage2 if self.self_training else cfg.tau_stage1
        self.tau_ = default_tau if self.tau is None else self.tau
        return self

    def predict(self, X) -> list[AlignmentSet]:
        check_is_fitted(self, "model_")
        pairs = make_pairs(check_pairs(X), self.vocab_, max_len=self.model_.config.max_positions - 2)
        return align_corpus(pairs, self.model_, self.layer_, self.tau_)[self.layer_]

    def score(self, X, y) -> float:
        """``1 - AER`` of the predictions against gold ``AlignmentSet`` objects."""
        if len(y) != len(X):
            raise CorpusError(f"{len(X)} pairs but {len(y)} gold alignments")
        return 1.0 - aer_counts(self.predict(X), list(y)).aer
