"""Command-line entry point: ``crossalign {synth,train,align,eval,sweep}``.

Settings resolve in three layers: built-in defaults, then the YAML file given
by ``--config``, then explicit command-line flags. Every command writes a run
manifest next to its outputs recording the resolved settings.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import yaml

from . import __version__
from .corpus import (
    CorpusError,
    Vocab,
    build_vocab,
    make_pairs,
    parse_gold_alignments,
    read_parallel,
    write_alignments,
)
from .evaluation import EvalReport, aer_counts, depth_ablation, layer_sweep
from .extraction import align_corpus, write_probability_dump
from .model import CrossAlignModel, ModelConfig, load_checkpoint, save_checkpoint
from .synthgen import SynthSpec, generate
from .training import TrainConfig, TrainingDiverged, generate_ssa_labels, train_stage1, train_stage2

logger = logging.getLogger("crossalign")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULT_VOCAB_SIZE = 700


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: list[str]
    seed: int
    version: str
    git: str | None
    timings: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def _git_stamp() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def _manifest_path(out: Path) -> Path:
    """``<dir>/run.json`` for directory outputs, ``<file>.run.json`` otherwise."""
    return out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")


# --- configuration -------------------------------------------------------------

def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if data is None:
        raise UsageError(f"config file {path} is empty")
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping, got {type(data).__name__}")
    return data


def _section(cfg: dict, name: str) -> dict:
    value = cfg.get(name) or {}
    if not isinstance(value, dict):
        raise UsageError(f"config section {name!r} must be a mapping")
    return dict(value)


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _train_config(args, cfg: dict, stage: int, seed: int) -> TrainConfig:
    values = _override(
        _section(cfg, f"stage{stage}"),
        lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, grad_accum=args.grad_accum,
    )
    values["stage"] = stage
    values["seed"] = seed
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad stage{stage} settings: {exc}") from None


def _model_config(args, cfg: dict, vocab_size: int) -> ModelConfig:
    values = _override(_section(cfg, "model"), m=getattr(args, "m", None), n=getattr(args, "n", None))
    if getattr(args, "layer", None) is not None:
        values["align_layer"] = args.layer
    elif cfg.get("layer") is not None:
        values["align_layer"] = cfg["layer"]
    values["vocab_size"] = vocab_size
    if "align_layer" not in values:
        # the class default assumes the full-size stack; clamp it for small models
        depth = values.get("m", ModelConfig.m) + values.get("n", ModelConfig.n)
        values["align_layer"] = min(ModelConfig.align_layer, max(depth, 1))
    try:
        return ModelConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model settings: {exc}") from None


def _max_len(cfg: dict, mcfg: ModelConfig) -> int:
    """Pieces kept per sentence; [CLS] and [SEP] take the remaining two positions."""
    limit = mcfg.max_positions - 2
    return min(int(cfg.get("max_len", limit)), limit)


def _corpus_file(path: str, name: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / name
    if not p.exists():
        raise FileNotFoundError(f"corpus file {p} not found")
    return p


# --- commands ---------------------------------------------------------------------

def cmd_synth(args, cfg: dict) -> RunManifest:
    values = _section(cfg, "synth")
    if args.spec is not None:
        spec_data = load_config(args.spec)
        values.update(spec_data.get("synth", spec_data))
    if args.seed is not None:
        values["seed"] = args.seed
    elif "seed" not in values:
        values["seed"] = int(cfg.get("seed", 0))
    try:
        spec = SynthSpec.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synthetic corpus spec: {exc}") from None
    out = Path(args.out)
    generate(spec).write(out)
    files = sorted(str(p) for p in out.iterdir() if p.name != "run.json")
    return RunManifest("synth", {"synth": asdict(spec)}, {"spec": args.spec}, files, spec.seed, __version__, _git_stamp())


def cmd_train(args, cfg: dict) -> RunManifest:
    seed = _seed(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus_path = _corpus_file(args.corpus, "train.txt")
    raw = read_parallel(corpus_path)
    timings = {}
    if args.stage == 2:
        if args.stage1_ckpt is None:
            raise UsageError("stage 2 needs --stage1-ckpt")
        model, vocab, extra = load_checkpoint(args.stage1_ckpt)
        if vocab is None:
            raise CorpusError(f"{args.stage1_ckpt} carries no vocabulary")
        if args.layer is not None:
            model.config = model.config.replace(align_layer=args.layer)
        layer = model.config.align_layer
        pairs = make_pairs(raw, vocab, max_len=_max_len(cfg, model.config))
        tcfg = _train_config(args, cfg, 2, seed)
        t0 = time.perf_counter()
        labels = generate_ssa_labels(model, pairs, layer, model.config.tau_stage1, tcfg.symmetric_anchor)
        timings["labels_s"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        result = train_stage2(model, pairs, layer, tcfg, labels, log_path=out / "train_log.jsonl")
        timings["train_s"] = time.perf_counter() - t0
        resolved = {"stage2": asdict(tcfg), "model": asdict(model.config), "labels_key": labels.key}
        inputs = {"corpus": str(corpus_path), "stage1_ckpt": str(args.stage1_ckpt)}
    else:
        vocab_size = int(args.vocab_size or cfg.get("vocab_size", DEFAULT_VOCAB_SIZE))
        vocab = build_vocab(raw, vocab_size)
        mcfg = _model_config(args, cfg, len(vocab))
        max_len = _max_len(cfg, mcfg)
        pairs = make_pairs(raw, vocab, max_len=max_len)
        tcfg = _train_config(args, cfg, 1, seed)
        t0 = time.perf_counter()
        result = train_stage1(pairs, CrossAlignModel(mcfg, seed=seed), vocab, tcfg, log_path=out / "train_log.jsonl")
        timings["train_s"] = time.perf_counter() - t0
        resolved = {"stage1": asdict(tcfg), "model": asdict(mcfg), "vocab_size": vocab_size, "max_len": max_len}
        inputs = {"corpus": str(corpus_path)}
    ckpt = out / "model.safetensors"
    save_checkpoint(ckpt, result.model, vocab, {"stage": args.stage, "seed": seed})
    outputs = [str(ckpt), str(out / "train_log.jsonl")]
    return RunManifest("train", resolved, inputs, outputs, seed, __version__, _git_stamp(), timings)


def _default_tau(model: CrossAlignModel, extra: dict) -> float:
    cfg = model.config
    return cfg.tau_stage2 if extra.get("stage") == 2 else cfg.tau_stage1


def _write_heatmaps(directory: Path, matrices) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for k, mats in enumerate(matrices):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3))
        for ax, (title, mat) in zip(axes, (("forward", mats.p_fwd), ("backward", mats.p_bwd), ("G", mats.G))):
            ax.imshow(mat, vmin=0, vmax=1, cmap="viridis")
            ax.set_title(title)
            ax.set_xlabel("target piece")
            ax.set_ylabel("source piece")
        fig.tight_layout()
        path = directory / f"pair{k:05d}.png"
        fig.savefig(path, dpi=80, metadata={"Software": None})
        plt.close(fig)
        written.append(str(path))
    return written


def cmd_align(args, cfg: dict) -> RunManifest:
    model, vocab, extra = load_checkpoint(args.ckpt)
    if vocab is None:
        raise CorpusError(f"{args.ckpt} carries no vocabulary")
    layer = model.config.align_layer if args.layer is None else args.layer
    if not 0 <= layer <= model.config.n_layers:
        raise UsageError(f"--layer must lie in [0, {model.config.n_layers}], got {layer}")
    tau = _default_tau(model, extra) if args.tau is None else args.tau
    if not 0.0 <= tau < 1.0:
        raise UsageError(f"--tau must lie in [0, 1), got {tau}")
    corpus_path = _corpus_file(args.corpus, "test.txt")
    pairs = make_pairs(read_parallel(corpus_path), vocab, max_len=_max_len(cfg, model.config))
    keep = bool(args.heatmaps or args.dump)
    results = align_corpus(pairs, model, layer, tau, keep_matrices=keep)[layer]
    links = [r[0] for r in results] if keep else results
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_alignments(out, links, index_base=args.base)
    outputs = [str(out)]
    if args.dump:
        write_probability_dump(args.dump, [r[1] for r in results])
        outputs.append(str(args.dump))
    if args.heatmaps:
        outputs += _write_heatmaps(Path(args.heatmaps), [r[1] for r in results])
    resolved = {"layer": layer, "tau": tau, "base": args.base}
    return RunManifest("align", resolved, {"ckpt": str(args.ckpt), "corpus": str(corpus_path)}, outputs,
                       _seed(args, cfg), __version__, _git_stamp())


def cmd_eval(args, cfg: dict) -> RunManifest:
    pred = parse_gold_alignments(args.pred, fmt="dash-p", index_base=args.base)
    gold = parse_gold_alignments(args.gold, fmt=args.format, index_base=args.base)
    if len(pred) != len(gold):
        raise CorpusError(f"{args.pred} has {len(pred)} lines but {args.gold} has {len(gold)}")
    report = EvalReport.from_predictions(pred, gold)
    print(f"AER {report.aer:.4f}  precision {report.precision:.4f}  recall {report.recall:.4f}  "
          f"|A|={report.counts.n_pred} |S|={report.counts.n_sure}")
    outputs = []
    if args.out:
        report.write(args.out)
        outputs = [str(Path(args.out).with_suffix(".tsv")), str(Path(args.out).with_suffix(".json"))]
    return RunManifest("eval", {"base": args.base, "format": args.format}, {"pred": args.pred, "gold": args.gold},
                       outputs, _seed(args, cfg), __version__, _git_stamp())


def _ambiguity_subsets(corpus_dir: Path, split: str, n: int) -> dict | None:
    manifest = corpus_dir / "manifest.json"
    if not manifest.exists():
        return None
    positions = json.loads(manifest.read_text()).get("ambiguous", {}).get(split)
    if positions is None:
        return None
    return {"ambiguous": [positions.get(str(k), []) for k in range(n)]}


def cmd_sweep(args, cfg: dict) -> RunManifest:
    seed = _seed(args, cfg)
    corpus = Path(args.corpus)
    if not corpus.is_dir():
        raise UsageError("--corpus must be a corpus directory holding <split>.txt and <split>.gold")
    raw = read_parallel(_corpus_file(args.corpus, f"{args.split}.txt"))
    gold = parse_gold_alignments(_corpus_file(args.corpus, f"{args.split}.gold"))
    subsets = _ambiguity_subsets(corpus, args.split, len(raw))
    timings = {}
    if args.axis == "layer":
        if args.ckpt is None:
            raise UsageError("--axis layer needs --ckpt")
        model, vocab, extra = load_checkpoint(args.ckpt)
        tau = _default_tau(model, extra) if args.tau is None else args.tau
        pairs = make_pairs(raw, vocab, gold, max_len=_max_len(cfg, model.config))
        t0 = time.perf_counter()
        report = layer_sweep(model, pairs, tau, subsets)
        timings["sweep_s"] = time.perf_counter() - t0
        resolved = {"axis": "layer", "tau": tau, "split": args.split}
        inputs = {"ckpt": str(args.ckpt), "corpus": str(corpus)}
    else:
        if args.budget_epochs is None:
            raise UsageError("--axis depth retrains one model per depth; give --budget-epochs")
        if not args.depths:
            raise UsageError("--axis depth needs --depths, e.g. --depths 0,2")
        depths = [int(d) for d in args.depths.split(",")]
        train_raw = read_parallel(_corpus_file(args.corpus, "train.txt"))
        vocab = build_vocab(train_raw, int(args.vocab_size or cfg.get("vocab_size", DEFAULT_VOCAB_SIZE)))
        mcfg = _model_config(args, cfg, len(vocab))
        max_len = _max_len(cfg, mcfg)
        train_pairs = make_pairs(train_raw, vocab, max_len=max_len)
        pairs = make_pairs(raw, vocab, gold, max_len=max_len)
        args.epochs = args.budget_epochs
        tcfg = _train_config(args, cfg, 1, seed)
        tau = mcfg.tau_stage1 if args.tau is None else args.tau
        t0 = time.perf_counter()
        report = depth_ablation(train_pairs, pairs, vocab, mcfg, tcfg, depths, tau, subsets, seed=seed)
        timings["sweep_s"] = time.perf_counter() - t0
        resolved = {"axis": "depth", "depths": depths, "tau": tau, "model": asdict(mcfg), "stage1": asdict(tcfg)}
        inputs = {"corpus": str(corpus)}
    written = report.write(args.out, plots=args.plots)
    for row in report.rows():
        print("\t".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()
                        if k in (report.axis, "aer", "ambiguous_aer", "best_layer")))
    print(f"best {report.axis}: {report.best}")
    return RunManifest("sweep", resolved, inputs, [str(p) for p in written], seed, __version__, _git_stamp(), timings)


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="single source of randomness (default: config or 0)")
    common.add_argument("--config", default=None, help="YAML file with synth/model/stage1/stage2 sections")
    common.add_argument("--workers", type=int, default=1, help="CPU threads for tensor ops")
    common.add_argument("--plots", action="store_true", help="also write PNG plots")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crossalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"crossalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic parallel corpus")
    p.add_argument("--spec", default=None, help="YAML file of SynthSpec fields")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--corpus", required=True, help="parallel file or directory holding train.txt")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stage1-ckpt", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--grad-accum", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--layer", type=int, default=None, help="alignment layer c")
    p.add_argument("--m", type=int, default=None, help="self-attention layers")
    p.add_argument("--n", type=int, default=None, help="cross-attention layers")

    p = sub.add_parser("align", parents=[common], help="write Pharaoh alignments for a parallel file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True, help="parallel file or directory holding test.txt")
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--base", type=int, choices=(0, 1), default=0)
    p.add_argument("--heatmaps", default=None, help="directory for per-pair probability heatmaps")
    p.add_argument("--dump", default=None, help="file for the raw probability matrices")

    p = sub.add_parser("eval", parents=[common], help="score predicted alignments against gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--base", type=int, choices=(0, 1), default=0)
    p.add_argument("--format", choices=("dash-p", "dash"), default="dash-p")
    p.add_argument("--out", default=None, help="report prefix (.tsv and .json)")

    p = sub.add_parser("sweep", parents=[common], help="layer or cross-attention depth sweep")
    p.add_argument("--axis", choices=("layer", "depth"), required=True)
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--split", default="dev")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--depths", default=None, help="comma-separated n values, m+n fixed")
    p.add_argument("--budget-epochs", type=int, default=None, help="stage-1 epochs per depth")
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--grad-accum", type=int, default=None)
    p.add_argument("--out", required=True, help="report prefix")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "align": cmd_align, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.workers))
    try:
        cfg = load_config(args.config)
        start = time.perf_counter()
        manifest = COMMANDS[args.command](args, cfg)
        manifest.timings["total_s"] = time.perf_counter() - start
        manifest.write(_manifest_path(Path(args.out)) if getattr(args, "out", None) else Path("run.json"))
    except UsageError as exc:
        print(f"crossalign {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"crossalign {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, FileNotFoundError, ValueError, IndexError, yaml.YAMLError) as exc:
        print(f"crossalign {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
