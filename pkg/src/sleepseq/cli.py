"""Command-line workflow: prepare, train, evaluate, score, export-attention.

``prepare`` turns paired ``*-PSG.edf`` / ``*-Hypnogram.edf`` files into
per-recording epoch files plus a subject fold plan; ``train`` runs
teacher-forced cross-validation training; ``evaluate`` pools inference
results into one report; ``score`` writes a machine hypnogram (and
attention matrices) for a single recording; ``export-attention`` writes
just the attention matrices.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes an effective ``config.json`` into its output
directory and never writes outside it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import edf
from .array_store import StoreError
from .autodiff import NumericError
from .metrics import MetricsError, MetricsReport, aggregate_folds, confusion
from .model import ModelConfig, SleepScorer
from .pipeline import (
    CLASS_NAMES,
    FoldPlan,
    LabeledEpoch,
    PipelineError,
    class_counts,
    make_sequences,
    normalize_epoch,
    read_epoch_file,
    segment_epochs,
    smote_oversample,
    split_folds,
    synthetic_sequences,
    trim_wake,
    write_epoch_file,
)
from .training import Trainer, TrainLog, predict_sequences

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

VARIANT_FOLDS = {"sleep-edf-13": 20, "sleep-edf-18": 10}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Effective settings for a command; defaults follow the training recipe
    (lr 1e-4, L2 beta 1e-3, batch 20, up to 400 training epochs, 20 folds
    for the 2013 corpus / 10 for 2018)."""

    channel: str = "EEG Fpz-Cz"
    variant: str = "sleep-edf-13"
    k: int | None = None
    maxtime: int = 10
    loss: str = "mfe"
    l2_beta: float = 0.001
    lr: float = 0.0001
    batch_size: int = 20
    max_epochs: int = 400
    max_steps: int | None = None
    smote: bool = True
    smote_k: int = 5
    trim_wake: bool = False
    intra_patient: bool = False
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int | None = None
    model: dict | None = None  # ModelConfig overrides; None = defaults

    def folds(self, n_subjects: int) -> int:
        k = self.k if self.k is not None else VARIANT_FOLDS.get(self.variant, 20)
        return min(k, n_subjects)

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig.from_dict(self.model) if self.model else ModelConfig()
        cfg.maxtime = self.maxtime
        return cfg

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for name in ("channel", "variant", "k", "maxtime", "loss", "l2_beta", "lr",
                 "batch_size", "max_epochs", "max_steps", "smote_k", "seed",
                 "log_every", "checkpoint_every"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    for flag in ("smote", "trim_wake", "intra_patient"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    if getattr(args, "model_config", None):
        with open(args.model_config, encoding="utf-8") as fh:
            cfg.model = json.load(fh)
    return cfg


def _write_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")


SUBJECT_RE = re.compile(r"^S[A-Z]\d\d\d")


def subject_from_base(base: str) -> str:
    """Sleep-EDF style names encode subject in the first five characters
    (night and montage digits follow); anything else is its own subject."""
    if SUBJECT_RE.match(base):
        return base[:5]
    return base


def pair_recordings(data_dir: Path, manifest: Path | None = None
                    ) -> list[tuple[Path, Path, str, str]]:
    """Match ``*-PSG.edf`` with ``*-Hypnogram.edf`` by shared prefix.

    Returns (psg_path, hypnogram_path, subject_id, base_name) tuples.  A
    manifest file (psg<TAB>hypnogram<TAB>subject lines) overrides the
    convention.
    """
    if manifest is not None:
        pairs = []
        with open(manifest, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                psg, hyp, subject = line.split("\t")
                pairs.append((data_dir / psg, data_dir / hyp, subject, Path(psg).stem))
        return pairs

    psgs = sorted(data_dir.glob("*-PSG.edf"))
    hyps = sorted(data_dir.glob("*-Hypnogram.edf"))
    if not psgs:
        raise PipelineError(f"no *-PSG.edf files in {data_dir}")
    pairs = []
    for psg in psgs:
        base = psg.name[: -len("-PSG.edf")]
        stem = base[:-1]
        matches = [h for h in hyps if h.name[: -len("-Hypnogram.edf")][:-1] == stem]
        if len(matches) != 1:
            raise PipelineError(
                f"{psg.name}: expected exactly one matching hypnogram, found {len(matches)}"
            )
        pairs.append((psg, matches[0], subject_from_base(base), base))
    return pairs


def cmd_prepare(cfg: RunConfig, data_dir: Path, out_dir: Path,
                manifest: Path | None = None) -> int:
    pairs = pair_recordings(data_dir, manifest)
    _write_config(cfg, out_dir)
    totals = dict.fromkeys(range(len(CLASS_NAMES)), 0)
    subjects = []
    for psg_path, hyp_path, subject, base in pairs:
        recording = edf.parse_edf(psg_path.read_bytes())
        annotations = edf.parse_hypnogram(hyp_path.read_bytes())
        signal, rate = edf.select_channel(recording, cfg.channel)
        epochs = segment_epochs(signal, rate, annotations, subject_id=subject)
        if cfg.trim_wake:
            epochs = trim_wake(epochs)
        epochs = [normalize_epoch(e) for e in epochs]
        if not epochs:
            logger.warning("%s: no scoreable epochs, skipping", base)
            continue
        write_epoch_file(out_dir / f"{base}.epochs", epochs, subject_id=subject,
                         sampling_rate=rate, channel=cfg.channel, recording=base)
        subjects.append(subject)
        for cls, n in class_counts(epochs).items():
            totals[cls] += n
        logger.info("%s: %d epochs (subject %s)", base, len(epochs), subject)

    if not subjects:
        raise PipelineError("no recordings produced any scoreable epochs")
    plan = split_folds(subjects, cfg.folds(len(set(subjects))), seed=cfg.seed)
    plan.save(out_dir / "fold_plan.tsv")

    lines = ["class counts:"]
    lines += [f"  {CLASS_NAMES[c]:>4} {totals[c]}" for c in sorted(totals)]
    lines.append(f"  total {sum(totals.values())}")
    summary = "\n".join(lines)
    (out_dir / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    return EXIT_OK


def _load_prepared(data_dir: Path) -> tuple[list[tuple[list[LabeledEpoch], dict]], FoldPlan]:
    files = sorted(data_dir.glob("*.epochs"))
    if not files:
        raise PipelineError(f"no .epochs files in {data_dir}; run prepare first")
    recordings = [read_epoch_file(path) for path in files]
    plan = FoldPlan.load(data_dir / "fold_plan.tsv")
    return recordings, plan


def _fold_sequences(recordings, plan: FoldPlan, fold: int, cfg: RunConfig):
    """(train_sequences, test_sequences, test_subjects) for one fold.

    Subject-wise by default; with ``intra_patient`` the sequences of all
    recordings are dealt round-robin across folds (comparison mode only).
    """
    train_seqs, test_seqs = [], []
    test_subjects: set[str] = set()
    if cfg.intra_patient:
        all_seqs = []
        for epochs, _meta in recordings:
            all_seqs.extend(make_sequences(epochs, cfg.maxtime))
        order = np.random.default_rng(cfg.seed).permutation(len(all_seqs))
        for i, j in enumerate(order):
            (test_seqs if i % plan.k == fold else train_seqs).append(all_seqs[j])
        return train_seqs, test_seqs, set()

    test_set = set(plan.subjects(fold))
    for epochs, meta in recordings:
        seqs = make_sequences(epochs, cfg.maxtime)
        if meta["subject_id"] in test_set:
            test_seqs.extend(seqs)
            test_subjects.add(meta["subject_id"])
        else:
            train_seqs.extend(seqs)
    return train_seqs, test_seqs, test_subjects


def _train_epoch_pool(recordings, plan: FoldPlan, fold: int, cfg: RunConfig):
    test_set = set(plan.subjects(fold))
    pool = []
    for epochs, meta in recordings:
        if meta["subject_id"] not in test_set:
            pool.extend(epochs)
    return pool


def cmd_train(cfg: RunConfig, data_dir: Path, out_dir: Path,
              folds: list[int] | None = None, resume: bool = False) -> int:
    recordings, plan = _load_prepared(data_dir)
    _write_config(cfg, out_dir)
    fold_ids = folds if folds is not None else list(range(plan.k))
    for fold in fold_ids:
        fold_dir = out_dir / f"fold_{fold:02d}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        train_seqs, _test, _subjects = _fold_sequences(recordings, plan, fold, cfg)

        if cfg.smote and not cfg.intra_patient:
            pool = _train_epoch_pool(recordings, plan, fold, cfg)
            augmented = smote_oversample(pool, k_neighbors=cfg.smote_k, seed=cfg.seed)
            synthetic = [e for e in augmented if e.synthetic]
            train_seqs = train_seqs + synthetic_sequences(synthetic, cfg.maxtime)
            logger.info("fold %d: %d synthetic epochs added", fold, len(synthetic))

        if not train_seqs:
            raise PipelineError(f"fold {fold}: no training sequences")

        model = SleepScorer(cfg.model_config(), seed=cfg.seed)
        trainer = Trainer(model, lr=cfg.lr, l2_beta=cfg.l2_beta, loss_name=cfg.loss,
                          batch_size=cfg.batch_size, seed=cfg.seed)
        log = TrainLog()
        final_path = fold_dir / "final.ckpt"
        if resume and final_path.exists():
            meta = trainer.load_checkpoint(final_path)
            logger.info("fold %d: resumed at step %d", fold, trainer.step)
            if (fold_dir / "train_log.tsv").exists():
                log = TrainLog.load(fold_dir / "train_log.tsv")

        trainer.train(train_seqs, max_steps=cfg.max_steps, max_epochs=cfg.max_epochs,
                      log=log, log_every=cfg.log_every,
                      checkpoint_every=cfg.checkpoint_every, checkpoint_dir=fold_dir)
        trainer.save_checkpoint(final_path)
        log.save(fold_dir / "train_log.tsv")
        logger.info("fold %d: finished at step %d", fold, trainer.step)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, data_dir: Path, run_dir: Path, out_dir: Path) -> int:
    recordings, plan = _load_prepared(data_dir)
    _write_config(cfg, out_dir)
    fold_results = []
    for fold in range(plan.k):
        ckpt_path = run_dir / f"fold_{fold:02d}" / "final.ckpt"
        if not ckpt_path.exists():
            raise PipelineError(f"missing checkpoint for fold {fold}: {ckpt_path}")
        _train, test_seqs, subjects = _fold_sequences(recordings, plan, fold, cfg)
        if not test_seqs:
            logger.warning("fold %d: no test sequences", fold)
            continue
        model = SleepScorer(cfg.model_config(), seed=cfg.seed)
        trainer = Trainer(model, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed)
        trainer.load_checkpoint(ckpt_path)
        preds, truths = predict_sequences(model, test_seqs)
        fold_results.append((preds.reshape(-1), truths.reshape(-1),
                             sorted(subjects) if subjects else None))

    if not fold_results:
        raise PipelineError("no folds produced test predictions")
    cm, report = aggregate_folds(fold_results)
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(report.format_text() + "\n", encoding="utf-8")
    np.savetxt(out_dir / "confusion.tsv", cm, fmt="%d", delimiter="\t")
    print(report.format_text())
    return EXIT_OK


def _scoring_epochs(cfg: RunConfig, psg_path: Path, hyp_path: Path | None):
    """Normalized epochs (+ expert labels when a hypnogram is given)."""
    recording = edf.parse_edf(psg_path.read_bytes())
    signal, rate = edf.select_channel(recording, cfg.channel)
    if hyp_path is not None:
        annotations = edf.parse_hypnogram(hyp_path.read_bytes())
        epochs = segment_epochs(signal, rate, annotations)
        truth = np.array([e.label for e in epochs])
    else:
        spe = int(round(rate * 30))
        n = len(signal) // spe
        epochs = [LabeledEpoch(samples=signal[i * spe : (i + 1) * spe], label=0, position=i)
                  for i in range(n)]
        truth = None
    return [normalize_epoch(e) for e in epochs], truth


def _score_windows(model: SleepScorer, epochs, maxtime: int):
    """Predict a stage for every epoch: full windows plus a padded tail.

    Returns (labels per epoch, attention matrices per window).  The tail
    window repeats the last epoch to fill maxtime; padded positions are
    dropped from the output.
    """
    preds = np.zeros(len(epochs), dtype=np.int64)
    attention = []
    windows = []
    for start in range(0, len(epochs), maxtime):
        chunk = epochs[start : start + maxtime]
        valid = len(chunk)
        if valid < maxtime:
            chunk = chunk + [chunk[-1]] * (maxtime - valid)
        windows.append((start, valid, chunk))
    for start, valid, chunk in windows:
        x = np.stack([e.samples for e in chunk])[None, :, :]
        states = model.encode_epochs(x, training=False)
        labels, records = model.decode_inference(states)
        preds[start : start + valid] = labels[0, :valid]
        weights = np.stack([r.weights[0] for r in records])  # (steps, maxtime)
        attention.append((start, valid, weights))
    return preds, attention


def _write_attention(out_dir: Path, attention) -> int:
    att_dir = out_dir / "attention"
    att_dir.mkdir(parents=True, exist_ok=True)
    for i, (start, _valid, weights) in enumerate(attention):
        path = att_dir / f"seq_{i:04d}.tsv"
        header = "\t".join(f"epoch_{start + j}" for j in range(weights.shape[1]))
        np.savetxt(path, weights, fmt="%.6f", delimiter="\t", header=header)
    return len(attention)


def cmd_score(cfg: RunConfig, psg_path: Path, checkpoint_path: Path, out_dir: Path,
              hyp_path: Path | None = None) -> int:
    _write_config(cfg, out_dir)
    model, cfg = _model_from_checkpoint(cfg, checkpoint_path)
    epochs, truth = _scoring_epochs(cfg, psg_path, hyp_path)
    if not epochs:
        raise PipelineError(f"{psg_path}: no scoreable epochs")
    preds, attention = _score_windows(model, epochs, cfg.maxtime)

    with open(out_dir / "hypnogram.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\tonset_s\tstage" + ("\texpert\n" if truth is not None else "\n"))
        for i, epoch in enumerate(epochs):
            row = f"{epoch.position}\t{epoch.position * 30}\t{CLASS_NAMES[preds[i]]}"
            if truth is not None:
                row += f"\t{CLASS_NAMES[truth[i]]}"
            fh.write(row + "\n")

    if truth is not None:
        agreement = 100.0 * float((preds == truth).mean())
        cm = confusion(preds, truth)
        report = MetricsReport.from_confusion(cm)
        (out_dir / "agreement.txt").write_text(
            f"agreement {agreement:.2f}%\n\n{report.format_text()}\n", encoding="utf-8")
        print(f"agreement with expert hypnogram: {agreement:.2f}%")

    n = _write_attention(out_dir, attention)
    logger.info("wrote %d predicted stages and %d attention matrices", len(preds), n)
    return EXIT_OK


def cmd_export_attention(cfg: RunConfig, psg_path: Path, checkpoint_path: Path,
                         out_dir: Path, hyp_path: Path | None = None,
                         max_sequences: int | None = None) -> int:
    _write_config(cfg, out_dir)
    model, cfg = _model_from_checkpoint(cfg, checkpoint_path)
    epochs, _truth = _scoring_epochs(cfg, psg_path, hyp_path)
    if not epochs:
        raise PipelineError(f"{psg_path}: no scoreable epochs")
    _preds, attention = _score_windows(model, epochs, cfg.maxtime)
    if max_sequences is not None:
        attention = attention[:max_sequences]
    n = _write_attention(out_dir, attention)
    print(f"wrote {n} attention matrices to {out_dir / 'attention'}")
    return EXIT_OK


def _model_from_checkpoint(cfg: RunConfig, checkpoint_path: Path):
    """Build the model from the architecture stored in the checkpoint."""
    from .checkpoint import load_checkpoint, restore_params

    arrays, meta = load_checkpoint(checkpoint_path)
    if "model_config" in meta:
        model_cfg = ModelConfig.from_json(meta["model_config"])
        cfg = dataclasses.replace(cfg, maxtime=model_cfg.maxtime)
    else:
        model_cfg = cfg.model_config()
    model = SleepScorer(model_cfg, seed=cfg.seed)
    restore_params(model.params, arrays)
    return model, cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sleepseq",
        description="Sequence-to-sequence sleep stage scoring toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--channel")
        p.add_argument("--variant", choices=sorted(VARIANT_FOLDS))
        p.add_argument("--k", type=int)
        p.add_argument("--maxtime", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--model-config", type=Path, help="JSON model architecture file")

    prep = sub.add_parser("prepare", help="segment and normalize raw recordings")
    add_common(prep)
    prep.add_argument("--data", type=Path, required=True, help="directory of EDF pairs")
    prep.add_argument("--out", type=Path, required=True)
    prep.add_argument("--manifest", type=Path, help="explicit psg/hypnogram/subject pairing")
    prep.add_argument("--trim-wake", action="store_true", default=None,
                      help="keep at most 30 min of wake around sleep")

    train = sub.add_parser("train", help="cross-validation training")
    add_common(train)
    train.add_argument("--data", type=Path, required=True, help="prepared dataset directory")
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--fold", type=int, action="append", dest="folds",
                       help="train only these folds (repeatable)")
    train.add_argument("--loss", choices=("mfe", "msfe", "mse"))
    train.add_argument("--lr", type=float)
    train.add_argument("--l2-beta", type=float, dest="l2_beta")
    train.add_argument("--batch-size", type=int, dest="batch_size")
    train.add_argument("--max-epochs", type=int, dest="max_epochs")
    train.add_argument("--max-steps", type=int, dest="max_steps")
    train.add_argument("--log-every", type=int, dest="log_every")
    train.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    train.add_argument("--no-smote", action="store_false", dest="smote", default=None)
    train.add_argument("--smote-k", type=int, dest="smote_k")
    train.add_argument("--intra-patient", action="store_true", default=None,
                       help="epoch-level folds (comparison mode; leaks subjects)")
    train.add_argument("--resume", action="store_true")

    ev = sub.add_parser("evaluate", help="pooled inference metrics across folds")
    add_common(ev)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--run", type=Path, required=True, help="training output directory")
    ev.add_argument("--out", type=Path, help="default: RUN/eval")
    ev.add_argument("--intra-patient", action="store_true", default=None)

    score = sub.add_parser("score", help="score one recording with a checkpoint")
    add_common(score)
    score.add_argument("--psg", type=Path, required=True)
    score.add_argument("--checkpoint", type=Path, required=True)
    score.add_argument("--out", type=Path, required=True)
    score.add_argument("--hypnogram", type=Path, help="expert hypnogram for overlay")

    att = sub.add_parser("export-attention", help="write attention heatmap data")
    add_common(att)
    att.add_argument("--psg", type=Path, required=True)
    att.add_argument("--checkpoint", type=Path, required=True)
    att.add_argument("--out", type=Path, required=True)
    att.add_argument("--hypnogram", type=Path)
    att.add_argument("--max-sequences", type=int, dest="max_sequences")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    try:
        cfg = _load_config(args)
        if args.command == "prepare":
            return cmd_prepare(cfg, args.data, args.out, manifest=args.manifest)
        if args.command == "train":
            return cmd_train(cfg, args.data, args.out, folds=args.folds, resume=args.resume)
        if args.command == "evaluate":
            out = args.out if args.out is not None else args.run / "eval"
            return cmd_evaluate(cfg, args.data, args.run, out)
        if args.command == "score":
            return cmd_score(cfg, args.psg, args.checkpoint, args.out, hyp_path=args.hypnogram)
        if args.command == "export-attention":
            return cmd_export_attention(cfg, args.psg, args.checkpoint, args.out,
                                        hyp_path=args.hypnogram,
                                        max_sequences=args.max_sequences)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (edf.EdfError, PipelineError, MetricsError, StoreError, KeyError,
            FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
