"""Command-line front end: ``driftguard {train|adapt|eval|synth|report}``.

Run directory layout (every command writes only inside ``--out``)::

    config.echo        resolved configuration, one JSON section per command
    checkpoint.json    model weights + sidecar hyperparameters      (train)
    train_log.jsonl    one line per training epoch                  (train)
    predictions.csv    per-epoch raw/smoothed labels, probabilities (adapt)
    trace.jsonl        one line per micro-batch                     (adapt)
    summary.json       update/reset counts, backbone digests        (adapt)
    report.json        metric reports for the raw and smoothed splits (eval)
    *.csv, *.svg       confusion, transitions, reliability, timelines

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 checkpoint
mismatch, 5 label/prediction alignment error, 6 missing run artifacts.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from driftguard import __version__, dsp, edfio, metrics, svg, synth, train, tta
from driftguard.edfio import SampleSeries
from driftguard.errors import CheckpointMismatch, DriftguardError, EdfError, OnsetOutOfRange
from driftguard.nn import LN5, SleepNet, checkpoint
from driftguard.stages import EXCLUDED_CODE, STAGE_NAMES, to_code

log = logging.getLogger("driftguard")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_ALIGNMENT = 5
EXIT_ARTIFACTS = 6

ECHO_FILE = "config.echo"
CHECKPOINT_FILE = "checkpoint.json"
PREDICTIONS_FILE = "predictions.csv"
TRACE_FILE = "trace.jsonl"
REPORT_FILE = "report.json"
SPLITS = ("raw", "smoothed")
# stored in the checkpoint sidecar by train, reused verbatim by adapt
ADAPT_KEYS = (
    "micro_batch", "bn_momentum", "tta_lr", "sgd_momentum", "h_min", "h_max",
    "ema_entropy_momentum", "snapshot_decay", "drift_delta", "gate_streak_reset", "median_width",
)
PREPROCESS_KEYS = ("channel", "notch_hz", "notch_q", "band_lo", "band_hi", "strict_prior")
# checked after merging the config file, so a bare --config can supply them
REQUIRED = {
    "train": ("out",),
    "adapt": ("out", "checkpoint", "data"),
    "eval": ("run",),
    "synth": ("out",),
    "report": ("runs", "out"),
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- parsing


def _add_preprocess(p):
    p.add_argument("--channel", default=None, help="EEG signal label; default: first ordinary signal")
    p.add_argument("--notch-hz", type=float, nargs="*", default=[50.0, 60.0], help="mains notches (skipped at or above Nyquist)")
    p.add_argument("--notch-q", type=float, default=30.0)
    p.add_argument("--band-lo", type=float, default=0.3)
    p.add_argument("--band-hi", type=float, default=45.0)
    p.add_argument("--strict-prior", action="store_true", help="standardize each epoch with earlier epochs only")


def _add_adapt_hparams(p):
    d = tta.AdaptConfig()
    p.add_argument("--micro-batch", type=int, default=d.micro_batch)
    p.add_argument("--bn-momentum", type=float, default=d.bn_momentum)
    p.add_argument("--tta-lr", type=float, default=d.tta_lr)
    p.add_argument("--sgd-momentum", type=float, default=d.sgd_momentum)
    p.add_argument("--h-min", type=float, default=d.h_min, help="lower gate bound in nats (0.05 ln 5)")
    p.add_argument("--h-max", type=float, default=d.h_max, help="upper gate bound in nats (0.9 ln 5)")
    p.add_argument("--ema-entropy-momentum", type=float, default=d.ema_entropy_momentum)
    p.add_argument("--snapshot-decay", type=float, default=d.snapshot_decay)
    p.add_argument("--drift-delta", type=float, default=d.drift_delta)
    p.add_argument("--gate-streak-reset", type=int, default=d.gate_streak_reset)
    p.add_argument("--median-width", type=int, default=d.median_width)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="driftguard", description="Streaming test-time adaptation for EEG sleep staging.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a source model", formatter_class=fmt)
    p.add_argument("--config", help="JSON file with option values (unknown keys are rejected)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--data", default=None, help="directory of EDF recordings with hypnograms")
    p.add_argument("--synthetic-subjects", type=int, default=0, help="train on N generated subjects instead of --data")
    p.add_argument("--synthetic-epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    t = train.TrainConfig()
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--gamma", type=float, default=t.gamma, help="focal loss focusing exponent")
    p.add_argument("--warmup-epochs", type=int, default=t.warmup_epochs)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--patience", type=int, default=t.patience)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=t.augment)
    p.add_argument("--prior-init", action=argparse.BooleanOptionalAction, default=t.prior_init)
    p.add_argument("--class-balanced", action=argparse.BooleanOptionalAction, default=t.class_balanced)
    p.add_argument("--val-subjects", nargs="*", default=None)
    p.add_argument("--val-fraction", type=float, default=t.val_fraction)
    _add_preprocess(p)
    _add_adapt_hparams(p)

    p = sub.add_parser("adapt", help="run a stream through frozen / bn-only / tent inference", formatter_class=fmt)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="directory of EDF recordings (hypnograms optional)")
    p.add_argument("--mode", choices=[m.value for m in tta.AdaptMode], default="tent")
    p.add_argument("--gate", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--reset", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--gate-stats", action=argparse.BooleanOptionalAction, default=True, help="closed gate also blocks BN statistics")
    p.add_argument("--gate-on-raw-entropy", action="store_true")
    p.add_argument("--channel", default=None)

    p = sub.add_parser("eval", help="score predictions against labels", formatter_class=fmt)
    p.add_argument("--config")
    p.add_argument("--run", help="run directory holding predictions.csv")
    p.add_argument("--labels", default=None, help="directory of <subject>.labels.csv; default: labels in predictions.csv")
    p.add_argument("--out", default=None, help="defaults to --run")
    p.add_argument("--ece-bins", type=int, default=metrics.ECE_BINS)

    p = sub.add_parser("synth", help="generate synthetic EDF recordings", formatter_class=fmt)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--n-subjects", type=int, default=2)
    p.add_argument("--n-epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--drift", action="append", default=[], help="kind:magnitude[@onset][~ramp], repeatable")
    p.add_argument("--prefix", default="subj")
    p.add_argument("--channel", default="EEG Fpz-Cz")

    p = sub.add_parser("report", help="compare evaluated runs", formatter_class=fmt)
    p.add_argument("--config")
    p.add_argument("--runs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--split", choices=SPLITS, default="raw")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _coerce(action: argparse.Action, key: str, value):
    if value is None:
        return None
    if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
        if not isinstance(value, bool):
            raise CliError(EXIT_CONFIG, f"config key {key!r} must be true/false")
        return value
    many = action.nargs in ("*", "+") or isinstance(action, argparse._AppendAction)
    conv = action.type or (lambda v: v)
    try:
        if many:
            if not isinstance(value, list):
                raise TypeError("expected a list")
            return [conv(v) for v in value]
        if isinstance(value, (list, dict)):
            raise TypeError("expected a scalar")
        if action.type is int and isinstance(value, float) and not value.is_integer():
            raise TypeError("expected an integer")
        out = conv(value)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"config key {key!r}: {exc}") from None
    if action.choices is not None and out not in action.choices:
        raise CliError(EXIT_CONFIG, f"config key {key!r}: {out!r} not in {sorted(action.choices)}")
    return out


def resolve(argv: Sequence[str]) -> tuple[str, dict, bool]:
    """Parse argv, merge a ``--config`` file under explicit flags, validate keys."""
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    sub = _subparser(parser, command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}

    # a second parse with suppressed defaults tells explicit flags apart
    sparse = build_parser()
    for a in _subparser(sparse, command)._actions:
        a.default = argparse.SUPPRESS
    for a in sparse._actions:
        a.default = argparse.SUPPRESS if a.dest != "command" else a.default
    explicit = set(vars(sparse.parse_args(argv))) - {"command", "verbose"}

    resolved = {k: getattr(args, k) for k in actions}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot read config {args.config}: {exc}") from None
        if isinstance(doc, dict) and command in doc and isinstance(doc[command], dict):
            doc = doc[command]
        if not isinstance(doc, dict):
            raise CliError(EXIT_CONFIG, "config must be a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        if doc.get("command", command) != command:
            raise CliError(EXIT_CONFIG, f"config is for {doc['command']!r}, not {command!r}")
        doc.pop("command", None)
        unknown = sorted(set(doc) - set(actions))
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config keys for {command}: {', '.join(unknown)}")
        for k, v in doc.items():
            if k not in explicit:
                resolved[k] = _coerce(actions[k], k, v)
    missing = [k for k in REQUIRED[command] if resolved.get(k) in (None, [])]
    if missing:
        raise CliError(EXIT_CONFIG, f"missing required options: {', '.join(missing)}")
    return command, resolved, bool(args.verbose)


# ---------------------------------------------------------------- io helpers


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _echo(out: Path, command: str, cfg: dict) -> None:
    path = out / ECHO_FILE
    doc = {}
    if path.exists():
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            doc = {}
    doc[command] = cfg
    _write_text(path, _dump_json(doc))


def _rows_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _mkout(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot create output directory {out}: {exc}") from None
    return out


# ---------------------------------------------------------------- data


@dataclass
class Record:
    subject_id: str
    series: SampleSeries
    annotations: list | None  # stage annotations, None when no hypnogram exists


def _stage_annotations(annots) -> list:
    return [a for a in annots if a.text.startswith("Sleep stage") or a.text == "Movement time"]


def _hypnogram_sibling(path: Path) -> Path | None:
    # PSG/hypnogram pairs share the first six characters of the file name
    if not path.name.endswith("-PSG.edf"):
        return None
    matches = sorted(path.parent.glob(path.name[:6] + "*-Hypnogram.edf"))
    return matches[0] if matches else None


def load_records(data_dir, channel: str | None = None) -> list[Record]:
    root = Path(data_dir) if data_dir else None
    if root is None or not root.is_dir():
        raise CliError(EXIT_DATA, f"data directory not found: {data_dir}")
    files = sorted(p for p in root.glob("*.edf") if not p.name.endswith("Hypnogram.edf"))
    if not files:
        raise CliError(EXIT_DATA, f"no EDF recordings in {root}")
    records = []
    for path in files:
        try:
            edf = edfio.read_edf(path)
            ordinary = [s.label for s in edf.meta.signals if not s.is_annotation]
            if not ordinary:
                raise CliError(EXIT_DATA, f"{path.name}: no data signals")
            label = channel or ordinary[0]
            series = edfio.read_signal(path, edf.meta, label)
            stages = _stage_annotations(edf.annotations)
            sibling = _hypnogram_sibling(path)
            if not stages and sibling is not None:
                stages = _stage_annotations(edfio.read_annotations(sibling))
        except (EdfError, OSError) as exc:
            raise CliError(EXIT_DATA, f"{path.name}: {exc}") from None
        sid = path.stem[: -len("-PSG")] if path.stem.endswith("-PSG") else path.stem
        records.append(Record(sid, series, stages or None))
    return records


def _preprocessor(cfg: dict) -> dsp.Preprocessor:
    return dsp.Preprocessor(
        notch_hz=tuple(cfg["notch_hz"]),
        notch_q=cfg["notch_q"],
        band_hz=(cfg["band_lo"], cfg["band_hi"]),
        strict_prior=cfg["strict_prior"],
    )


def _labels_for(record: Record, n_epochs: int) -> list[int] | None:
    if record.annotations is None:
        return None
    try:
        return [to_code(s) for s in edfio.align_hypnogram(record.annotations, n_epochs)]
    except EdfError as exc:
        raise CliError(EXIT_DATA, f"{record.subject_id}: {exc}") from None


def record_epochs(record: Record, pre: dsp.Preprocessor) -> list[dsp.Epoch]:
    try:
        clean = pre.filtered(record.series)
    except (DriftguardError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"{record.subject_id}: {exc}") from None
    n_epochs = len(clean.data) // dsp.EPOCH_LEN
    labels = _labels_for(record, n_epochs)
    std = dsp.StreamingStandardizer(strict_prior=pre.strict_prior)
    raw = dsp.epoch_samples(clean.data)
    return [
        dsp.standardize_stream(std, row, record.subject_id, k, None if labels is None else labels[k])
        for k, row in enumerate(raw)
    ]


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: dict) -> int:
    try:
        drifts = [synth.DriftSpec.parse(d) for d in cfg["drift"]]
        for d in drifts:
            if d.onset_epoch >= cfg["n_epochs"]:
                raise OnsetOutOfRange(f"drift onset {d.onset_epoch} beyond {cfg['n_epochs']} epochs")
    except (ValueError, OnsetOutOfRange) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    if cfg["n_subjects"] < 1 or cfg["n_epochs"] < 1:
        raise CliError(EXIT_CONFIG, "n_subjects and n_epochs must be positive")
    out = _mkout(cfg["out"])
    manifest = []
    for i in range(cfg["n_subjects"]):
        sid = f"{cfg['prefix']}{i:02d}"
        rng = np.random.default_rng([cfg["seed"], i])
        rec = synth.gen_subject(sid, synth.SubjectConfig(n_epochs=cfg["n_epochs"], drifts=drifts), rng)
        synth.record_to_edf(rec, out / f"{sid}.edf", label=cfg["channel"])
        rows = [(k, int(s), STAGE_NAMES[int(s)]) for k, s in enumerate(rec.stages)]
        _write_text(out / f"{sid}.labels.csv", _rows_csv(["epoch", "label", "stage"], rows))
        manifest.append({"subject": sid, "n_epochs": rec.n_epochs, "edf": f"{sid}.edf"})
    _write_text(out / "manifest.json", _dump_json({"subjects": manifest, "drifts": cfg["drift"]}))
    _echo(out, "synth", cfg)
    return EXIT_OK


def _adapt_hparams(cfg: dict) -> dict:
    return {k: cfg[k] for k in ADAPT_KEYS}


def cmd_train(cfg: dict) -> int:
    try:
        tta.AdaptConfig(**_adapt_hparams(cfg))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    pre = _preprocessor(cfg)
    xs, ys, subs = [], [], []
    if cfg["synthetic_subjects"] > 0:
        for i in range(cfg["synthetic_subjects"]):
            sid = f"syn{i:02d}"
            rec = synth.gen_subject(sid, synth.SubjectConfig(n_epochs=cfg["synthetic_epochs"]), np.random.default_rng([cfg["seed"], i]))
            x = pre.epoch_array(SampleSeries(rec.signal, rec.fs))
            xs.append(x)
            ys.append(rec.stages[: len(x)])
            subs += [sid] * len(x)
    else:
        if cfg["data"] is None:
            raise CliError(EXIT_CONFIG, "give --data or --synthetic-subjects")
        for record in load_records(cfg["data"], cfg["channel"]):
            eps = [e for e in record_epochs(record, pre) if e.label is not None and e.label != EXCLUDED_CODE]
            if not eps:
                continue
            xs.append(np.stack([e.samples for e in eps]))
            ys.append(np.array([e.label for e in eps]))
            subs += [record.subject_id] * len(eps)
        if not xs:
            raise CliError(EXIT_DATA, "no labelled epochs found")
    dataset = train.SourceDataset(np.concatenate(xs).astype(np.float32), np.concatenate(ys), np.array(subs))
    tcfg = train.TrainConfig(
        lr=cfg["lr"], gamma=cfg["gamma"], warmup_epochs=cfg["warmup_epochs"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], patience=cfg["patience"], seed=cfg["seed"], augment=cfg["augment"],
        prior_init=cfg["prior_init"], class_balanced=cfg["class_balanced"],
        val_subjects=cfg["val_subjects"], val_fraction=cfg["val_fraction"],
    )
    out = _mkout(cfg["out"])
    model = SleepNet.initialized(seed=cfg["seed"])
    try:
        result = train.train_source(model, dataset, tcfg)
    except DriftguardError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    sidecar = {
        "train": tcfg.to_dict(),
        "adapt": _adapt_hparams(cfg),
        "preprocess": {k: cfg[k] for k in PREPROCESS_KEYS},
        "best_epoch": result.best_epoch,
        "train_subjects": result.train_subjects,
        "val_subjects": result.val_subjects,
        "priors": result.priors,
        "alpha": result.alpha,
    }
    checkpoint.save(out / CHECKPOINT_FILE, result.model, sidecar)
    _write_text(out / "train_log.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in result.log))
    _echo(out, "train", cfg)
    return EXIT_OK


def _load_checkpoint(path) -> tuple[SleepNet, dict]:
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint not found: {path}") from None
    except (CheckpointMismatch, OSError, KeyError, ValueError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint mismatch: {exc}") from None


def cmd_adapt(cfg: dict) -> int:
    model, sidecar = _load_checkpoint(cfg["checkpoint"])
    if "adapt" not in sidecar or "preprocess" not in sidecar:
        raise CliError(EXIT_CHECKPOINT, "checkpoint sidecar lacks adapt/preprocess hyperparameters")
    hp = dict(sidecar["adapt"])
    try:
        acfg = tta.AdaptConfig(
            mode=cfg["mode"], use_gate=cfg["gate"], use_reset=cfg["reset"],
            gate_stats=cfg["gate_stats"], gate_on_raw_entropy=cfg["gate_on_raw_entropy"], **hp,
        )
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"sidecar hyperparameters rejected: {exc}") from None
    pre_cfg = dict(sidecar["preprocess"])
    channel = cfg["channel"] or pre_cfg.get("channel")
    records = load_records(cfg["data"], channel)
    pre = _preprocessor(pre_cfg)
    out = _mkout(cfg["out"])

    backbone = model.digest(model.non_bn_param_names)
    rows, trace_lines, per_subject = [], [], {}
    for record in records:
        epochs = record_epochs(record, pre)
        stream_model = model.clone()
        result = tta.adapt_stream(stream_model, epochs, acfg)
        for k, ep in enumerate(epochs):
            if ep.label == EXCLUDED_CODE:
                continue
            p = result.probs[k]
            rows.append(
                [record.subject_id, ep.index, "" if ep.label is None else ep.label,
                 int(result.labels[k]), int(result.smoothed[k]), float(p.max()), float(result.entropies[k]), *map(float, p)]
            )
        for rec in result.trace:
            trace_lines.append(json.dumps({"subject": record.subject_id, **rec.to_dict()}, sort_keys=True))
        summary = result.summary()
        summary["backbone_unchanged"] = stream_model.digest(stream_model.non_bn_param_names) == backbone
        per_subject[record.subject_id] = summary

    header = ["subject", "epoch", "label", "pred", "smoothed", "confidence", "entropy"] + [f"p_{n}" for n in STAGE_NAMES]
    _write_text(out / PREDICTIONS_FILE, _rows_csv(header, rows))
    _write_text(out / TRACE_FILE, "".join(line + "\n" for line in trace_lines))
    totals = {
        "mode": acfg.mode.value,
        "updates_applied": sum(s["updates_applied"] for s in per_subject.values()),
        "resets": sum(s["resets"] for s in per_subject.values()),
        "n_batches": sum(s["n_batches"] for s in per_subject.values()),
        "n_epochs": len(rows),
        "backbone_digest": backbone,
        "backbone_unchanged": all(s["backbone_unchanged"] for s in per_subject.values()),
        "adapt_config": acfg.to_dict(),
    }
    _write_text(out / "summary.json", _dump_json({"total": totals, "subjects": per_subject}))
    _echo(out, "adapt", cfg)
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _read_label_dir(root: Path) -> dict[str, dict[int, int]]:
    if not root.is_dir():
        raise CliError(EXIT_ALIGNMENT, f"label directory not found: {root}")
    out = {}
    for path in sorted(root.glob("*.labels.csv")):
        rows = _read_csv(path)
        out[path.name[: -len(".labels.csv")]] = {int(r["epoch"]): int(r["label"]) for r in rows}
    return out


def _split_table(by_subject: dict, split: str, n_bins: int) -> tuple[dict, dict]:
    reports = {}
    for sid, d in by_subject.items():
        y = np.array(d["y"])
        pred = np.array(d[split])
        conf = np.array(d["conf_" + split])
        reports[sid] = metrics.evaluate(y, pred, conf, n_bins)
    return reports, metrics.aggregate_subjects(reports).to_dict()


def cmd_eval(cfg: dict) -> int:
    run = Path(cfg["run"])
    pred_path = run / PREDICTIONS_FILE
    if not pred_path.is_file():
        raise CliError(EXIT_ALIGNMENT, f"no {PREDICTIONS_FILE} in {run}")
    rows = _read_csv(pred_path)
    labels = _read_label_dir(Path(cfg["labels"])) if cfg["labels"] else None
    by_subject: dict[str, dict[str, list]] = {}
    for r in rows:
        sid, k = r["subject"], int(r["epoch"])
        if labels is not None:
            if sid not in labels or k not in labels[sid]:
                raise CliError(EXIT_ALIGNMENT, f"no label for {sid} epoch {k}")
            y = labels[sid][k]
        elif r["label"] == "":
            raise CliError(EXIT_ALIGNMENT, f"{sid} epoch {k} has no label; pass --labels")
        else:
            y = int(r["label"])
        if y == EXCLUDED_CODE:
            continue
        probs = [float(r[f"p_{n}"]) for n in STAGE_NAMES]
        d = by_subject.setdefault(sid, {"y": [], "raw": [], "smoothed": [], "conf_raw": [], "conf_smoothed": []})
        raw, smooth = int(r["pred"]), int(r["smoothed"])
        d["y"].append(y)
        d["raw"].append(raw)
        d["smoothed"].append(smooth)
        d["conf_raw"].append(float(r["confidence"]))
        d["conf_smoothed"].append(probs[smooth])
    if labels is not None:
        for sid, table in labels.items():
            scored = sum(1 for v in table.values() if v != EXCLUDED_CODE)
            have = len(by_subject.get(sid, {"y": []})["y"])
            if sid in by_subject and have != scored:
                raise CliError(EXIT_ALIGNMENT, f"{sid}: {have} predictions for {scored} labelled epochs")
    if not by_subject:
        raise CliError(EXIT_ALIGNMENT, "no scorable epochs")
    out = _mkout(cfg["out"] or run)
    n_bins = cfg["ece_bins"]

    report = {"splits": {}, "n_subjects": len(by_subject), "n_epochs": sum(len(d["y"]) for d in by_subject.values())}
    dist_rows = []
    for sid, d in by_subject.items():
        for source in ("true", "raw", "smoothed"):
            seq = d["y"] if source == "true" else d[source]
            frac = np.bincount(seq, minlength=len(STAGE_NAMES)) / len(seq)
            dist_rows.append([sid, source, *frac])
    _write_text(out / "stage_distribution.csv", _rows_csv(["subject", "source", *STAGE_NAMES], dist_rows))

    true_seq = [s for d in by_subject.values() for s in d["y"]]
    trans_true = _pooled_transitions([d["y"] for d in by_subject.values()])
    _write_text(out / "transitions_true.csv", metrics.matrix_csv(trans_true))
    for split in SPLITS:
        reports, agg = _split_table(by_subject, split, n_bins)
        pooled_pred = [s for d in by_subject.values() for s in d[split]]
        pooled_conf = [c for d in by_subject.values() for c in d["conf_" + split]]
        pooled = metrics.evaluate(true_seq, pooled_pred, pooled_conf, n_bins)
        report["splits"][split] = {
            "metrics": agg["metrics"],
            "pooled_metrics": pooled.scalars(),
            "per_subject": agg["per_subject"],
            "confusion": agg["confusion"],
            "per_stage": pooled.per_stage,
            "flags": {sid: r.flags for sid, r in reports.items() if r.flags},
        }
        subj_rows = [[sid, reports[sid].n_epochs, *(reports[sid].scalars()[k] for k in metrics.METRIC_KEYS)] for sid in reports]
        _write_text(out / f"per_subject_{split}.csv", _rows_csv(["subject", "n_epochs", *metrics.METRIC_KEYS], subj_rows))
        cm = np.array(agg["confusion"])
        _write_text(out / f"confusion_{split}.csv", metrics.matrix_csv(cm))
        _write_text(out / f"transitions_{split}.csv", metrics.matrix_csv(_pooled_transitions([d[split] for d in by_subject.values()])))
        rel = pooled.reliability
        _write_text(
            out / f"reliability_{split}.csv",
            _rows_csv(["bin", "lo", "hi", "count", "confidence", "accuracy"], [list(r.values()) for r in rel.rows()]),
        )
        _write_text(out / f"reliability_{split}.svg", svg.reliability(rel.confidence, rel.accuracy, rel.counts, f"Reliability ({split})"))
        _write_text(out / f"confusion_{split}.svg", svg.heatmap(metrics.row_normalized(cm), STAGE_NAMES, f"Confusion ({split})"))
    _write_text(out / REPORT_FILE, _dump_json(report))
    _echo(out, "eval", cfg)
    return EXIT_OK


def _pooled_transitions(sequences) -> np.ndarray:
    counts = np.zeros((len(STAGE_NAMES), len(STAGE_NAMES)))
    for seq in sequences:
        s = np.asarray(seq, dtype=np.int64)
        if s.size >= 2:
            np.add.at(counts, (s[:-1], s[1:]), 1)
    return metrics.row_normalized(counts)


def _load_run(run: Path) -> tuple[dict, list[dict], dict]:
    paths = [run / REPORT_FILE, run / TRACE_FILE, run / ECHO_FILE]
    missing = [p.name for p in paths if not p.is_file()]
    if missing:
        raise CliError(EXIT_ARTIFACTS, f"{run}: missing {', '.join(missing)}")
    try:
        report = json.loads(paths[0].read_text(encoding="utf-8"))
        trace = [json.loads(line) for line in paths[1].read_text(encoding="utf-8").splitlines() if line.strip()]
        echo = json.loads(paths[2].read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_ARTIFACTS, f"{run}: unreadable artifact ({exc})") from None
    return report, trace, echo


def _gate_bounds(run: Path) -> tuple[float, float]:
    d = tta.AdaptConfig()
    try:
        used = json.loads((run / "summary.json").read_text(encoding="utf-8"))["total"]["adapt_config"]
        return float(used["h_min"]), float(used["h_max"])
    except (OSError, KeyError, ValueError):
        return d.h_min, d.h_max


def cmd_report(cfg: dict) -> int:
    runs = []
    bounds: dict[str, tuple[float, float]] = {}
    seen: dict[str, int] = {}
    for path in cfg["runs"]:
        run = Path(path)
        report, trace, echo = _load_run(run)
        name = run.name or "run"
        if name in seen:
            seen[name] += 1
            name = f"{name}_{seen[name]}"
        else:
            seen[name] = 0
        mode = echo.get("adapt", {}).get("mode", "unknown")
        if cfg["split"] not in report.get("splits", {}):
            raise CliError(EXIT_ARTIFACTS, f"{run}: report lacks split {cfg['split']!r}")
        runs.append((name, mode, report, trace))
        bounds[name] = _gate_bounds(run)
    out = _mkout(cfg["out"])

    table = []
    for name, mode, report, _ in runs:
        m = report["splits"][cfg["split"]]["metrics"]
        table.append([name, mode, *(m[k] for k in metrics.METRIC_KEYS)])
    _write_text(out / "comparison.csv", _rows_csv(["run", "mode", *metrics.METRIC_KEYS], table))
    _write_text(
        out / "comparison.json",
        _dump_json({"split": cfg["split"], "rows": [dict(zip(["run", "mode", *metrics.METRIC_KEYS], r)) for r in table]}),
    )
    cols = ["batch", "subject", "batch_index", "entropy", "ema_entropy", "gate", "updated", "reset", "loss"]
    for name, mode, _, trace in runs:
        rows = [
            [k, t.get("subject", ""), t["batch_index"], _blank(t["entropy"]), _blank(t["ema_entropy"]), t["gate"],
             int(t["updated"]), int(t["reset"]), _blank(t.get("loss"))]
            for k, t in enumerate(trace)
        ]
        _write_text(out / f"timeline_{name}.csv", _rows_csv(cols, rows))
        _write_text(
            out / f"timeline_{name}.svg",
            svg.timeline(
                [t["ema_entropy"] for t in trace], [t["gate"] == "closed" for t in trace],
                bounds[name][0], bounds[name][1], LN5, f"EMA entropy ({name}, {mode})",
            ),
        )
    _echo(out, "report", cfg)
    return EXIT_OK


def _blank(v):
    return "" if v is None else v


COMMANDS = {"train": cmd_train, "adapt": cmd_adapt, "eval": cmd_eval, "synth": cmd_synth, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command, cfg, verbose = resolve(argv)
    except CliError as exc:
        print(f"driftguard: error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # argparse: --help, --version, usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[command](cfg)
    except CliError as exc:
        print(f"driftguard {command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
