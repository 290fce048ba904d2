"""EDF/EDF+ reading, a minimal EDF+C writer, and hypnogram alignment.

Only continuous recordings (EDF or EDF+C) with 16-bit samples are handled.
Annotation onsets are taken as seconds relative to the recording start, and
the 30 s epoch grid starts at that same origin.
"""

from __future__ import annotations

import datetime as dt
import io
import math
import os
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence, Union

import numpy as np

from driftguard.errors import (
    DiscontinuousRecording,
    MalformedTAL,
    NonNumericField,
    OverlappingAnnotations,
    SignalCountMismatch,
    TruncatedHeader,
    TruncatedRecord,
    UnknownSignal,
    UnknownStageText,
)
from driftguard.stages import Excluded, StageLabel

ANNOTATION_LABEL = "EDF Annotations"
EPOCH_S = 30.0

Source = Union[bytes, bytearray, memoryview, str, os.PathLike, BinaryIO]

# (field name, width) for the fixed part and for each per-signal block
_FIXED_FIELDS = (
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("startdate", 8),
    ("starttime", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
)
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dim", 8),
    ("phys_min", 8),
    ("phys_max", 8),
    ("dig_min", 8),
    ("dig_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


@dataclass(frozen=True)
class SignalMeta:
    label: str
    transducer: str
    physical_dim: str
    phys_min: float
    phys_max: float
    dig_min: int
    dig_max: int
    prefiltering: str
    samples_per_record: int

    @property
    def is_annotation(self) -> bool:
        return self.label == ANNOTATION_LABEL

    @property
    def scale(self) -> float:
        return (self.phys_max - self.phys_min) / (self.dig_max - self.dig_min)

    def to_physical(self, digital) -> np.ndarray:
        d = np.asarray(digital, dtype=np.float64)
        return self.phys_min + (d - self.dig_min) * self.scale

    def to_digital(self, physical) -> np.ndarray:
        """Inverse of `to_physical`, rounded and clipped to the digital range."""
        p = np.asarray(physical, dtype=np.float64)
        d = np.rint((p - self.phys_min) / self.scale + self.dig_min)
        return np.clip(d, self.dig_min, self.dig_max).astype(np.int16)


@dataclass(frozen=True)
class RecordingMeta:
    version: str
    patient: str
    recording: str
    start_datetime: dt.datetime
    n_records: int
    record_duration_s: float
    signals: tuple[SignalMeta, ...]
    reserved: str = ""

    @property
    def header_bytes(self) -> int:
        return 256 + 256 * len(self.signals)

    @property
    def record_samples(self) -> int:
        return sum(s.samples_per_record for s in self.signals)

    @property
    def record_bytes(self) -> int:
        return 2 * self.record_samples

    @property
    def is_edf_plus(self) -> bool:
        return self.reserved.startswith("EDF+")

    def signal_index(self, label: str) -> int:
        hits = [i for i, s in enumerate(self.signals) if s.label == label]
        if len(hits) != 1:
            raise UnknownSignal(
                f"signal {label!r} matched {len(hits)} entries; "
                f"available: {[s.label for s in self.signals]}"
            )
        return hits[0]


@dataclass(frozen=True)
class Annotation:
    onset_s: float
    duration_s: float | None
    text: str

    @property
    def duration(self) -> float:
        return 0.0 if self.duration_s is None else self.duration_s


@dataclass
class SampleSeries:
    data: np.ndarray
    fs: float

    def __len__(self):
        return len(self.data)


@dataclass
class EdfFile:
    """Parsed file: header, raw digital samples per ordinary signal, annotations."""

    meta: RecordingMeta
    digital: dict[str, np.ndarray] = field(default_factory=dict)
    annotations: list[Annotation] = field(default_factory=list)


def _read_source(source: Source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _ascii(raw: bytes, name: str) -> str:
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise NonNumericField(f"header field {name!r} is not ASCII") from exc


def _number(raw: bytes, name: str, kind=float):
    text = _ascii(raw, name)
    try:
        return kind(text)
    except ValueError:
        if kind is int:
            # some writers emit "2047.0" in integer fields
            try:
                value = float(text)
            except ValueError:
                pass
            else:
                if value.is_integer():
                    return int(value)
        raise NonNumericField(f"header field {name!r} is not numeric: {text!r}") from None


def _split_fields(raw: bytes, fields) -> dict[str, bytes]:
    out, pos = {}, 0
    for name, width in fields:
        out[name] = raw[pos : pos + width]
        pos += width
    return out


def _parse_start(date: str, time: str) -> dt.datetime:
    try:
        day, month, yy = (int(v) for v in date.split("."))
        hh, mm, ss = (int(v) for v in time.split("."))
    except ValueError as exc:
        raise NonNumericField(f"bad start date/time {date!r} {time!r}") from exc
    year = 1900 + yy if yy >= 85 else 2000 + yy
    return dt.datetime(year, month, day, hh, mm, ss)


def parse_header(data: bytes, file_size: int | None = None) -> RecordingMeta:
    """Parse the fixed and per-signal header blocks.

    `file_size` resolves an `n_records` of -1; it defaults to ``len(data)``
    so passing the whole file works.
    """
    data = bytes(data)
    if len(data) < 256:
        raise TruncatedHeader(f"need at least 256 header bytes, got {len(data)}")
    fixed = _split_fields(data[:256], _FIXED_FIELDS)
    n_signals = _number(fixed["n_signals"], "n_signals", int)
    if n_signals < 1:
        raise SignalCountMismatch(f"header declares {n_signals} signals")
    expected = 256 + 256 * n_signals
    if len(data) < expected:
        raise TruncatedHeader(
            f"{n_signals} signals need {expected} header bytes, got {len(data)}"
        )
    declared = _number(fixed["header_bytes"], "header_bytes", int)
    if declared != expected:
        raise SignalCountMismatch(
            f"header length field says {declared}, {n_signals} signals imply {expected}"
        )

    block = data[256:expected]
    columns: dict[str, list[bytes]] = {}
    pos = 0
    for name, width in _SIGNAL_FIELDS:
        columns[name] = [
            block[pos + i * width : pos + (i + 1) * width] for i in range(n_signals)
        ]
        pos += width * n_signals

    signals = []
    for i in range(n_signals):
        sig = SignalMeta(
            label=_ascii(columns["label"][i], "label"),
            transducer=_ascii(columns["transducer"][i], "transducer"),
            physical_dim=_ascii(columns["physical_dim"][i], "physical_dim"),
            phys_min=_number(columns["phys_min"][i], "phys_min"),
            phys_max=_number(columns["phys_max"][i], "phys_max"),
            dig_min=_number(columns["dig_min"][i], "dig_min", int),
            dig_max=_number(columns["dig_max"][i], "dig_max", int),
            prefiltering=_ascii(columns["prefiltering"][i], "prefiltering"),
            samples_per_record=_number(
                columns["samples_per_record"][i], "samples_per_record", int
            ),
        )
        if sig.dig_min >= sig.dig_max:
            raise NonNumericField(f"signal {sig.label!r}: dig_min >= dig_max")
        if sig.phys_min == sig.phys_max:
            raise NonNumericField(f"signal {sig.label!r}: phys_min == phys_max")
        if sig.samples_per_record < 1:
            raise NonNumericField(f"signal {sig.label!r}: samples_per_record < 1")
        signals.append(sig)

    reserved = _ascii(fixed["reserved"], "reserved")
    if reserved.startswith("EDF+D"):
        raise DiscontinuousRecording("EDF+D (discontinuous) files are not supported")

    duration = _number(fixed["record_duration"], "record_duration")
    if duration <= 0:
        raise NonNumericField(f"record duration must be positive, got {duration}")

    record_bytes = 2 * sum(s.samples_per_record for s in signals)
    n_records = _number(fixed["n_records"], "n_records", int)
    if n_records == -1:
        size = len(data) if file_size is None else file_size
        n_records = (size - expected) // record_bytes
        if n_records < 1:
            raise TruncatedRecord("n_records is -1 and the file holds no full record")
    elif n_records < 1:
        raise NonNumericField(f"invalid n_records {n_records}")

    return RecordingMeta(
        version=_ascii(fixed["version"], "version"),
        patient=_ascii(fixed["patient"], "patient"),
        recording=_ascii(fixed["recording"], "recording"),
        start_datetime=_parse_start(
            _ascii(fixed["startdate"], "startdate"), _ascii(fixed["starttime"], "starttime")
        ),
        n_records=n_records,
        record_duration_s=duration,
        signals=tuple(signals),
        reserved=reserved,
    )


def _records(data: bytes, meta: RecordingMeta) -> np.ndarray:
    start = meta.header_bytes
    stop = start + meta.n_records * meta.record_bytes
    if len(data) < stop:
        raise TruncatedRecord(
            f"expected {meta.n_records} records ({stop} bytes), file has {len(data)}"
        )
    return np.frombuffer(data[start:stop], dtype="<i2").reshape(
        meta.n_records, meta.record_samples
    )


def _signal_columns(meta: RecordingMeta, index: int) -> slice:
    offset = sum(s.samples_per_record for s in meta.signals[:index])
    return slice(offset, offset + meta.signals[index].samples_per_record)


def read_digital(source: Source, meta: RecordingMeta, signal_label: str) -> np.ndarray:
    data = _read_source(source)
    idx = meta.signal_index(signal_label)
    return _records(data, meta)[:, _signal_columns(meta, idx)].reshape(-1).copy()


def read_signal(source: Source, meta: RecordingMeta, signal_label: str) -> SampleSeries:
    """Return one signal calibrated to physical units."""
    idx = meta.signal_index(signal_label)
    sig = meta.signals[idx]
    digital = read_digital(source, meta, signal_label)
    return SampleSeries(
        data=sig.to_physical(digital), fs=sig.samples_per_record / meta.record_duration_s
    )


def _parse_onset(raw: bytes) -> float:
    text = raw.decode("ascii", errors="strict")
    if not text or text[0] not in "+-":
        raise MalformedTAL(f"TAL onset must start with '+' or '-': {text!r}")
    return float(text)


def parse_annotations(data: bytes) -> list[Annotation]:
    """Decode a TAL byte stream into annotations, sorted by onset.

    Timekeeping TALs (no text) are dropped.
    """
    out: list[Annotation] = []
    for chunk in bytes(data).split(b"\x00"):
        if not chunk:
            continue
        if not chunk.endswith(b"\x14"):
            raise MalformedTAL(f"TAL not terminated by 0x14 0x00: {chunk[:40]!r}")
        parts = chunk[:-1].split(b"\x14")
        stamp, texts = parts[0], parts[1:]
        if not texts:
            raise MalformedTAL(f"TAL without 0x14 after onset: {chunk[:40]!r}")
        try:
            if b"\x15" in stamp:
                onset_raw, dur_raw = stamp.split(b"\x15", 1)
                onset = _parse_onset(onset_raw)
                duration = float(dur_raw.decode("ascii")) if dur_raw else None
            else:
                onset, duration = _parse_onset(stamp), None
        except (ValueError, UnicodeDecodeError) as exc:
            if isinstance(exc, MalformedTAL):
                raise
            raise MalformedTAL(f"unparseable TAL timestamp {stamp!r}") from exc
        for text in texts:
            if text:
                out.append(Annotation(onset, duration, text.decode("utf-8")))
    out.sort(key=lambda a: a.onset_s)
    return out


def read_annotations(source: Source, meta: RecordingMeta | None = None) -> list[Annotation]:
    data = _read_source(source)
    if meta is None:
        meta = parse_header(data)
    raw = _records(data, meta)
    cols = [raw[:, _signal_columns(meta, i)] for i, s in enumerate(meta.signals) if s.is_annotation]
    if not cols:
        return []
    block = np.ascontiguousarray(np.concatenate(cols, axis=1))
    per_record = [row.tobytes() for row in block]
    return parse_annotations(b"\x00".join(per_record))


def read_edf(source: Source) -> EdfFile:
    data = _read_source(source)
    meta = parse_header(data)
    digital = {
        s.label: read_digital(data, meta, s.label)
        for s in meta.signals
        if not s.is_annotation
    }
    return EdfFile(meta=meta, digital=digital, annotations=read_annotations(data, meta))


_STAGE_TEXT = {
    "Sleep stage W": StageLabel.W,
    "Sleep stage 1": StageLabel.N1,
    "Sleep stage 2": StageLabel.N2,
    "Sleep stage 3": StageLabel.N3,
    "Sleep stage 4": StageLabel.N3,
    "Sleep stage R": StageLabel.REM,
    "Sleep stage ?": Excluded,
    "Movement time": Excluded,
}

# canonical text used when writing hypnograms
STAGE_TEXT = {
    StageLabel.W: "Sleep stage W",
    StageLabel.N1: "Sleep stage 1",
    StageLabel.N2: "Sleep stage 2",
    StageLabel.N3: "Sleep stage 3",
    StageLabel.REM: "Sleep stage R",
}


def map_stage(text: str):
    """R&K hypnogram text to an AASM stage, or `Excluded`."""
    try:
        return _STAGE_TEXT[text]
    except KeyError:
        raise UnknownStageText(text) from None


def align_hypnogram(
    annotations: Sequence[Annotation], n_epochs: int, epoch_s: float = EPOCH_S
) -> list:
    labels: list = [Excluded] * n_epochs
    ordered = sorted(annotations, key=lambda a: a.onset_s)
    tol = 1e-6
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.onset_s < prev.onset_s + prev.duration - tol:
            raise OverlappingAnnotations(
                f"{prev.text!r}@{prev.onset_s} overlaps {cur.text!r}@{cur.onset_s}"
            )
    for ann in ordered:
        if ann.duration <= 0:
            continue
        stage = map_stage(ann.text)
        first = max(0, math.ceil(ann.onset_s / epoch_s - tol))
        last = min(n_epochs, math.floor((ann.onset_s + ann.duration) / epoch_s + tol))
        for k in range(first, last):
            labels[k] = stage
    return labels


def stages_to_annotations(stages: Iterable, epoch_s: float = EPOCH_S) -> list[Annotation]:
    """Run-length encode a per-epoch stage list into hypnogram annotations."""
    out: list[Annotation] = []
    run_start, run_stage = None, None
    stages = list(stages)
    for k, stage in enumerate(stages + [None]):
        if stage != run_stage or k == len(stages):
            if run_stage is not None and run_stage is not Excluded:
                out.append(
                    Annotation(run_start * epoch_s, (k - run_start) * epoch_s, STAGE_TEXT[run_stage])
                )
            run_start, run_stage = k, stage
    return out


def _fmt_number(value: float, width: int = 8) -> str:
    if float(value).is_integer() and len(str(int(value))) <= width:
        return str(int(value))
    for digits in range(width, 0, -1):
        text = f"{value:.{digits}g}"
        if len(text) <= width:
            return text
    raise ValueError(f"cannot encode {value} in {width} characters")


def _field(text: str, width: int) -> bytes:
    raw = text.encode("ascii")
    if len(raw) > width:
        raise ValueError(f"{text!r} exceeds {width} characters")
    return raw.ljust(width, b" ")


def _tal(onset: float, duration: float | None, texts: Sequence[str]) -> bytes:
    stamp = ("+" if onset >= 0 else "-") + _fmt_number(abs(onset), 32)
    if duration is not None:
        stamp += "\x15" + _fmt_number(duration, 32)
    body = stamp.encode("ascii") + b"\x14"
    body += b"".join(t.encode("utf-8") + b"\x14" for t in texts)
    return body + b"\x00"


def write_edf(
    target: Union[str, os.PathLike, BinaryIO, None],
    signals: Sequence[tuple[SignalMeta, np.ndarray]],
    record_duration_s: float,
    annotations: Sequence[Annotation] = (),
    patient: str = "X X X X",
    recording: str = "Startdate X X X X",
    start: dt.datetime = dt.datetime(2000, 1, 1),
    annotation_signal: bool | None = None,
) -> bytes:
    """Write an EDF+C file with 16-bit samples and one annotation signal.

    Without annotations (and `annotation_signal` left at None) a plain EDF
    file with only the given signals is written instead.

    Intended as a fixture generator. Each element of `signals` pairs the
    header entry with its full digital sample vector, whose length must be a
    multiple of ``samples_per_record``. Returns the bytes written.
    """
    if not signals:
        raise ValueError("need at least one ordinary signal")
    n_records = None
    for meta, digital in signals:
        n, rem = divmod(len(digital), meta.samples_per_record)
        if rem or n < 1:
            raise ValueError(f"signal {meta.label!r} does not fill whole records")
        if n_records is not None and n != n_records:
            raise ValueError("signals disagree on the number of records")
        n_records = n

    anns = sorted(annotations, key=lambda a: a.onset_s)
    if annotation_signal is None:
        annotation_signal = bool(anns)
    if anns and not annotation_signal:
        raise ValueError("annotations need the annotation signal")

    # spread annotations over records; each record opens with a timekeeping TAL
    per = math.ceil(len(anns) / n_records) if anns else 0
    tal_blocks = []
    for r in range(n_records):
        block = _tal(r * record_duration_s, None, [""])
        for ann in anns[r * per : (r + 1) * per]:
            block += _tal(ann.onset_s, ann.duration_s, [ann.text])
        tal_blocks.append(block)
    ann_samples = max(1, math.ceil(max(len(b) for b in tal_blocks) / 2))
    ann_meta = SignalMeta(
        label=ANNOTATION_LABEL,
        transducer="",
        physical_dim="",
        phys_min=-1.0,
        phys_max=1.0,
        dig_min=-32768,
        dig_max=32767,
        prefiltering="",
        samples_per_record=ann_samples,
    )
    all_meta = [m for m, _ in signals] + ([ann_meta] if annotation_signal else [])
    ns = len(all_meta)

    header = io.BytesIO()
    header.write(_field("0", 8))
    header.write(_field(patient, 80))
    header.write(_field(recording, 80))
    header.write(_field(start.strftime("%d.%m.%y"), 8))
    header.write(_field(start.strftime("%H.%M.%S"), 8))
    header.write(_field(str(256 + 256 * ns), 8))
    header.write(_field("EDF+C" if annotation_signal else "", 44))
    header.write(_field(str(n_records), 8))
    header.write(_field(_fmt_number(record_duration_s), 8))
    header.write(_field(str(ns), 4))
    getters = {
        "label": lambda m: m.label,
        "transducer": lambda m: m.transducer,
        "physical_dim": lambda m: m.physical_dim,
        "phys_min": lambda m: _fmt_number(m.phys_min),
        "phys_max": lambda m: _fmt_number(m.phys_max),
        "dig_min": lambda m: str(m.dig_min),
        "dig_max": lambda m: str(m.dig_max),
        "prefiltering": lambda m: m.prefiltering,
        "samples_per_record": lambda m: str(m.samples_per_record),
        "reserved": lambda m: "",
    }
    for name, width in _SIGNAL_FIELDS:
        for m in all_meta:
            header.write(_field(getters[name](m), width))

    columns = [
        np.asarray(d, dtype="<i2").reshape(n_records, m.samples_per_record)
        for m, d in signals
    ]
    ann_raw = np.zeros((n_records, 2 * ann_samples), dtype=np.uint8)
    for r, block in enumerate(tal_blocks):
        ann_raw[r, : len(block)] = np.frombuffer(block, dtype=np.uint8)
    if annotation_signal:
        columns.append(ann_raw.view("<i2"))
    body = np.concatenate(columns, axis=1).astype("<i2").tobytes()

    out = header.getvalue() + body
    if target is not None:
        if isinstance(target, (str, os.PathLike)):
            with open(target, "wb") as fh:
                fh.write(out)
        else:
            target.write(out)
    return out


def eeg_signal_meta(
    label: str, samples_per_record: int, phys_min: float, phys_max: float
) -> SignalMeta:
    return SignalMeta(
        label=label,
        transducer="AgAgCl electrode",
        physical_dim="uV",
        phys_min=phys_min,
        phys_max=phys_max,
        dig_min=-32768,
        dig_max=32767,
        prefiltering="",
        samples_per_record=samples_per_record,
    )
