"""EDF / EDF+ reading for polysomnography recordings.

Implements the European Data Format as published: a 256-byte fixed header,
256 header bytes per signal (field-major layout), and data records of 2-byte
little-endian two's-complement samples.  EDF+ timestamped annotation lists
(TALs) are parsed from the "EDF Annotations" signal to recover hypnogram
events.

Only continuous files are supported; EDF+D (discontinuous) files are
rejected.  BDF (24-bit) is out of scope.
"""

from __future__ import annotations

import datetime
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

HEADER_SIZE = 256
SIGNAL_HEADER_SIZE = 256
ANNOTATION_LABEL = "EDF Annotations"

# Sleep-EDF hypnogram vocabulary -> single-character raw stage labels.
STAGE_TEXTS = {
    "Sleep stage W": "W",
    "Sleep stage 1": "1",
    "Sleep stage 2": "2",
    "Sleep stage 3": "3",
    "Sleep stage 4": "4",
    "Sleep stage R": "R",
    "Movement time": "M",
    "Sleep stage ?": "?",
}


class EdfError(Exception):
    """Base class for EDF parsing problems."""


class TruncatedEdfError(EdfError):
    """File ends before the header or data records it declares."""


class HeaderFieldError(EdfError):
    """A fixed-width header field is non-ASCII, non-numeric, or inconsistent."""


class ScalingError(EdfError):
    """digital_min equals digital_max, so the physical mapping is undefined."""


class DiscontinuousEdfError(EdfError):
    """EDF+D files are not supported."""


class AnnotationError(EdfError):
    """Malformed or overlapping EDF+ annotations."""


class ChannelNotFoundError(KeyError):
    """No signal carries the requested label."""


class AmbiguousChannelError(KeyError):
    """More than one signal carries the requested label."""


@dataclass(frozen=True)
class SignalHeader:
    label: str
    transducer: str
    physical_dim: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    prefiltering: str
    samples_per_record: int
    reserved: str = ""

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        """Affine digital->physical mapping defined by the signal header."""
        return self.physical_min + (digital.astype(np.float64) - self.digital_min) * self.gain


@dataclass(frozen=True)
class EdfHeader:
    version: str
    patient_id: str
    recording_id: str
    start_datetime: datetime.datetime
    reserved: str
    n_data_records: int
    record_duration_s: float
    signals: tuple[SignalHeader, ...]

    @property
    def n_signals(self) -> int:
        return len(self.signals)

    @property
    def header_bytes(self) -> int:
        return HEADER_SIZE + SIGNAL_HEADER_SIZE * self.n_signals

    @property
    def record_size_bytes(self) -> int:
        return 2 * sum(s.samples_per_record for s in self.signals)

    def sampling_rate(self, signal_index: int) -> float:
        return self.signals[signal_index].samples_per_record / self.record_duration_s


@dataclass(frozen=True)
class StageAnnotation:
    """One hypnogram event: a stage label holding from onset_s for duration_s."""

    onset_s: float
    duration_s: float
    label: str  # one of W 1 2 3 4 R M ?


@dataclass
class EdfRecording:
    """A parsed EDF file: header plus lazily decoded signal data.

    Sample bytes are kept raw; a channel is decoded to physical units only
    when requested, so selecting one EEG channel from a multi-channel
    whole-night file does not materialize every signal.  Decoded channels
    are cached.  Instances are treated as immutable after construction.
    """

    header: EdfHeader
    _record_data: bytes
    _cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def duration_s(self) -> float:
        return self.header.n_data_records * self.header.record_duration_s

    def digital(self, signal_index: int) -> np.ndarray:
        """Raw int16 samples of one signal, concatenated across records."""
        hdr = self.header
        sig = hdr.signals[signal_index]
        offset = 2 * sum(s.samples_per_record for s in hdr.signals[:signal_index])
        record_size = hdr.record_size_bytes
        out = np.empty(hdr.n_data_records * sig.samples_per_record, dtype=np.int16)
        for rec in range(hdr.n_data_records):
            start = rec * record_size + offset
            chunk = np.frombuffer(
                self._record_data, dtype="<i2", count=sig.samples_per_record, offset=start
            )
            out[rec * sig.samples_per_record : (rec + 1) * sig.samples_per_record] = chunk
        return out

    def signal(self, signal_index: int) -> np.ndarray:
        """Physical-unit samples of one signal (cached after first decode)."""
        if signal_index not in self._cache:
            sig = self.header.signals[signal_index]
            self._cache[signal_index] = sig.to_physical(self.digital(signal_index))
        return self._cache[signal_index]

    def labels(self) -> list[str]:
        return [s.label for s in self.header.signals]


def _ascii_field(raw: bytes, name: str) -> str:
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise HeaderFieldError(f"{name}: non-ASCII bytes in header field") from exc
    return text.rstrip(" ")


def _int_field(raw: bytes, name: str) -> int:
    text = _ascii_field(raw, name).strip()
    try:
        return int(text)
    except ValueError as exc:
        raise HeaderFieldError(f"{name}: expected integer, got {text!r}") from exc


def _float_field(raw: bytes, name: str) -> float:
    text = _ascii_field(raw, name).strip()
    try:
        return float(text)
    except ValueError as exc:
        raise HeaderFieldError(f"{name}: expected number, got {text!r}") from exc


def _parse_start(date_raw: bytes, time_raw: bytes) -> datetime.datetime:
    date_text = _ascii_field(date_raw, "startdate").strip()
    time_text = _ascii_field(time_raw, "starttime").strip()
    try:
        day, month, year2 = (int(p) for p in date_text.split("."))
        hour, minute, second = (int(p) for p in time_text.split("."))
    except ValueError as exc:
        raise HeaderFieldError(f"bad start date/time {date_text!r} {time_text!r}") from exc
    # EDF clipping convention: two-digit years 85-99 are 1985-1999.
    year = year2 + (2000 if year2 < 85 else 1900)
    try:
        return datetime.datetime(year, month, day, hour, minute, second)
    except ValueError as exc:
        raise HeaderFieldError(f"bad start date/time {date_text!r} {time_text!r}") from exc


def parse_header(data: bytes) -> EdfHeader:
    """Decode the fixed header and all signal headers from raw file bytes."""
    if len(data) < HEADER_SIZE:
        raise TruncatedEdfError(f"file has {len(data)} bytes, need {HEADER_SIZE} for the header")

    version = _ascii_field(data[0:8], "version")
    patient_id = _ascii_field(data[8:88], "patient_id")
    recording_id = _ascii_field(data[88:168], "recording_id")
    start = _parse_start(data[168:176], data[176:184])
    header_bytes = _int_field(data[184:192], "header_bytes")
    reserved = _ascii_field(data[192:236], "reserved")
    n_data_records = _int_field(data[236:244], "n_data_records")
    record_duration = _float_field(data[244:252], "record_duration_s")
    n_signals = _int_field(data[252:256], "n_signals")

    if reserved.startswith("EDF+D"):
        raise DiscontinuousEdfError("EDF+D (discontinuous) files are not supported")
    if n_signals < 1:
        raise HeaderFieldError(f"n_signals must be >= 1, got {n_signals}")
    expected = HEADER_SIZE + SIGNAL_HEADER_SIZE * n_signals
    if header_bytes != expected:
        raise HeaderFieldError(
            f"header byte count {header_bytes} != 256 + 256*{n_signals} = {expected}"
        )
    if len(data) < expected:
        raise TruncatedEdfError(f"file ends inside the signal headers ({len(data)} bytes)")
    if record_duration <= 0:
        raise HeaderFieldError(f"record duration must be positive, got {record_duration}")

    def sig_fields(offset: int, width: int) -> list[bytes]:
        base = HEADER_SIZE + offset * n_signals
        return [data[base + i * width : base + (i + 1) * width] for i in range(n_signals)]

    labels = sig_fields(0, 16)
    transducers = sig_fields(16, 80)
    phys_dims = sig_fields(96, 8)
    phys_mins = sig_fields(104, 8)
    phys_maxs = sig_fields(112, 8)
    dig_mins = sig_fields(120, 8)
    dig_maxs = sig_fields(128, 8)
    prefilters = sig_fields(136, 80)
    samples = sig_fields(216, 8)
    sig_reserved = sig_fields(224, 32)

    signals = []
    for i in range(n_signals):
        sig = SignalHeader(
            label=_ascii_field(labels[i], f"signal {i} label"),
            transducer=_ascii_field(transducers[i], f"signal {i} transducer"),
            physical_dim=_ascii_field(phys_dims[i], f"signal {i} physical_dim"),
            physical_min=_float_field(phys_mins[i], f"signal {i} physical_min"),
            physical_max=_float_field(phys_maxs[i], f"signal {i} physical_max"),
            digital_min=_int_field(dig_mins[i], f"signal {i} digital_min"),
            digital_max=_int_field(dig_maxs[i], f"signal {i} digital_max"),
            prefiltering=_ascii_field(prefilters[i], f"signal {i} prefiltering"),
            samples_per_record=_int_field(samples[i], f"signal {i} samples_per_record"),
            reserved=_ascii_field(sig_reserved[i], f"signal {i} reserved"),
        )
        if sig.samples_per_record < 1:
            raise HeaderFieldError(f"signal {i}: samples_per_record must be >= 1")
        if sig.digital_min >= sig.digital_max:
            if sig.digital_min == sig.digital_max:
                raise ScalingError(f"signal {i}: digital_min == digital_max, scaling undefined")
            raise HeaderFieldError(f"signal {i}: digital_min > digital_max")
        if sig.physical_min == sig.physical_max:
            raise HeaderFieldError(f"signal {i}: physical_min == physical_max")
        signals.append(sig)

    return EdfHeader(
        version=version,
        patient_id=patient_id,
        recording_id=recording_id,
        start_datetime=start,
        reserved=reserved,
        n_data_records=n_data_records,
        record_duration_s=record_duration,
        signals=tuple(signals),
    )


def parse_edf(data: bytes) -> EdfRecording:
    """Parse a complete EDF byte stream into a recording.

    Header text is decoded as trailing-space-trimmed ASCII; samples stay raw
    until a channel is requested.  Raises a typed :class:`EdfError` subclass
    on truncation, malformed fields, undefined scaling, or EDF+D input.
    """
    header = parse_header(data)
    record_size = header.record_size_bytes
    body = data[header.header_bytes :]

    n_records = header.n_data_records
    if n_records == -1:
        # Record count unknown; recover it from the payload size.
        if record_size == 0 or len(body) % record_size != 0:
            raise TruncatedEdfError("record count is -1 and payload size is not a record multiple")
        n_records = len(body) // record_size
        header = EdfHeader(
            version=header.version,
            patient_id=header.patient_id,
            recording_id=header.recording_id,
            start_datetime=header.start_datetime,
            reserved=header.reserved,
            n_data_records=n_records,
            record_duration_s=header.record_duration_s,
            signals=header.signals,
        )
    expected = n_records * record_size
    if len(body) < expected:
        raise TruncatedEdfError(
            f"expected {expected} data bytes for {n_records} records, found {len(body)}"
        )
    if len(body) > expected:
        logger.warning("ignoring %d trailing bytes after the last data record", len(body) - expected)
        body = body[:expected]

    return EdfRecording(header=header, _record_data=bytes(body))


def _encode_text(text: str, width: int, name: str) -> bytes:
    if len(text) > width:
        raise HeaderFieldError(f"{name}: {text!r} longer than {width} chars")
    try:
        raw = text.encode("ascii")
    except UnicodeEncodeError as exc:
        raise HeaderFieldError(f"{name}: non-ASCII text") from exc
    return raw.ljust(width)


def _encode_number(value: float, width: int, name: str) -> bytes:
    if value == int(value):
        text = str(int(value))
    else:
        text = repr(float(value))
    return _encode_text(text, width, name)


def serialize_edf(recording: EdfRecording) -> bytes:
    """Encode a recording back to EDF bytes (canonical field padding).

    Parsing a file produced by this serializer and re-serializing it is
    byte-exact; for externally produced files the guarantee holds whenever
    their numeric fields use the same canonical spelling.
    """
    hdr = recording.header
    out = bytearray()
    out += _encode_text(hdr.version, 8, "version")
    out += _encode_text(hdr.patient_id, 80, "patient_id")
    out += _encode_text(hdr.recording_id, 80, "recording_id")
    out += hdr.start_datetime.strftime("%d.%m.%y").encode("ascii")
    out += hdr.start_datetime.strftime("%H.%M.%S").encode("ascii")
    out += _encode_number(hdr.header_bytes, 8, "header_bytes")
    out += _encode_text(hdr.reserved, 44, "reserved")
    out += _encode_number(hdr.n_data_records, 8, "n_data_records")
    out += _encode_number(hdr.record_duration_s, 8, "record_duration_s")
    out += _encode_number(hdr.n_signals, 4, "n_signals")

    for width, name in ((16, "label"), (80, "transducer"), (8, "physical_dim")):
        for sig in hdr.signals:
            out += _encode_text(getattr(sig, name), width, name)
    for name in ("physical_min", "physical_max", "digital_min", "digital_max"):
        for sig in hdr.signals:
            out += _encode_number(getattr(sig, name), 8, name)
    for sig in hdr.signals:
        out += _encode_text(sig.prefiltering, 80, "prefiltering")
    for sig in hdr.signals:
        out += _encode_number(sig.samples_per_record, 8, "samples_per_record")
    for sig in hdr.signals:
        out += _encode_text(sig.reserved, 32, "signal reserved")

    assert len(out) == hdr.header_bytes
    out += recording._record_data
    return bytes(out)


def _parse_tals(chunk: bytes, where: str) -> list[tuple[float, float | None, list[str]]]:
    """Decode one record's annotation bytes into (onset, duration, texts) TALs."""
    tals = []
    for tal in chunk.split(b"\x00"):
        if not tal:
            continue
        if tal[0:1] not in (b"+", b"-"):
            raise AnnotationError(f"{where}: TAL does not start with a signed onset")
        head, sep, rest = tal.partition(b"\x14")
        if not sep:
            raise AnnotationError(f"{where}: TAL missing \\x14 after the timestamp block")
        onset_raw, dur_sep, dur_raw = head.partition(b"\x15")
        try:
            onset = float(onset_raw)
            duration = float(dur_raw) if dur_sep else None
        except ValueError as exc:
            raise AnnotationError(f"{where}: malformed timestamp block {head!r}") from exc
        texts = [t.decode("utf-8", errors="replace") for t in rest.split(b"\x14") if t]
        tals.append((onset, duration, texts))
    return tals


def parse_hypnogram(data: bytes) -> list[StageAnnotation]:
    """Extract sleep stage events from an EDF+ annotation file.

    Returns one :class:`StageAnnotation` per stage event, ordered by onset.
    Timekeeping TALs and non-stage events (lights off/on markers and the
    like) are skipped; skipped events are tallied in a single warning.
    Raises :class:`AnnotationError` for malformed TALs or overlapping stage
    annotations.
    """
    recording = parse_edf(data)
    hdr = recording.header
    ann_indices = [i for i, s in enumerate(hdr.signals) if s.label == ANNOTATION_LABEL]
    if not ann_indices:
        raise AnnotationError("file has no 'EDF Annotations' signal")

    events: list[StageAnnotation] = []
    ignored = 0
    for idx in ann_indices:
        sig = hdr.signals[idx]
        offset = 2 * sum(s.samples_per_record for s in hdr.signals[:idx])
        width = 2 * sig.samples_per_record
        record_size = hdr.record_size_bytes
        for rec in range(hdr.n_data_records):
            start = rec * record_size + offset
            chunk = recording._record_data[start : start + width]
            for onset, duration, texts in _parse_tals(chunk, f"record {rec}"):
                if not texts:
                    continue  # timekeeping TAL
                for text in texts:
                    stage = STAGE_TEXTS.get(text)
                    if stage is None:
                        ignored += 1
                        continue
                    if duration is None:
                        raise AnnotationError(f"stage event {text!r} at {onset} has no duration")
                    if onset < 0 or duration <= 0:
                        raise AnnotationError(
                            f"stage event {text!r}: onset {onset}, duration {duration}"
                        )
                    events.append(StageAnnotation(onset_s=onset, duration_s=duration, label=stage))

    if ignored:
        logger.warning("ignored %d non-stage annotations", ignored)

    events.sort(key=lambda a: a.onset_s)
    for prev, cur in zip(events, events[1:]):
        if prev.onset_s + prev.duration_s > cur.onset_s + 1e-9:
            raise AnnotationError(
                f"overlapping stage annotations at {prev.onset_s}+{prev.duration_s} and {cur.onset_s}"
            )
    return events


def select_channel(recording: EdfRecording, label: str) -> tuple[np.ndarray, float]:
    """Return (physical samples, sampling rate in Hz) for one signal.

    The label must match exactly one signal after whitespace trimming.
    """
    wanted = label.strip()
    matches = [i for i, s in enumerate(recording.header.signals) if s.label.strip() == wanted]
    if not matches:
        raise ChannelNotFoundError(
            f"no signal labeled {wanted!r}; available: {recording.labels()}"
        )
    if len(matches) > 1:
        raise AmbiguousChannelError(f"{len(matches)} signals labeled {wanted!r}")
    idx = matches[0]
    return recording.signal(idx), recording.header.sampling_rate(idx)
