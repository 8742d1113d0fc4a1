"""Synthetic EDF corpora for demos and self-tests.

Builds bit-exact EDF signal files and EDF+ hypnogram annotation files from
scratch, with stage-dependent waveforms (distinct oscillation frequencies
per stage) so that a scoring model has real structure to learn.  This
lives in the library so the examples and the verification suite can
exercise the full ingestion path without the public archive.
"""

from __future__ import annotations

import datetime
from pathlib import Path

import numpy as np

from .edf import EdfHeader, EdfRecording, SignalHeader, serialize_edf
from .pipeline import CLASS_NAMES

DEFAULT_START = datetime.datetime(1989, 4, 24, 16, 13, 0)

# stage -> (oscillation Hz, amplitude scale); loosely inspired by the
# dominant bands of real sleep EEG, but purely synthetic
STAGE_WAVES = {
    "W": (10.0, 0.4),
    "1": (6.0, 0.5),
    "2": (3.0, 0.8),
    "3": (1.0, 1.4),
    "4": (0.7, 1.6),
    "R": (7.5, 0.45),
    "M": (12.0, 2.0),
    "?": (0.0, 0.1),
}


def make_signal_header(label: str, samples_per_record: int,
                       physical: tuple[float, float] = (-250.0, 250.0),
                       digital: tuple[int, int] = (-2048, 2047),
                       physical_dim: str = "uV") -> SignalHeader:
    return SignalHeader(
        label=label,
        transducer="synthetic",
        physical_dim=physical_dim,
        physical_min=physical[0],
        physical_max=physical[1],
        digital_min=digital[0],
        digital_max=digital[1],
        prefiltering="",
        samples_per_record=samples_per_record,
    )


def pack_records(signals_digital: list[np.ndarray], samples_per_record: list[int]) -> bytes:
    """Interleave per-signal int16 streams into EDF data-record layout."""
    n_records = len(signals_digital[0]) // samples_per_record[0]
    chunks = []
    for rec in range(n_records):
        for sig, spr in zip(signals_digital, samples_per_record):
            chunk = sig[rec * spr : (rec + 1) * spr].astype("<i2")
            chunks.append(chunk.tobytes())
    return b"".join(chunks)


def build_edf_bytes(signal_headers: list[SignalHeader], signals_digital: list[np.ndarray],
                    record_duration_s: float = 30.0,
                    start: datetime.datetime = DEFAULT_START,
                    patient_id: str = "X", recording_id: str = "synthetic") -> bytes:
    sprs = [h.samples_per_record for h in signal_headers]
    n_records = len(signals_digital[0]) // sprs[0]
    for sig, spr in zip(signals_digital, sprs):
        if len(sig) != n_records * spr:
            raise ValueError("signal lengths must be whole numbers of records")
    header = EdfHeader(
        version="0",
        patient_id=patient_id,
        recording_id=recording_id,
        start_datetime=start,
        reserved="",
        n_data_records=n_records,
        record_duration_s=record_duration_s,
        signals=tuple(signal_headers),
    )
    recording = EdfRecording(header=header, _record_data=pack_records(signals_digital, sprs))
    return serialize_edf(recording)


def quantize(physical: np.ndarray, header: SignalHeader) -> np.ndarray:
    """Physical values -> int16 digits under the header's affine scaling."""
    gain = header.gain
    digits = np.round((physical - header.physical_min) / gain) + header.digital_min
    return np.clip(digits, header.digital_min, header.digital_max).astype(np.int16)


def build_hypnogram_bytes(events: list[tuple[float, float, str]],
                          extra_texts: list[tuple[float, float | None, str]] | None = None,
                          start: datetime.datetime = DEFAULT_START,
                          patient_id: str = "X") -> bytes:
    """EDF+ annotation file with one TAL per event.

    ``events`` are (onset_s, duration_s, text) stage annotations written in
    the given order; ``extra_texts`` adds non-stage markers.  Everything is
    packed into a single data record.
    """
    tals = [b"+0\x14\x14\x00"]  # record timekeeping TAL
    all_events = list(events)
    for onset, dur, text in extra_texts or []:
        all_events.append((onset, dur, text))
    all_events.sort(key=lambda e: e[0])
    for onset, dur, text in all_events:
        tal = f"+{onset:g}".encode("ascii")
        if dur is not None:
            tal += f"\x15{dur:g}".encode("ascii")
        tal += b"\x14" + text.encode("utf-8") + b"\x14\x00"
        tals.append(tal)
    payload = b"".join(tals)
    if len(payload) % 2:
        payload += b"\x00"
    spr = len(payload) // 2

    header = make_signal_header("EDF Annotations", spr, physical=(-1.0, 1.0),
                                digital=(-32768, 32767), physical_dim="")
    edf_header = EdfHeader(
        version="0",
        patient_id=patient_id,
        recording_id="synthetic hypnogram",
        start_datetime=start,
        reserved="EDF+C",
        n_data_records=1,
        record_duration_s=max(1.0, max((o + (d or 0.0) for o, d, _ in all_events), default=1.0)),
        signals=(header,),
    )
    recording = EdfRecording(header=edf_header, _record_data=payload)
    return serialize_edf(recording)


def stage_wave(stage: str, n_samples: int, sampling_rate: float,
               rng: np.random.Generator) -> np.ndarray:
    """One epoch of stage-colored signal: a sinusoid plus noise, in uV."""
    freq, amp = STAGE_WAVES[stage]
    t = np.arange(n_samples) / sampling_rate
    phase = rng.uniform(0, 2 * np.pi)
    wave = 60.0 * amp * np.sin(2 * np.pi * freq * t + phase)
    return wave + 8.0 * rng.standard_normal(n_samples)


def write_corpus(out_dir, n_recordings: int = 3, seed: int = 7,
                 sampling_rate: float = 100.0,
                 stages_per_recording: list[list[str]] | None = None,
                 channel: str = "EEG Fpz-Cz") -> dict[str, int]:
    """Write paired ``*-PSG.edf`` / ``*-Hypnogram.edf`` files.

    Returns the expected per-class epoch counts (after exclusions and the
    stage-4 merge) keyed by class name.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    spe = int(sampling_rate * 30)

    if stages_per_recording is None:
        stages_per_recording = []
        for _ in range(n_recordings):
            stages = ["W", "W", "1", "2", "2", "2", "3", "4", "2", "R", "R", "2", "M", "W", "?"]
            extra = [str(rng.choice(["1", "2", "3", "R", "W"])) for _ in range(rng.integers(3, 8))]
            stages_per_recording.append(stages + extra)

    counts = dict.fromkeys(CLASS_NAMES, 0)
    mapping = {"W": "W", "1": "N1", "2": "N2", "3": "N3", "4": "N3", "R": "REM"}
    for idx, stages in enumerate(stages_per_recording):
        base = f"SY4{idx:02d}1E0"
        signal = np.concatenate([stage_wave(s, spe, sampling_rate, rng) for s in stages])
        sig_header = make_signal_header(channel, spe)
        noise_header = make_signal_header("EOG horizontal", spe)
        noise = 20.0 * rng.standard_normal(len(signal))
        psg = build_edf_bytes(
            [sig_header, noise_header],
            [quantize(signal, sig_header), quantize(noise, noise_header)],
            record_duration_s=30.0,
            patient_id=f"subject {idx}",
            recording_id=base,
        )
        events = [(30.0 * i, 30.0, f"Sleep stage {s}" if s != "M" else "Movement time")
                  for i, s in enumerate(stages)]
        hyp = build_hypnogram_bytes(events, extra_texts=[(0.0, None, "Lights off")])
        (out_dir / f"{base}-PSG.edf").write_bytes(psg)
        (out_dir / f"{base[:-1]}C-Hypnogram.edf").write_bytes(hyp)
        for s in stages:
            if s in mapping:
                counts[mapping[s]] += 1
    return counts
