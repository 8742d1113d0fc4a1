import numpy as np
import pytest

from sleepseq.edf import EdfHeader, EdfRecording, serialize_edf
from sleepseq.synth import DEFAULT_START, make_signal_header, pack_records


@pytest.fixture
def simple_edf_bytes():
    """1 signal, 2 records, 3 samples/record, digital [-100,100] <-> physical
    [-1,1], stored digits [0, 50, -100, 100, 25, -50]."""
    sig = make_signal_header("EEG Fpz-Cz", 3, physical=(-1.0, 1.0), digital=(-100, 100))
    digits = np.array([0, 50, -100, 100, 25, -50], dtype=np.int16)
    header = EdfHeader(
        version="0",
        patient_id="X",
        recording_id="test",
        start_datetime=DEFAULT_START,
        reserved="",
        n_data_records=2,
        record_duration_s=30.0,
        signals=(sig,),
    )
    recording = EdfRecording(header=header, _record_data=pack_records([digits], [3]))
    return serialize_edf(recording)


def build_multichannel_edf(labels, n_records=2, samples_per_record=4, seed=0):
    rng = np.random.default_rng(seed)
    headers = [make_signal_header(lbl, samples_per_record) for lbl in labels]
    digits = [
        rng.integers(-2048, 2048, size=n_records * samples_per_record).astype(np.int16)
        for _ in labels
    ]
    header = EdfHeader(
        version="0",
        patient_id="patient 1",
        recording_id="multichannel",
        start_datetime=DEFAULT_START,
        reserved="",
        n_data_records=n_records,
        record_duration_s=1.0,
        signals=tuple(headers),
    )
    rec = EdfRecording(header=header, _record_data=pack_records(digits, [samples_per_record] * len(labels)))
    return serialize_edf(rec), digits
