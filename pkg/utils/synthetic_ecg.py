"""
Synthetic two-class ECG records for desk-scale runs.

Each record is a sequence of 10 s windows. A regular window holds sinus
beats ('N') at a steady rate. An irregular window holds beats at random
RR intervals, no P waves, a small fibrillatory ripple and a share of wide
ventricular ectopic beats ('V'). Beat annotations make the windows
Normal / Abnormal for the arrhythmia task and rhythm annotations
('+' with "(N" / "(AFIB") make them Non-AFIB / AFIB for the AFIB task.
"""

import logging
import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from wfdb_io import DEFAULT_GAIN, SYMBOL_CODES, AnnotationEvent, EcgRecord, make_record, write_interchange

logger = logging.getLogger(__name__)

INTERCHANGE_SUFFIX = ".ecg"

# (offset from R peak in s, amplitude in mV, width in s)
SINUS_WAVES = ((-0.20, 0.15, 0.025), (-0.03, -0.10, 0.010), (0.0, 1.20, 0.012),
               (0.03, -0.25, 0.010), (0.25, 0.30, 0.050))
SINUS_WAVES_NO_P = SINUS_WAVES[1:]
ECTOPIC_WAVES = ((0.0, 1.70, 0.040), (0.07, -0.60, 0.030), (0.30, -0.40, 0.070))


@dataclass(frozen=True)
class SyntheticSettings:
    n_records: int = 20
    segments_per_record: int = 20
    sampling_rate: float = 360.0
    window_s: float = 10.0
    abnormal_fraction: float = 0.5
    ectopic_fraction: float = 0.3
    noise_mv: float = 0.02
    seed: int = 0


def _add_beat(signal: np.ndarray, r_time: float, fs: float, waves, scale: float) -> None:
    start = max(int((r_time - 0.5) * fs), 0)
    stop = min(int((r_time + 0.6) * fs), len(signal))
    if stop <= start:
        return
    t = np.arange(start, stop) / fs - r_time
    for offset, amplitude, width in waves:
        signal[start:stop] += scale * amplitude * np.exp(-0.5 * ((t - offset) / width) ** 2)


def _window_beats(rng: np.random.Generator, start_s: float, stop_s: float, irregular: bool,
                  mean_rr: float, ectopic_fraction: float) -> List[Tuple[float, str]]:
    beats = []
    t = start_s + rng.uniform(0.05, 0.4)
    while t < stop_s - 0.05:
        if irregular:
            symbol = "V" if rng.random() < ectopic_fraction else "N"
            beats.append((t, symbol))
            t += rng.uniform(0.35, 1.2)
        else:
            beats.append((t, "N"))
            t += mean_rr * (1.0 + rng.normal(0.0, 0.02))
    if irregular and beats and all(symbol == "N" for _, symbol in beats):
        # at least one ectopic beat per irregular window
        k = int(rng.integers(len(beats)))
        beats[k] = (beats[k][0], "V")
    return beats


def synthesize_record(name: str, rng: np.random.Generator, settings: SyntheticSettings) -> EcgRecord:
    fs = settings.sampling_rate
    n_samples = int(round(settings.segments_per_record * settings.window_s * fs))
    time_s = np.arange(n_samples) / fs
    mean_rr = 60.0 / rng.uniform(60.0, 85.0)
    scale = rng.uniform(0.8, 1.2)

    signal = 0.3 * np.sin(2 * np.pi * rng.uniform(0.15, 0.35) * time_s + rng.uniform(0, 2 * np.pi))
    signal += rng.normal(0.0, settings.noise_mv, size=n_samples)

    events: List[AnnotationEvent] = []
    previous_rhythm = None
    for window in range(settings.segments_per_record):
        start_s = window * settings.window_s
        stop_s = start_s + settings.window_s
        irregular = bool(rng.random() < settings.abnormal_fraction)
        rhythm = "(AFIB" if irregular else "(N"
        if rhythm != previous_rhythm:
            events.append(AnnotationEvent(int(round(start_s * fs)), "+", SYMBOL_CODES["+"], aux=rhythm))
            previous_rhythm = rhythm

        if irregular:
            lo, hi = int(round(start_s * fs)), int(round(stop_s * fs))
            ripple_hz = rng.uniform(5.0, 7.0)
            signal[lo:hi] += 0.05 * np.sin(2 * np.pi * ripple_hz * time_s[lo:hi])

        for r_time, symbol in _window_beats(rng, start_s, stop_s, irregular, mean_rr, settings.ectopic_fraction):
            if symbol == "V":
                waves = ECTOPIC_WAVES
            else:
                waves = SINUS_WAVES_NO_P if irregular else SINUS_WAVES
            _add_beat(signal, r_time, fs, waves, scale)
            events.append(AnnotationEvent(int(round(r_time * fs)), symbol, SYMBOL_CODES[symbol]))

    adu = np.clip(np.round(signal * DEFAULT_GAIN), -2048, 2047).astype(np.int32)
    events.sort(key=lambda event: event.sample_index)
    return make_record(name, adu, fs, events)


def synthesize_dataset(settings: SyntheticSettings = SyntheticSettings()) -> List[EcgRecord]:
    rng = np.random.default_rng(settings.seed)
    records = [synthesize_record(f"syn{k:03d}", rng, settings) for k in range(settings.n_records)]
    logger.info(f"🧪 Synthesised {len(records)} records x {settings.segments_per_record} windows")
    return records


def write_dataset(records: Sequence[EcgRecord], directory: str) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for record in records:
        path = os.path.join(directory, record.header.record_name + INTERCHANGE_SUFFIX)
        write_interchange(record, path)
        paths.append(path)
    return paths
