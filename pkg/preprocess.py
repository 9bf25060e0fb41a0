"""
Signal preprocessing: X (raw single-lead ECG) -> X' (L' x 2 feature tensor)

Order of operations on a continuous record:
    high-pass (baseline wander) -> resample to 100 Hz -> cut 10 s windows
    -> stage-one Haar DWT per window (cA1, cD1) -> z-score normalisation

A 10 s window at 360 Hz (3600 samples) becomes 1000 samples at 100 Hz
and a 500 x 2 tensor after the DWT.
"""

import logging
import os
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pywt
from scipy import signal as sps

from utils.artifact_store import read_container, write_container
from utils.errors import ComputationError, ParameterError
from wfdb_io import EcgRecord, to_millivolts

logger = logging.getLogger(__name__)

KAISER_BETA = 5.0
TAPS_PER_PHASE = 10
MAX_RATE_TERM = 1000
NORM_EPSILON = 1e-8
NORM_MODES = ("elementwise", "channel")


@dataclass(frozen=True)
class PreprocessSettings:
    cutoff_hz: float = 0.5
    filter_order: int = 4
    target_hz: float = 100.0
    norm_mode: str = "elementwise"
    zero_phase: bool = False
    channel: int = 0
    window_s: float = 10.0

    def __post_init__(self):
        if self.norm_mode not in NORM_MODES:
            raise ParameterError(f"norm_mode must be one of {NORM_MODES}, got '{self.norm_mode}'")

    @property
    def window_length(self) -> int:
        """Samples per window at the target rate"""
        return int(round(self.window_s * self.target_hz))


@dataclass(frozen=True, eq=False)
class FilterSpec:
    cutoff_hz: float
    order: int
    sampling_rate: float
    b: np.ndarray
    a: np.ndarray
    sos: np.ndarray
    poles: np.ndarray

    def gain_at(self, frequencies_hz: Union[float, Sequence[float]]) -> np.ndarray:
        """Magnitude of the transfer function at the given frequencies"""
        worN = np.atleast_1d(np.asarray(frequencies_hz, dtype=np.float64))
        _, response = sps.sosfreqz(self.sos, worN=worN, fs=self.sampling_rate)
        return np.abs(response)

    @property
    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles) < 1.0))


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = NORM_EPSILON
    mode: str = "elementwise"


# ---------------------------------------------------------------------------
# High-pass filter
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def design_highpass(cutoff_hz: float, sampling_rate: float, order: int = 4) -> FilterSpec:
    """Butterworth high-pass; the z-domain transfer function b(z)/a(z) is realised as second-order sections"""
    if order < 1:
        raise ParameterError(f"filter order must be >= 1, got {order}")
    if sampling_rate <= 0:
        raise ParameterError(f"sampling rate must be positive, got {sampling_rate}")
    nyquist = sampling_rate / 2.0
    if not 0 < cutoff_hz < nyquist:
        raise ParameterError(f"cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) for fs={sampling_rate} Hz")

    zeros, poles, gain = sps.butter(order, cutoff_hz, btype="highpass", output="zpk", fs=sampling_rate)
    sos = sps.zpk2sos(zeros, poles, gain)
    b, a = sps.zpk2tf(zeros, poles, gain)
    b = np.real(b) / np.real(a[0])
    a = np.real(a) / np.real(a[0])

    spec = FilterSpec(cutoff_hz=float(cutoff_hz), order=int(order), sampling_rate=float(sampling_rate),
                      b=b, a=a, sos=sos, poles=poles)
    if not spec.is_stable:
        raise ParameterError(f"high-pass design at {cutoff_hz} Hz / {sampling_rate} Hz is not stable")
    return spec


def apply_filter(spec: FilterSpec, x: Sequence[float], zero_phase: bool = False) -> np.ndarray:
    """Causal filtering with zero initial conditions (forward-backward when zero_phase)"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ParameterError("apply_filter needs a non-empty 1-D signal")
    if zero_phase:
        # pad over the settling time (3 periods of the cutoff) so the edges carry no start-up transient
        padlen = min(x.size - 1, int(3 * spec.sampling_rate / spec.cutoff_hz))
        return sps.sosfiltfilt(spec.sos, x, padlen=padlen)
    return sps.sosfilt(spec.sos, x)


# ---------------------------------------------------------------------------
# Rational resampling
# ---------------------------------------------------------------------------

def _rate_ratio(from_hz: float, to_hz: float) -> Tuple[int, int]:
    if from_hz <= 0 or to_hz <= 0:
        raise ParameterError(f"sampling rates must be positive (from={from_hz}, to={to_hz})")
    ratio = Fraction(str(to_hz)) / Fraction(str(from_hz))
    if ratio.numerator > MAX_RATE_TERM or ratio.denominator > MAX_RATE_TERM:
        raise ParameterError(
            f"resampling ratio {to_hz}/{from_hz} = {ratio} is not a small rational; "
            f"terms must be <= {MAX_RATE_TERM}")
    return ratio.numerator, ratio.denominator


@lru_cache(maxsize=32)
def design_resampling_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc anti-aliasing filter, unit DC gain on every polyphase branch"""
    max_rate = max(up, down)
    half_len = TAPS_PER_PHASE * max_rate
    taps = sps.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", KAISER_BETA))
    # resample_poly multiplies by `up`; each branch must sum to 1/up
    for phase in range(up):
        branch_sum = taps[phase::up].sum()
        taps[phase::up] /= branch_sum * up
    return taps


def resample(x: Sequence[float], from_hz: float, to_hz: float = 100.0) -> np.ndarray:
    """Rational polyphase resampling; output length ceil(len * to / from)"""
    x = np.asarray(x, dtype=np.float64)
    up, down = _rate_ratio(from_hz, to_hz)
    if up == down:
        return x.copy()
    return sps.resample_poly(x, up, down, window=design_resampling_filter(up, down))


# ---------------------------------------------------------------------------
# Haar DWT
# ---------------------------------------------------------------------------

def haar_dwt1(x: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Stage-one orthonormal Haar decomposition with non-overlapping pair alignment"""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ParameterError("haar_dwt1 needs a non-empty signal")
    if x.size % 2:
        x = np.append(x, x[-1])
    # periodization on an even length pairs (x0, x1), (x2, x3), ...; cD = (x0 - x1) / sqrt(2)
    cA, cD = pywt.dwt(x, "haar", mode="periodization")
    return cA, cD


def haar_tensor(window: Sequence[float]) -> np.ndarray:
    """Window of 2L' samples -> FeatureTensor [L' x 2], channel 0 = cA1, channel 1 = cD1"""
    cA, cD = haar_dwt1(window)
    return np.stack([cA, cD], axis=1)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def _as_batch(tensors: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    if isinstance(tensors, np.ndarray):
        batch = tensors
    else:
        shapes = {np.shape(t) for t in tensors}
        if len(shapes) > 1:
            raise ParameterError(f"feature tensors have mismatched shapes {sorted(shapes)}")
        batch = np.stack([np.asarray(t) for t in tensors]) if tensors else np.empty((0, 0, 0))
    if batch.ndim != 3:
        raise ParameterError(f"expected a batch of [L' x channels] tensors, got shape {batch.shape}")
    return batch.astype(np.float64, copy=False)


def fit_norm_stats(tensors: Union[np.ndarray, Sequence[np.ndarray]], mode: str = "elementwise",
                   epsilon: float = NORM_EPSILON) -> NormStats:
    """Population mean/std over the training set (per position, or per channel)"""
    if mode not in NORM_MODES:
        raise ParameterError(f"norm mode must be one of {NORM_MODES}, got '{mode}'")
    batch = _as_batch(tensors)
    if batch.shape[0] < 2:
        raise ParameterError(f"fit_norm_stats needs at least 2 tensors, got {batch.shape[0]}")

    if mode == "elementwise":
        mean = batch.mean(axis=0)
        std = batch.std(axis=0)
    else:
        mean = np.broadcast_to(batch.mean(axis=(0, 1)), batch.shape[1:]).copy()
        std = np.broadcast_to(batch.std(axis=(0, 1)), batch.shape[1:]).copy()
    return NormStats(mean=mean, std=np.maximum(std, epsilon), epsilon=epsilon, mode=mode)


def apply_norm(stats: NormStats, tensor: np.ndarray) -> np.ndarray:
    """(x - mean) / max(std, eps); accepts one tensor or a batch"""
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.shape[-2:] != stats.mean.shape:
        raise ParameterError(f"tensor shape {tensor.shape} does not match stats shape {stats.mean.shape}")
    return (tensor - stats.mean) / stats.std


def invert_norm(stats: NormStats, tensor: np.ndarray) -> np.ndarray:
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.shape[-2:] != stats.mean.shape:
        raise ParameterError(f"tensor shape {tensor.shape} does not match stats shape {stats.mean.shape}")
    return tensor * stats.std + stats.mean


def save_norm_stats(stats: NormStats, path: str) -> str:
    return write_container(path, "NORM", {"mean": stats.mean, "std": stats.std},
                           {"epsilon": stats.epsilon, "mode": stats.mode})


def load_norm_stats(path: str, stage: Optional[str] = None) -> NormStats:
    arrays, meta = read_container(path, expected_kind="NORM", stage=stage)
    return NormStats(mean=arrays["mean"], std=arrays["std"], epsilon=meta["epsilon"], mode=meta["mode"])


# ---------------------------------------------------------------------------
# Record / segment pipelines
# ---------------------------------------------------------------------------

def preprocess_signal(x_mv: np.ndarray, sampling_rate: float, settings: PreprocessSettings) -> np.ndarray:
    """High-pass then resample a continuous signal (mV) to the target rate"""
    spec = design_highpass(settings.cutoff_hz, sampling_rate, settings.filter_order)
    filtered = apply_filter(spec, x_mv, zero_phase=settings.zero_phase)
    return resample(filtered, sampling_rate, settings.target_hz)


def preprocess_record(record: EcgRecord, settings: PreprocessSettings) -> np.ndarray:
    """The configured channel of a record, in mV, high-passed and at the target rate"""
    return preprocess_signal(to_millivolts(record, settings.channel), record.header.sampling_rate, settings)


def featurize_windows(signal_target: np.ndarray, starts_native: Sequence[int], sampling_rate: float,
                      settings: PreprocessSettings) -> np.ndarray:
    """Cut windows (given by native-rate start samples) from a target-rate signal and DWT each"""
    length = settings.window_length
    scale = settings.target_hz / sampling_rate
    tensors = np.empty((len(starts_native), (length + 1) // 2, 2), dtype=np.float64)
    for row, start in enumerate(starts_native):
        begin = int(round(start * scale))
        window = signal_target[begin:begin + length]
        if window.size < length:
            # ceil() output length can leave the final window a sample short
            window = np.pad(window, (0, length - window.size), mode="edge")
        tensors[row] = haar_tensor(window)
    if not np.all(np.isfinite(tensors)):
        raise ComputationError("non-finite values in feature tensors")
    return tensors


def featurize_segment(raw_mv: np.ndarray, sampling_rate: float, settings: PreprocessSettings) -> np.ndarray:
    """Streaming path for one raw 10 s segment -> [L' x 2] (no normalisation)"""
    resampled = preprocess_signal(np.asarray(raw_mv, dtype=np.float64), sampling_rate, settings)
    return featurize_windows(resampled, [0], settings.target_hz, settings)[0]


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

def write_feature_cache(directory: str, tensors: np.ndarray, manifest: pd.DataFrame,
                        meta: dict) -> str:
    """features.lsf (float32 container) + features_manifest.csv, returns the container digest"""
    if len(manifest) != tensors.shape[0]:
        raise ParameterError(f"manifest has {len(manifest)} rows for {tensors.shape[0]} tensors")
    os.makedirs(directory, exist_ok=True)
    manifest.to_csv(os.path.join(directory, "features_manifest.csv"), index=False)
    digest = write_container(os.path.join(directory, "features.lsf"), "FEAT",
                             {"tensors": tensors.astype(np.float32)}, meta)
    logger.info(f"💾 Feature cache: {tensors.shape[0]} tensors of shape {tensors.shape[1:]}")
    return digest


def read_feature_cache(directory: str, stage: Optional[str] = "preprocess") -> Tuple[np.ndarray, pd.DataFrame, dict]:
    arrays, meta = read_container(os.path.join(directory, "features.lsf"), expected_kind="FEAT", stage=stage)
    manifest = pd.read_csv(os.path.join(directory, "features_manifest.csv"),
                           dtype={"record_id": str})
    return arrays["tensors"].astype(np.float64), manifest, meta
