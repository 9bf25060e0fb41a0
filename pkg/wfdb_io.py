"""
Physiological record I/O

Reads the standard three-file record layout used by both ECG databases:

    <name>.hea   text header (record line + one line per signal)
    <name>.dat   format-212 packed samples (two 12-bit values per 3 bytes)
    <name>.atr   MIT annotation stream (16-bit words, 6-bit code + 10-bit delta)

and a small line-oriented interchange format used for fixtures and
synthetic records. Samples stay as raw adu integers; conversion to mV
happens through to_millivolts().
"""

import dataclasses
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import (
    AnnotationTruncatedError,
    DataError,
    DecodeError,
    HeaderParseError,
    InterchangeFormatError,
    ParameterError,
    UnsupportedFormatError,
)

logger = logging.getLogger(__name__)

SUPPORTED_FORMAT = 212
DEFAULT_GAIN = 200.0
DEFAULT_SAMPLING_RATE = 250.0
INTERCHANGE_MAGIC = "#lsf-ecg-interchange v1"

# Pseudo-annotation codes of the MIT annotation stream
SKIP, NUM, SUB, CHAN, AUX = 59, 60, 61, 62, 63

# Published annotation code table (codes without a symbol are unassigned)
ANNOTATION_SYMBOLS: Dict[int, str] = {
    0: ' ',   # not-QRS
    1: 'N',   # normal beat
    2: 'L',   # left bundle branch block beat
    3: 'R',   # right bundle branch block beat
    4: 'a',   # aberrated atrial premature beat
    5: 'V',   # premature ventricular contraction
    6: 'F',   # fusion of ventricular and normal beat
    7: 'J',   # nodal (junctional) premature beat
    8: 'A',   # atrial premature contraction
    9: 'S',   # premature or ectopic supraventricular beat
    10: 'E',  # ventricular escape beat
    11: 'j',  # nodal (junctional) escape beat
    12: '/',  # paced beat
    13: 'Q',  # unclassifiable beat
    14: '~',  # signal quality change
    16: '|',  # isolated QRS-like artifact
    18: 's',  # ST change
    19: 'T',  # T-wave change
    20: '*',  # systole
    21: 'D',  # diastole
    22: '"',  # comment annotation
    23: '=',  # measurement annotation
    24: 'p',  # P-wave peak
    25: 'B',  # left or right bundle branch block
    26: '^',  # non-conducted pacer spike
    27: 't',  # T-wave peak
    28: '+',  # rhythm change
    29: 'u',  # U-wave peak
    30: '?',  # learning
    31: '!',  # ventricular flutter wave
    32: '[',  # start of ventricular flutter/fibrillation
    33: ']',  # end of ventricular flutter/fibrillation
    34: 'e',  # atrial escape beat
    35: 'n',  # supraventricular escape beat
    36: '@',  # link to external data
    37: 'x',  # non-conducted P-wave (blocked APB)
    38: 'f',  # fusion of paced and normal beat
    39: '(',  # waveform onset
    40: ')',  # waveform end
    41: 'r',  # R-on-T premature ventricular contraction
}
SYMBOL_CODES: Dict[str, int] = {symbol: code for code, symbol in ANNOTATION_SYMBOLS.items()}
UNKNOWN_SYMBOL = "unknown"


@dataclass(frozen=True)
class SignalSpec:
    """One signal line of a header"""
    file_name: str
    format_code: int
    gain: float
    baseline: int
    units: str = "mV"
    adc_resolution: int = 12
    adc_zero: int = 0
    initial_value: int = 0
    checksum: int = 0
    block_size: int = 0
    byte_offset: int = 0
    description: str = ""


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_rate: float
    n_samples: int
    signals: Tuple[SignalSpec, ...] = ()


@dataclass(frozen=True)
class AnnotationEvent:
    sample_index: int
    symbol: str
    code: int = 0
    subtype: int = 0
    channel: int = 0
    num: int = 0
    aux: str = ""


@dataclass(frozen=True, eq=False)
class EcgRecord:
    header: RecordHeader
    samples: np.ndarray
    annotations: Tuple[AnnotationEvent, ...] = ()
    patient_id: str = ""

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape != (self.header.n_samples, self.header.n_signals):
            raise DataError(
                f"record {self.header.record_name}: samples shape {self.samples.shape} does not match "
                f"header ({self.header.n_samples}, {self.header.n_signals})"
            )
        self.samples.setflags(write=False)
        if not self.patient_id:
            object.__setattr__(self, "patient_id", self.header.record_name)

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (self.header == other.header
                and self.patient_id == other.patient_id
                and self.annotations == other.annotations
                and np.array_equal(self.samples, other.samples))

    __hash__ = None

    @property
    def duration_s(self) -> float:
        return self.header.n_samples / self.header.sampling_rate


# ---------------------------------------------------------------------------
# Header
# ---------------------------------------------------------------------------

_FORMAT_RE = re.compile(r"^(\d+)(?:x(\d+))?(?::(\d+))?(?:\+(\d+))?$")
_GAIN_RE = re.compile(r"^([-+]?[\d.]+(?:[eE][-+]?\d+)?)(?:\((-?\d+)\))?(?:/(\S+))?$")


def _parse_int(token: str, what: str, line_number: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise HeaderParseError(f"invalid {what} '{token}'", line_number)


def _parse_record_line(tokens: List[str], line_number: int) -> Tuple[str, int, float, int]:
    name = tokens[0]
    if "/" in name:
        raise HeaderParseError(f"multi-segment header '{name}' is not supported", line_number)
    if len(tokens) < 2:
        raise HeaderParseError("record line must declare the number of signals", line_number)

    n_signals = _parse_int(tokens[1], "signal count", line_number)
    if n_signals < 1:
        raise HeaderParseError(f"signal count must be >= 1, got {n_signals}", line_number)

    sampling_rate = DEFAULT_SAMPLING_RATE
    if len(tokens) > 2:
        rate_token = re.split(r"[/(]", tokens[2])[0]
        try:
            sampling_rate = float(rate_token)
        except ValueError:
            raise HeaderParseError(f"invalid sampling frequency '{tokens[2]}'", line_number)
    if sampling_rate <= 0:
        raise HeaderParseError(f"sampling frequency must be positive, got {sampling_rate}", line_number)

    n_samples = _parse_int(tokens[3], "sample count", line_number) if len(tokens) > 3 else 0
    if n_samples < 0:
        raise HeaderParseError(f"sample count must be >= 0, got {n_samples}", line_number)
    return name, n_signals, sampling_rate, n_samples


def _parse_signal_line(tokens: List[str], line_number: int) -> SignalSpec:
    if len(tokens) < 2:
        raise HeaderParseError("signal line needs at least a file name and a format", line_number)

    format_match = _FORMAT_RE.match(tokens[1])
    if not format_match:
        raise HeaderParseError(f"invalid format field '{tokens[1]}'", line_number)
    format_code = int(format_match.group(1))
    if format_code != SUPPORTED_FORMAT:
        raise UnsupportedFormatError(tokens[1])
    if format_match.group(2) and int(format_match.group(2)) != 1:
        raise UnsupportedFormatError(tokens[1])
    byte_offset = int(format_match.group(4) or 0)

    gain, baseline, units = DEFAULT_GAIN, None, "mV"
    if len(tokens) > 2:
        gain_match = _GAIN_RE.match(tokens[2])
        if not gain_match:
            raise HeaderParseError(f"invalid gain field '{tokens[2]}'", line_number)
        gain = float(gain_match.group(1)) or DEFAULT_GAIN
        if gain_match.group(2) is not None:
            baseline = int(gain_match.group(2))
        if gain_match.group(3):
            units = gain_match.group(3)

    adc_resolution = _parse_int(tokens[3], "ADC resolution", line_number) if len(tokens) > 3 else 12
    adc_zero = _parse_int(tokens[4], "ADC zero", line_number) if len(tokens) > 4 else 0
    initial_value = _parse_int(tokens[5], "initial value", line_number) if len(tokens) > 5 else adc_zero
    checksum = _parse_int(tokens[6], "checksum", line_number) if len(tokens) > 6 else 0
    block_size = _parse_int(tokens[7], "block size", line_number) if len(tokens) > 7 else 0
    description = " ".join(tokens[8:])

    return SignalSpec(
        file_name=tokens[0],
        format_code=format_code,
        gain=gain,
        baseline=adc_zero if baseline is None else baseline,
        units=units,
        adc_resolution=adc_resolution or 12,
        adc_zero=adc_zero,
        initial_value=initial_value,
        checksum=checksum,
        block_size=block_size,
        byte_offset=byte_offset,
        description=description,
    )


def parse_header(text: str) -> RecordHeader:
    """Parse the text of a `.hea` file. Comment lines (#) and blank lines are ignored."""
    if isinstance(text, bytes):
        text = text.decode("latin-1")

    record_fields = None
    signals: List[SignalSpec] = []
    last_line = 0

    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        last_line = line_number
        # Inline comments are allowed after the fields
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue

        if record_fields is None:
            record_fields = _parse_record_line(tokens, line_number)
        else:
            if len(signals) >= record_fields[1]:
                raise HeaderParseError(
                    f"more signal lines than the {record_fields[1]} declared", line_number)
            signals.append(_parse_signal_line(tokens, line_number))

    if record_fields is None:
        raise HeaderParseError("empty header: no record line found", 1)

    name, n_signals, sampling_rate, n_samples = record_fields
    if len(signals) != n_signals:
        raise HeaderParseError(
            f"header declares {n_signals} signal(s) but has {len(signals)} signal line(s)",
            last_line + 1)

    return RecordHeader(
        record_name=name,
        n_signals=n_signals,
        sampling_rate=sampling_rate,
        n_samples=n_samples,
        signals=tuple(signals),
    )


# ---------------------------------------------------------------------------
# Format 212
# ---------------------------------------------------------------------------

def _sign_extend12(values: np.ndarray) -> np.ndarray:
    return values - ((values & 0x800) << 1)


def unpack_format212(data: bytes, n_values: int) -> np.ndarray:
    """Decode n_values 12-bit samples (any signal interleaving) from a 212 byte stream"""
    if n_values < 0:
        raise ParameterError(f"n_values must be >= 0, got {n_values}")
    n_groups = (n_values + 1) // 2
    needed = math.ceil(3 * n_values / 2)
    if len(data) < needed:
        # Offset of the first group that cannot be completed
        raise DecodeError(
            f"format-212 stream truncated: need {needed} bytes for {n_values} samples, have {len(data)}",
            offset=(len(data) // 3) * 3)

    raw = np.frombuffer(data, dtype=np.uint8, count=min(len(data), 3 * n_groups))
    if raw.size < 3 * n_groups:
        raw = np.concatenate([raw, np.zeros(3 * n_groups - raw.size, dtype=np.uint8)])
    groups = raw.reshape(n_groups, 3).astype(np.int32)

    first = groups[:, 0] | ((groups[:, 1] & 0x0F) << 8)
    second = groups[:, 2] | ((groups[:, 1] & 0xF0) << 4)

    values = np.empty(2 * n_groups, dtype=np.int32)
    values[0::2] = _sign_extend12(first)
    values[1::2] = _sign_extend12(second)
    return values[:n_values]


def decode_format212(data: bytes, n_samples: int) -> Tuple[np.ndarray, np.ndarray]:
    """Decode a two-signal format-212 stream of n_samples frames into two sample streams"""
    if len(data) < 3 * n_samples:
        raise DecodeError(
            f"format-212 stream truncated: need {3 * n_samples} bytes for {n_samples} frames, have {len(data)}",
            offset=(len(data) // 3) * 3)
    values = unpack_format212(data, 2 * n_samples)
    return values[0::2].copy(), values[1::2].copy()


def encode_format212(sample1: Sequence[int], sample2: Sequence[int]) -> bytes:
    """Pack two equal-length 12-bit sample streams into format-212 bytes"""
    first = np.asarray(sample1, dtype=np.int32)
    second = np.asarray(sample2, dtype=np.int32)
    if first.shape != second.shape or first.ndim != 1:
        raise ParameterError("format-212 encoding needs two 1-D streams of equal length")
    for stream in (first, second):
        if stream.size and (stream.min() < -2048 or stream.max() > 2047):
            raise ParameterError("format-212 samples must lie in [-2048, 2047]")

    u1 = first & 0xFFF
    u2 = second & 0xFFF
    packed = np.empty((first.size, 3), dtype=np.uint8)
    packed[:, 0] = u1 & 0xFF
    packed[:, 1] = ((u1 >> 8) & 0x0F) | (((u2 >> 8) & 0x0F) << 4)
    packed[:, 2] = u2 & 0xFF
    return packed.tobytes()


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def read_annotations(data: bytes) -> List[AnnotationEvent]:
    """Decode an MIT-format annotation stream into events ordered by sample index"""
    n_words = len(data) // 2
    words = np.frombuffer(data, dtype="<u2", count=n_words)

    events: List[AnnotationEvent] = []
    time = 0
    num = 0
    chan = 0
    pos = 0
    unknown_codes = set()

    while pos < n_words:
        word = int(words[pos])
        code = word >> 10
        value = word & 0x3FF

        if code == 0 and value == 0:
            if unknown_codes:
                logger.warning(f"⚠️ Unknown annotation code(s) {sorted(unknown_codes)} kept as '{UNKNOWN_SYMBOL}'")
            return sorted(events, key=lambda event: event.sample_index)

        if code == SKIP:
            if pos + 2 >= n_words:
                raise AnnotationTruncatedError(f"SKIP word at byte {2 * pos} is missing its interval")
            interval = (int(words[pos + 1]) << 16) | int(words[pos + 2])
            if interval >= 1 << 31:
                interval -= 1 << 32
            time += interval
            pos += 3
            continue

        if code in (NUM, SUB, CHAN):
            signed = value - 1024 if value >= 512 else value
            if code == NUM:
                num = signed
            elif code == CHAN:
                chan = value
            if events:
                if code == SUB:
                    events[-1] = dataclasses.replace(events[-1], subtype=signed)
                else:
                    events[-1] = dataclasses.replace(events[-1], num=num, channel=chan)
            pos += 1
            continue

        if code == AUX:
            length = value
            start = 2 * (pos + 1)
            padded = length + (length & 1)
            if start + padded > len(data):
                raise AnnotationTruncatedError(f"AUX payload at byte {start} is truncated")
            aux = data[start:start + length].split(b"\x00", 1)[0].decode("latin-1")
            if events:
                events[-1] = dataclasses.replace(events[-1], aux=aux)
            else:
                logger.warning(f"⚠️ AUX payload '{aux}' precedes any annotation; ignored")
            pos += 1 + padded // 2
            continue

        time += value
        symbol = ANNOTATION_SYMBOLS.get(code)
        if symbol is None:
            unknown_codes.add(code)
            symbol = UNKNOWN_SYMBOL
        events.append(AnnotationEvent(sample_index=time, symbol=symbol, code=code,
                                      channel=chan, num=num))
        pos += 1

    raise AnnotationTruncatedError(f"annotation stream of {len(data)} bytes has no end-word")


def encode_annotations(events: Sequence[AnnotationEvent]) -> bytes:
    """Encode events as an MIT annotation stream (fixtures only)"""
    words: List[int] = []
    time = 0
    for event in sorted(events, key=lambda e: e.sample_index):
        delta = event.sample_index - time
        if delta < 0 or delta > 0x3FF:
            interval = delta & 0xFFFFFFFF
            words += [SKIP << 10, interval >> 16, interval & 0xFFFF]
            delta = 0
        code = event.code or SYMBOL_CODES.get(event.symbol, 0)
        words.append((code << 10) | delta)
        time = event.sample_index
        if event.aux:
            payload = event.aux.encode("latin-1")
            words.append((AUX << 10) | len(payload))
            if len(payload) & 1:
                payload += b"\x00"
            words += list(np.frombuffer(payload, dtype="<u2"))
    words.append(0)
    return np.asarray(words, dtype="<u2").tobytes()


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

def _clamp_annotations(events: Sequence[AnnotationEvent], n_samples: int,
                       record_name: str) -> Tuple[AnnotationEvent, ...]:
    last = max(n_samples - 1, 0)
    clamped = 0
    result = []
    for event in events:
        if event.sample_index > last or event.sample_index < 0:
            clamped += 1
            event = dataclasses.replace(event, sample_index=min(max(event.sample_index, 0), last))
        result.append(event)
    if clamped:
        logger.warning(f"⚠️ {record_name}: {clamped} annotation(s) outside the signal clamped to [0, {last}]")
    return tuple(sorted(result, key=lambda event: event.sample_index))


def has_signal(directory: str, name: str) -> bool:
    return (os.path.exists(os.path.join(directory, f"{name}.hea"))
            and os.path.exists(os.path.join(directory, f"{name}.dat")))


def read_record(directory: str, name: str, annotation_ext: str = "atr") -> EcgRecord:
    """Read <name>.hea, <name>.dat and the annotation file (if any) from directory"""
    header_path = os.path.join(directory, f"{name}.hea")
    with open(header_path, "r", encoding="latin-1") as handle:
        header = parse_header(handle.read())

    files = {spec.file_name for spec in header.signals}
    if len(files) != 1:
        raise DataError(f"record {name}: signals spread over several files {sorted(files)}")
    spec0 = header.signals[0]
    dat_path = os.path.join(directory, spec0.file_name)
    with open(dat_path, "rb") as handle:
        data = handle.read()[spec0.byte_offset:]

    n_samples = header.n_samples
    if n_samples == 0:
        n_samples = (2 * len(data) // 3) // header.n_signals
        header = dataclasses.replace(header, n_samples=n_samples)
        logger.info(f"📏 {name}: sample count inferred from signal file ({n_samples})")

    values = unpack_format212(data, n_samples * header.n_signals)
    samples = values.reshape(n_samples, header.n_signals)

    annotations: Tuple[AnnotationEvent, ...] = ()
    ann_path = os.path.join(directory, f"{name}.{annotation_ext}")
    if os.path.exists(ann_path):
        with open(ann_path, "rb") as handle:
            events = read_annotations(handle.read())
        events = [e for e in events if not e.aux.startswith("## time resolution")]
        annotations = _clamp_annotations(events, n_samples, name)
    else:
        logger.warning(f"⚠️ {name}: no .{annotation_ext} annotation file")

    logger.debug(f"📥 Read {name}: {header.n_signals} signal(s) x {n_samples} samples at "
                 f"{header.sampling_rate} Hz, {len(annotations)} annotations")
    return EcgRecord(header=header, samples=samples, annotations=annotations, patient_id=name)


def to_millivolts(record: EcgRecord, channel: int = 0) -> np.ndarray:
    if not 0 <= channel < record.header.n_signals:
        raise ParameterError(f"channel {channel} not in record with {record.header.n_signals} signal(s)")
    spec = record.header.signals[channel]
    gain = spec.gain or DEFAULT_GAIN
    return (record.samples[:, channel].astype(np.float64) - spec.baseline) / gain


def make_record(name: str, samples: np.ndarray, sampling_rate: float,
                annotations: Sequence[AnnotationEvent] = (), gain: float = DEFAULT_GAIN,
                baseline: int = 0) -> EcgRecord:
    """Build an in-memory record with default 212 signal specs"""
    samples = np.asarray(samples, dtype=np.int32)
    if samples.ndim == 1:
        samples = samples[:, None]
    n_samples, n_signals = samples.shape
    signals = tuple(
        SignalSpec(file_name=f"{name}.dat", format_code=SUPPORTED_FORMAT, gain=gain,
                   baseline=baseline, adc_zero=baseline,
                   initial_value=int(samples[0, i]) if n_samples else 0)
        for i in range(n_signals)
    )
    header = RecordHeader(record_name=name, n_signals=n_signals, sampling_rate=float(sampling_rate),
                          n_samples=n_samples, signals=signals)
    return EcgRecord(header=header, samples=samples,
                     annotations=_clamp_annotations(annotations, n_samples, name), patient_id=name)


# ---------------------------------------------------------------------------
# Interchange format
# ---------------------------------------------------------------------------

def export_interchange(record: EcgRecord) -> str:
    """Serialise a record to the line-oriented interchange format (see README)"""
    header = record.header
    lines = [
        INTERCHANGE_MAGIC,
        "\t".join(["record", header.record_name, str(header.n_signals),
                   repr(float(header.sampling_rate)), str(header.n_samples),
                   json.dumps(record.patient_id)]),
    ]
    for spec in header.signals:
        lines.append("signal\t" + json.dumps(dataclasses.asdict(spec), sort_keys=True))

    lines.append(f"samples\t{header.n_samples}")
    lines.extend("\t".join(str(int(v)) for v in row) for row in record.samples)

    lines.append(f"annotations\t{len(record.annotations)}")
    for event in record.annotations:
        lines.append("\t".join([str(event.sample_index), json.dumps(event.symbol), json.dumps(event.aux),
                                str(event.code), str(event.subtype), str(event.channel), str(event.num)]))
    lines.append("end")
    return "\n".join(lines) + "\n"


def import_interchange(text: str) -> EcgRecord:
    lines = text.splitlines()
    if not lines or lines[0].strip() != INTERCHANGE_MAGIC:
        raise InterchangeFormatError(f"expected '{INTERCHANGE_MAGIC}' header line", 1)

    def fields_at(index: int, keyword: str, count: Optional[int] = None) -> List[str]:
        if index >= len(lines):
            raise InterchangeFormatError(f"unexpected end of document, expected '{keyword}'", index + 1)
        fields = lines[index].split("\t")
        if fields[0] != keyword or (count is not None and len(fields) != count):
            raise InterchangeFormatError(f"expected '{keyword}' line, got '{lines[index][:40]}'", index + 1)
        return fields

    try:
        record_fields = fields_at(1, "record", 6)
        name = record_fields[1]
        n_signals = int(record_fields[2])
        sampling_rate = float(record_fields[3])
        n_samples = int(record_fields[4])
        patient_id = json.loads(record_fields[5])

        cursor = 2
        signals = []
        for _ in range(n_signals):
            payload = fields_at(cursor, "signal", 2)[1]
            signals.append(SignalSpec(**json.loads(payload)))
            cursor += 1

        declared = int(fields_at(cursor, "samples", 2)[1])
        if declared != n_samples:
            raise InterchangeFormatError(f"samples count {declared} != record count {n_samples}", cursor + 1)
        cursor += 1
        rows = lines[cursor:cursor + n_samples]
        if len(rows) != n_samples:
            raise InterchangeFormatError("sample rows truncated", cursor + len(rows) + 1)
        samples = np.zeros((n_samples, n_signals), dtype=np.int32)
        for offset, row in enumerate(rows):
            values = row.split("\t")
            if len(values) != n_signals:
                raise InterchangeFormatError(f"expected {n_signals} values per row", cursor + offset + 1)
            samples[offset] = [int(v) for v in values]
        cursor += n_samples

        n_annotations = int(fields_at(cursor, "annotations", 2)[1])
        cursor += 1
        events = []
        for offset in range(n_annotations):
            if cursor + offset >= len(lines):
                raise InterchangeFormatError("annotation rows truncated", cursor + offset + 1)
            values = lines[cursor + offset].split("\t")
            if len(values) != 7:
                raise InterchangeFormatError("annotation rows need 7 fields", cursor + offset + 1)
            events.append(AnnotationEvent(
                sample_index=int(values[0]), symbol=json.loads(values[1]), aux=json.loads(values[2]),
                code=int(values[3]), subtype=int(values[4]), channel=int(values[5]), num=int(values[6])))
        cursor += n_annotations
        fields_at(cursor, "end")
    except (ValueError, TypeError, KeyError) as exc:
        raise InterchangeFormatError(f"schema mismatch: {exc}")

    header = RecordHeader(record_name=name, n_signals=n_signals, sampling_rate=sampling_rate,
                          n_samples=n_samples, signals=tuple(signals))
    return EcgRecord(header=header, samples=samples, annotations=tuple(events), patient_id=patient_id)


def write_interchange(record: EcgRecord, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(export_interchange(record))


def read_interchange(path: str) -> EcgRecord:
    with open(path, "r", encoding="utf-8") as handle:
        return import_interchange(handle.read())
