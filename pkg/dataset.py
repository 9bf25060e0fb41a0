"""
Segmentation, labelling and inter-patient splits

Arrhythmia task: beats inside a 10 s window are mapped onto AAMI classes.
AFIB task: the rhythm in force over the window decides the label.
Splits assign whole patients to train or test; validation is carved out
of the training segments only.
"""

import bisect
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from utils.artifact_store import read_json, write_json
from utils.errors import DataError, MissingRecordsError, ParameterError
from wfdb_io import AnnotationEvent, EcgRecord, has_signal

logger = logging.getLogger(__name__)


class Task(str, Enum):
    ARRHYTHMIA = "arrhythmia"
    AFIB = "afib"


class ClassTag(str, Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"
    NOISY = "noisy"

    @property
    def label(self) -> Optional[int]:
        return {ClassTag.NORMAL: 0, ClassTag.ABNORMAL: 1}.get(self)


# Column names used in distribution tables
CLASS_NAMES = {
    Task.ARRHYTHMIA: {ClassTag.NORMAL: "Normal", ClassTag.ABNORMAL: "Abnormal", ClassTag.NOISY: "Noisy"},
    Task.AFIB: {ClassTag.NORMAL: "Non-AFIB", ClassTag.ABNORMAL: "AFIB", ClassTag.NOISY: "Noisy"},
}

MITDB_RECORDS = (
    "100", "101", "102", "103", "104", "105", "106", "107", "108", "109",
    "111", "112", "113", "114", "115", "116", "117", "118", "119",
    "121", "122", "123", "124",
    "200", "201", "202", "203", "205", "207", "208", "209", "210",
    "212", "213", "214", "215", "217", "219", "220", "221", "222", "223",
    "228", "230", "231", "232", "233", "234",
)
MITDB_DISCARDED = frozenset({"102", "104", "107", "217"})
MITDB_TEST = frozenset({"105", "117", "214", "230", "232", "233", "234"})

AFDB_RECORDS = (
    "00735", "03665", "04015", "04043", "04048", "04126", "04746", "04908",
    "04936", "05091", "05121", "05261", "06426", "06453", "06995", "07162",
    "07859", "07879", "07910", "08215", "08219", "08378", "08405", "08434", "08455",
)
# Published with rhythm annotations but no signal file
AFDB_WITHOUT_SIGNAL = frozenset({"00735", "03665"})
AFDB_TEST = frozenset({"04746", "05121", "06453", "07879"})

SET_NAMES = {Task.ARRHYTHMIA: ("DS1", "DS2"), Task.AFIB: ("DS3", "DS4")}

# AAMI superclasses
AAMI_CLASSES = {
    "N": "N", "L": "N", "R": "N", "e": "N", "j": "N",
    "A": "S", "a": "S", "J": "S", "S": "S",
    "V": "V", "E": "V",
    "F": "F",
    "/": "Q", "f": "Q", "Q": "Q",
}
ABNORMAL_AAMI = frozenset({"S", "V", "F"})

RHYTHM_SYMBOL = "+"
AFIB_RHYTHMS = frozenset({"(AFIB"})
NOISE_RHYTHMS = frozenset({"(NOISE", "(Q"})

PARTITIONS = ("train", "validation", "test", "excluded")


@dataclass(frozen=True)
class RawWindow:
    patient_id: str
    index: int
    start_sample: int
    stop_sample: int


@dataclass
class Segment:
    patient_id: str
    index: int
    start_sample: int
    class_tag: ClassTag
    features: Optional[np.ndarray] = None

    @property
    def label(self) -> Optional[int]:
        return self.class_tag.label


@dataclass(frozen=True)
class SplitSpec:
    task: Task
    train_patients: FrozenSet[str]
    test_patients: FrozenSet[str]
    validation_fraction: float = 0.30
    seed: int = 0
    discarded: FrozenSet[str] = frozenset()
    paradigm: str = "inter"
    patient_wise_validation: bool = False
    intra_test_fraction: float = 0.16

    def __post_init__(self):
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ParameterError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        if self.paradigm not in ("inter", "intra"):
            raise ParameterError(f"paradigm must be 'inter' or 'intra', got '{self.paradigm}'")
        if self.paradigm == "inter" and self.train_patients & self.test_patients:
            overlap = sorted(self.train_patients & self.test_patients)
            raise ParameterError(f"train and test patients overlap: {overlap}")
        if self.discarded & (self.train_patients | self.test_patients):
            raise ParameterError("discarded records must not appear in train or test")

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "train_patients": sorted(self.train_patients),
            "test_patients": sorted(self.test_patients),
            "validation_fraction": self.validation_fraction,
            "seed": self.seed,
            "discarded": sorted(self.discarded),
            "paradigm": self.paradigm,
            "patient_wise_validation": self.patient_wise_validation,
            "intra_test_fraction": self.intra_test_fraction,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplitSpec":
        return cls(
            task=Task(data["task"]),
            train_patients=frozenset(data["train_patients"]),
            test_patients=frozenset(data["test_patients"]),
            validation_fraction=data["validation_fraction"],
            seed=data["seed"],
            discarded=frozenset(data["discarded"]),
            paradigm=data["paradigm"],
            patient_wise_validation=data["patient_wise_validation"],
            intra_test_fraction=data["intra_test_fraction"],
        )


@dataclass
class DistributionReport:
    task: Task
    rows: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        names = CLASS_NAMES[self.task]
        columns = [names[ClassTag.ABNORMAL], names[ClassTag.NORMAL], names[ClassTag.NOISY], "Total"] \
            if self.task == Task.AFIB else \
            [names[ClassTag.NORMAL], names[ClassTag.ABNORMAL], names[ClassTag.NOISY], "Total"]
        frame = pd.DataFrame.from_dict(self.rows, orient="index")
        return frame.reindex(columns=columns, fill_value=0)


# ---------------------------------------------------------------------------
# Segmentation and labelling
# ---------------------------------------------------------------------------

def segment_record(record: EcgRecord, window_s: float = 10.0) -> List[RawWindow]:
    """Consecutive non-overlapping windows at the native rate; the trailing partial window is dropped"""
    if window_s <= 0:
        raise ParameterError(f"window length must be positive, got {window_s}")
    length = int(round(window_s * record.header.sampling_rate))
    count = record.header.n_samples // length
    if count == 0:
        logger.warning(f"⚠️ {record.patient_id}: {record.duration_s:.1f} s is shorter than one "
                       f"{window_s:g} s window")
        return []
    return [RawWindow(record.patient_id, i, i * length, (i + 1) * length) for i in range(count)]


def _events_in(window: RawWindow, annotations: Sequence[AnnotationEvent]) -> Sequence[AnnotationEvent]:
    keys = [event.sample_index for event in annotations]
    lo = bisect.bisect_left(keys, window.start_sample)
    hi = bisect.bisect_left(keys, window.stop_sample)
    return annotations[lo:hi]


def label_arrhythmia(window: RawWindow, annotations: Sequence[AnnotationEvent]) -> ClassTag:
    """AAMI rule: any Q beat or no beats -> Noisy; any S/V/F beat -> Abnormal; else Normal"""
    classes = [AAMI_CLASSES[event.symbol] for event in _events_in(window, annotations)
               if event.symbol in AAMI_CLASSES]
    if not classes or "Q" in classes:
        return ClassTag.NOISY
    if ABNORMAL_AAMI.intersection(classes):
        return ClassTag.ABNORMAL
    return ClassTag.NORMAL


def rhythm_events(annotations: Sequence[AnnotationEvent]) -> List[AnnotationEvent]:
    return [event for event in annotations if event.symbol == RHYTHM_SYMBOL and event.aux]


def label_afib(window: RawWindow, annotations: Sequence[AnnotationEvent]) -> ClassTag:
    """Majority-duration rule over the piecewise-constant rhythm timeline"""
    rhythms = rhythm_events(annotations)
    durations = Counter()
    for k, event in enumerate(rhythms):
        span_end = rhythms[k + 1].sample_index if k + 1 < len(rhythms) else window.stop_sample
        overlap = min(span_end, window.stop_sample) - max(event.sample_index, window.start_sample)
        if overlap <= 0:
            continue
        rhythm = event.aux.strip().rstrip("\x00")
        if rhythm in AFIB_RHYTHMS:
            durations[ClassTag.ABNORMAL] += overlap
        elif rhythm in NOISE_RHYTHMS:
            durations[ClassTag.NOISY] += overlap
        else:
            durations[ClassTag.NORMAL] += overlap

    length = window.stop_sample - window.start_sample
    if 2 * durations[ClassTag.ABNORMAL] > length:
        return ClassTag.ABNORMAL
    if 2 * durations[ClassTag.NORMAL] > length:
        return ClassTag.NORMAL
    return ClassTag.NOISY


def label_segments(record: EcgRecord, windows: Sequence[RawWindow], task: Task) -> List[Segment]:
    task = Task(task)
    if task == Task.AFIB:
        events = rhythm_events(record.annotations)
        labeller = label_afib
    else:
        events = list(record.annotations)
        labeller = label_arrhythmia

    samples = np.fromiter((event.sample_index for event in events), dtype=np.int64, count=len(events))
    segments = []
    for window in windows:
        if task == Task.AFIB:
            # The rhythm in force at the window start comes from the last earlier event
            lo = max(int(np.searchsorted(samples, window.start_sample, side="right")) - 1, 0)
        else:
            lo = int(np.searchsorted(samples, window.start_sample, side="left"))
        hi = int(np.searchsorted(samples, window.stop_sample, side="left"))
        tag = labeller(window, events[lo:hi])
        segments.append(Segment(record.patient_id, window.index, window.start_sample, tag))
    return segments


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def _records_present(data_dir: str, names: Iterable[str]) -> Dict[str, str]:
    """name -> 'signal' | 'annotations-only' | 'absent'"""
    status = {}
    for name in names:
        if has_signal(data_dir, name):
            status[name] = "signal"
        elif any(os.path.exists(os.path.join(data_dir, f"{name}.{ext}")) for ext in ("hea", "atr")):
            status[name] = "annotations-only"
        else:
            status[name] = "absent"
    return status


def make_split(task: Task, data_dir: Optional[str] = None, seed: int = 0,
               validation_fraction: float = 0.30, paradigm: str = "inter",
               patient_wise_validation: bool = False) -> SplitSpec:
    """Standard inter-patient splits: DS1/DS2 for arrhythmia, DS3/DS4 for AFIB"""
    task = Task(task)
    if task == Task.ARRHYTHMIA:
        universe = [name for name in MITDB_RECORDS if name not in MITDB_DISCARDED]
        discarded = set(MITDB_DISCARDED)
        test = set(MITDB_TEST)
    else:
        universe = list(AFDB_RECORDS)
        discarded = set()
        test = set(AFDB_TEST)

    if data_dir is not None:
        status = _records_present(data_dir, universe)
        without_signal = sorted(name for name, state in status.items() if state == "annotations-only")
        absent = [name for name, state in status.items() if state == "absent"]
        if task == Task.AFIB:
            # Annotation-only records are expected for this database
            absent = [name for name in absent if name not in AFDB_WITHOUT_SIGNAL]
            absent_known = [name for name, state in status.items()
                            if state == "absent" and name in AFDB_WITHOUT_SIGNAL]
            without_signal = sorted(set(without_signal) | set(absent_known))
        if absent or (without_signal and task == Task.ARRHYTHMIA):
            raise MissingRecordsError(absent + (without_signal if task == Task.ARRHYTHMIA else []))
        if without_signal:
            logger.warning(f"⚠️ Excluding record(s) without signal files: {', '.join(without_signal)}")
        discarded |= set(without_signal)
    elif task == Task.AFIB:
        discarded |= set(AFDB_WITHOUT_SIGNAL)

    eligible = [name for name in universe if name not in discarded]
    if paradigm == "intra":
        train = set(eligible)
        test_set = set(eligible)
    else:
        test_set = test & set(eligible)
        train = set(eligible) - test_set

    return SplitSpec(task=task, train_patients=frozenset(train), test_patients=frozenset(test_set),
                     validation_fraction=validation_fraction, seed=seed,
                     discarded=frozenset(discarded), paradigm=paradigm,
                     patient_wise_validation=patient_wise_validation)


def make_random_split(task: Task, patients: Sequence[str], test_fraction: float = 0.16, seed: int = 0,
                      validation_fraction: float = 0.30, patient_wise_validation: bool = False) -> SplitSpec:
    """Seeded inter-patient split for arbitrary record sets (synthetic data, custom cohorts)"""
    patients = sorted(set(patients))
    if len(patients) < 2:
        raise ParameterError("an inter-patient split needs at least 2 patients")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_test = min(max(1, int(round(test_fraction * len(patients)))), len(patients) - 1)
    return SplitSpec(task=Task(task), train_patients=frozenset(order[n_test:]),
                     test_patients=frozenset(order[:n_test]), validation_fraction=validation_fraction,
                     seed=seed, patient_wise_validation=patient_wise_validation)


def assign_segments(segments: Sequence[Segment], split: SplitSpec) -> List[str]:
    """Partition name for every segment: train / validation / test / excluded"""
    rng = np.random.default_rng(split.seed)
    partitions = ["excluded"] * len(segments)
    candidates = []

    eligible_patients = split.train_patients | split.test_patients
    pool = [i for i, seg in enumerate(segments)
            if seg.class_tag != ClassTag.NOISY and seg.patient_id in eligible_patients]

    if split.paradigm == "intra":
        order = rng.permutation(len(pool))
        n_test = int(round(split.intra_test_fraction * len(pool)))
        for rank, position in enumerate(order):
            if rank < n_test:
                partitions[pool[position]] = "test"
            else:
                candidates.append(pool[position])
        candidates.sort()
    else:
        for i in pool:
            if segments[i].patient_id in split.test_patients:
                partitions[i] = "test"
            else:
                candidates.append(i)

    for i in candidates:
        partitions[i] = "train"

    if split.patient_wise_validation:
        patients = sorted({segments[i].patient_id for i in candidates})
        per_patient = Counter(segments[i].patient_id for i in candidates)
        target = split.validation_fraction * len(candidates)
        chosen, total = set(), 0
        for position in rng.permutation(len(patients)):
            if total >= target:
                break
            chosen.add(patients[position])
            total += per_patient[patients[position]]
        for i in candidates:
            if segments[i].patient_id in chosen:
                partitions[i] = "validation"
    else:
        n_validation = int(round(split.validation_fraction * len(candidates)))
        for position in rng.permutation(len(candidates))[:n_validation]:
            partitions[candidates[position]] = "validation"

    if split.paradigm == "inter":
        check_patient_disjoint(segments, partitions)
    return partitions


def check_patient_disjoint(segments: Sequence[Segment], partitions: Sequence[str]) -> None:
    """Inter-patient guard: no patient contributes to both training and test partitions"""
    training = {seg.patient_id for seg, part in zip(segments, partitions) if part in ("train", "validation")}
    testing = {seg.patient_id for seg, part in zip(segments, partitions) if part == "test"}
    leaked = training & testing
    if leaked:
        raise DataError(f"inter-patient guard violated for patient(s): {sorted(leaked)}")


def distribution(segments: Sequence[Segment], split: SplitSpec) -> DistributionReport:
    """Per-class segment counts for the training set, the test set and the total"""
    task = Task(split.task)
    names = CLASS_NAMES[task]
    train_name, test_name = SET_NAMES.get(task, ("train", "test"))
    if split.paradigm == "intra":
        groups = {"pooled": split.train_patients | split.test_patients}
    else:
        groups = {train_name: split.train_patients, test_name: split.test_patients}

    report = DistributionReport(task=task)
    total = Counter()
    for group, patients in groups.items():
        counts = Counter(names[seg.class_tag] for seg in segments if seg.patient_id in patients)
        row = {name: counts.get(name, 0) for name in names.values()}
        row["Total"] = sum(counts.values())
        report.rows[group] = row
        total.update(counts)
    report.rows["Total"] = {name: total.get(name, 0) for name in names.values()}
    report.rows["Total"]["Total"] = sum(total.values())
    return report


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def write_split_manifest(path: str, split: SplitSpec, segments: Sequence[Segment],
                         partitions: Sequence[str]) -> str:
    document = {
        "split": split.to_dict(),
        "segments": [[seg.patient_id, seg.index, seg.start_sample, seg.class_tag.value, part]
                     for seg, part in zip(segments, partitions)],
    }
    return write_json(path, document)


def read_split_manifest(path: str, stage: Optional[str] = "split"):
    document = read_json(path, stage=stage)
    split = SplitSpec.from_dict(document["split"])
    segments = [Segment(patient, index, start, ClassTag(tag))
                for patient, index, start, tag, _ in document["segments"]]
    partitions = [row[4] for row in document["segments"]]
    return split, segments, partitions
