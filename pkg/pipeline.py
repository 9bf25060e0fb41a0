"""
Stage orchestration for the LSF workflow.

    ingest -> preprocess -> split -> train-lstm -> extract-features
           -> train-svm -> evaluate -> benchmark / report / export-features

Stages talk to each other only through files in the output directory.
Each stage writes `<stage>.manifest.json` with its config digest, input
and output digests and library versions (no timestamps), so an unchanged
rerun reproduces the manifest byte for byte.
"""

import logging
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy

from dataset import (ClassTag, Segment, SplitSpec, Task, assign_segments, distribution, label_segments,
                     make_random_split, make_split, read_split_manifest, segment_record, write_split_manifest)
from lstm_net import (TrainConfig, extract_features, global_max_pool, history_to_csv, init_model, load_model,
                      lstm_forward, model_digest, predict_proba, save_model, train)
from metrics import evaluate, write_eval_report
from preprocess import (PreprocessSettings, apply_norm, featurize_segment, featurize_windows, fit_norm_stats,
                        load_norm_stats, preprocess_record, read_feature_cache, save_norm_stats,
                        write_feature_cache)
from svm import GridSettings, SvmConfig, decision_score, grid_search, load_svm, save_svm
from utils.artifact_store import (container_digest, file_digest, json_digest, read_container, read_json,
                                  write_container, write_json)
from utils.errors import DataError, MissingArtifactError, MissingRecordsError, ParameterError
from utils.synthetic_ecg import INTERCHANGE_SUFFIX
from wfdb_io import EcgRecord, read_interchange, read_record, to_millivolts

logger = logging.getLogger(__name__)

STAGES = ("ingest", "preprocess", "split", "train-lstm", "extract-features",
          "train-svm", "evaluate", "benchmark", "report", "export-features")
SEEDED_STAGES = ("train-lstm", "train-svm")
BASELINE_THRESHOLD = 0.5
LSF_THRESHOLD = 0.0
MIN_BENCHMARK_SEGMENTS = 100
WARMUP_SEGMENTS = 10
PARTITION_CODES = {"train": 0, "validation": 1, "test": 2}

SEGMENTS_FILE = "segments.csv"
SPLIT_FILE = "split.json"
NORM_FILE = "norm_stats.lsf"
LSTM_FILE = "lstm_model.lsf"
VECTORS_FILE = "lstm_features.lsf"
SVM_FILE = "svm_model.lsf"


@dataclass(frozen=True)
class PipelineConfig:
    data_dir: Optional[str]
    output_dir: str
    task: Task = Task.ARRHYTHMIA
    seed: Optional[int] = None
    record_format: str = "wfdb"
    annotation_ext: str = "atr"
    workers: int = 1
    preprocess: PreprocessSettings = PreprocessSettings()
    train: TrainConfig = TrainConfig()
    svm: SvmConfig = SvmConfig()
    grid: GridSettings = GridSettings()
    validation_fraction: float = 0.30
    patient_wise_validation: bool = False
    paradigm: str = "inter"
    test_fraction: float = 0.16
    n_segments: int = 1000

    def __post_init__(self):
        if self.record_format not in ("wfdb", "interchange"):
            raise ParameterError(f"record format must be 'wfdb' or 'interchange', got '{self.record_format}'")
        if self.workers < 1:
            raise ParameterError(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def from_settings(cls, values: dict) -> "PipelineConfig":
        """Build from resolved KEY=value settings (see utils.config_loader)"""
        try:
            task = Task(values["task"])
        except ValueError as exc:
            raise ParameterError(f"task must be 'arrhythmia' or 'afib', got '{values['task']}'") from exc
        seed = values["seed"]
        grid_defaults = GridSettings()
        return cls(
            data_dir=values["data_dir"],
            output_dir=values["output_dir"],
            task=task,
            seed=seed,
            record_format=values["record_format"],
            annotation_ext=values["annotation_ext"],
            workers=values["workers"],
            preprocess=PreprocessSettings(
                cutoff_hz=values["cutoff_hz"], filter_order=values["filter_order"],
                target_hz=values["target_hz"], norm_mode=values["norm_mode"],
                zero_phase=values["zero_phase"], channel=values["channel"], window_s=values["window_s"],
            ),
            train=TrainConfig(
                learning_rate=values["learning_rate"], batch_size=values["batch_size"],
                max_epochs=values["max_epochs"], patience=values["patience"], seed=seed or 0,
                hidden_size=values["hidden_size"], clip_norm=values["clip_norm"],
            ),
            svm=SvmConfig(gamma=values["svm_gamma"], tolerance=values["svm_tolerance"],
                          cache_mb=values["svm_cache_mb"]),
            grid=GridSettings(
                c_values=values["grid_c_values"] or grid_defaults.c_values,
                weight_values=values["grid_weight_values"] or grid_defaults.weight_values,
                gammas=values["grid_gammas"] or ((values["svm_gamma"],) if values["svm_gamma"] else None),
                subsample=values["grid_subsample"], workers=values["workers"], seed=seed or 0,
                tolerance=values["svm_tolerance"], cache_mb=values["svm_cache_mb"],
            ),
            validation_fraction=values["validation_fraction"],
            patient_wise_validation=values["patient_wise_validation"],
            paradigm=values["paradigm"],
            test_fraction=values["test_fraction"],
            n_segments=values["n_segments"],
        )

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def require_seed(self, stage: str) -> int:
        if self.seed is None:
            raise ParameterError(f"{stage} needs a seed: pass --seed or set SEED in the config file")
        return self.seed

    def digest(self) -> str:
        """Digest of everything except filesystem locations"""
        settings = asdict(self)
        settings.pop("data_dir")
        settings.pop("output_dir")
        settings["task"] = self.task.value
        return json_digest(settings)


@dataclass
class StageResult:
    stage: str
    outputs: Dict[str, str] = field(default_factory=dict)
    converged: bool = True


@dataclass
class LatencyStats:
    mean: float
    p50: float
    p95: float

    @classmethod
    def of(cls, samples: List[float]) -> "LatencyStats":
        values = np.asarray(samples)
        return cls(float(values.mean()), float(np.percentile(values, 50)), float(np.percentile(values, 95)))


@dataclass
class BenchmarkReport:
    n_segments: int
    stages: Dict[str, LatencyStats]
    hardware: str

    def to_dict(self) -> dict:
        return {"n_segments": self.n_segments, "hardware": self.hardware,
                "seconds_per_segment": {name: asdict(stats) for name, stats in self.stages.items()}}


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _versions() -> Dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__}


def _write_manifest(config: PipelineConfig, stage: str, inputs: Dict[str, str], outputs: Dict[str, str]) -> str:
    document = {"stage": stage, "task": config.task.value, "config_digest": config.digest(),
                "inputs": inputs, "outputs": outputs, "versions": _versions()}
    path = config.path(f"{stage}.manifest.json")
    write_json(path, document)
    return path


def _require_file(config: PipelineConfig, name: str, stage: str) -> str:
    path = config.path(name)
    if not os.path.exists(path):
        raise MissingArtifactError(name, stage)
    return path


def _record_names(config: PipelineConfig) -> List[str]:
    if not config.data_dir:
        raise ParameterError("a data directory is required: pass --data-dir or set DATA_DIR")
    if not os.path.isdir(config.data_dir):
        raise DataError(f"data directory not found: {config.data_dir}")
    if config.record_format == "interchange":
        names = sorted(entry[:-len(INTERCHANGE_SUFFIX)] for entry in os.listdir(config.data_dir)
                       if entry.endswith(INTERCHANGE_SUFFIX))
        if not names:
            raise MissingRecordsError([f"*{INTERCHANGE_SUFFIX} in {config.data_dir}"])
        return names
    split = make_split(config.task, config.data_dir, seed=config.seed or 0)
    return sorted(split.train_patients | split.test_patients)


def _load_record(config: PipelineConfig, name: str) -> EcgRecord:
    if config.record_format == "interchange":
        return read_interchange(os.path.join(config.data_dir, name + INTERCHANGE_SUFFIX))
    return read_record(config.data_dir, name, config.annotation_ext)


def _record_digest(config: PipelineConfig, name: str) -> str:
    if config.record_format == "interchange":
        files = [name + INTERCHANGE_SUFFIX]
    else:
        files = [f"{name}.{ext}" for ext in ("hea", "dat", config.annotation_ext)]
    digests = {entry: file_digest(os.path.join(config.data_dir, entry)) for entry in files
               if os.path.exists(os.path.join(config.data_dir, entry))}
    return json_digest(digests)


def _parallel_map(config: PipelineConfig, fn: Callable, items: List) -> List:
    if config.workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(fn, items))


def _segments_frame(segments: List[Segment]) -> pd.DataFrame:
    return pd.DataFrame({
        "record_id": [seg.patient_id for seg in segments],
        "segment_index": [seg.index for seg in segments],
        "start_sample": [seg.start_sample for seg in segments],
        "class_tag": [seg.class_tag.value for seg in segments],
        "label": [seg.label if seg.label is not None else -1 for seg in segments],
    })


def _read_segments(config: PipelineConfig) -> Tuple[List[Segment], pd.DataFrame]:
    path = _require_file(config, SEGMENTS_FILE, "ingest")
    frame = pd.read_csv(path, dtype={"record_id": str})
    segments = [Segment(row.record_id, int(row.segment_index), int(row.start_sample), ClassTag(row.class_tag))
                for row in frame.itertuples(index=False)]
    return segments, frame


def _load_split(config: PipelineConfig):
    split, segments, partitions = read_split_manifest(_require_file(config, SPLIT_FILE, "split"))
    return split, segments, np.asarray(partitions)


def _training_inputs(config: PipelineConfig):
    """Feature tensors, labels and partition names aligned on the segment order"""
    tensors, manifest, _ = read_feature_cache(config.output_dir)
    _, segments, partitions = _load_split(config)
    if len(segments) != len(tensors):
        raise DataError(f"split manifest has {len(segments)} segments but the feature cache has {len(tensors)}; "
                        f"rerun split")
    labels = np.array([seg.label if seg.label is not None else -1 for seg in segments], dtype=np.int64)
    return tensors, labels, partitions, segments


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_ingest(config: PipelineConfig) -> StageResult:
    names = _record_names(config)
    logger.info(f"📥 Ingesting {len(names)} {config.task.value} record(s) from {config.data_dir}")

    def ingest_one(name: str) -> List[Segment]:
        record = _load_record(config, name)
        return label_segments(record, segment_record(record, config.preprocess.window_s), config.task)

    segments = [seg for per_record in _parallel_map(config, ingest_one, names) for seg in per_record]
    os.makedirs(config.output_dir, exist_ok=True)
    _segments_frame(segments).to_csv(config.path(SEGMENTS_FILE), index=False)

    inputs = {name: _record_digest(config, name) for name in names}
    outputs = {SEGMENTS_FILE: file_digest(config.path(SEGMENTS_FILE))}
    _write_manifest(config, "ingest", inputs, outputs)
    logger.info(f"✅ Ingest: {len(segments)} segments from {len(names)} records")
    return StageResult("ingest", outputs)


def stage_preprocess(config: PipelineConfig) -> StageResult:
    segments, frame = _read_segments(config)
    names = list(dict.fromkeys(seg.patient_id for seg in segments))
    settings = config.preprocess
    order = {name: k for k, name in enumerate(names)}
    ranks = [order[seg.patient_id] for seg in segments]
    if ranks != sorted(ranks):
        raise DataError(f"{SEGMENTS_FILE} is not grouped by record; rerun ingest")

    def featurize_one(name: str) -> np.ndarray:
        record = _load_record(config, name)
        filtered = preprocess_record(record, settings)
        starts = [seg.start_sample for seg in segments if seg.patient_id == name]
        return featurize_windows(filtered, starts, record.header.sampling_rate, settings)

    per_record = _parallel_map(config, featurize_one, names)
    tensors = np.concatenate(per_record) if per_record else np.empty((0, (settings.window_length + 1) // 2, 2))
    digest = write_feature_cache(config.output_dir, tensors, frame,
                                 {"settings": asdict(settings), "n_segments": len(segments)})
    inputs = {SEGMENTS_FILE: file_digest(config.path(SEGMENTS_FILE))}
    outputs = {"features.lsf": digest}
    _write_manifest(config, "preprocess", inputs, outputs)
    logger.info(f"✅ Preprocess: {len(tensors)} feature tensors")
    return StageResult("preprocess", outputs)


def _build_split(config: PipelineConfig, segments: List[Segment]) -> SplitSpec:
    seed = config.seed or 0
    patients = sorted({seg.patient_id for seg in segments})
    if config.record_format == "wfdb":
        return make_split(config.task, config.data_dir, seed=seed,
                          validation_fraction=config.validation_fraction, paradigm=config.paradigm,
                          patient_wise_validation=config.patient_wise_validation)
    if config.paradigm == "intra":
        return SplitSpec(task=config.task, train_patients=frozenset(patients), test_patients=frozenset(patients),
                         validation_fraction=config.validation_fraction, seed=seed, paradigm="intra",
                         patient_wise_validation=config.patient_wise_validation,
                         intra_test_fraction=config.test_fraction)
    return make_random_split(config.task, patients, test_fraction=config.test_fraction, seed=seed,
                             validation_fraction=config.validation_fraction,
                             patient_wise_validation=config.patient_wise_validation)


def stage_split(config: PipelineConfig) -> StageResult:
    segments, _ = _read_segments(config)
    split = _build_split(config, segments)
    partitions = assign_segments(segments, split)
    digest = write_split_manifest(config.path(SPLIT_FILE), split, segments, partitions)

    report = distribution(segments, split)
    frame = report.to_frame()
    frame.to_csv(config.path("distribution.csv"), index_label="set")
    counts = pd.Series(partitions).value_counts().to_dict()
    logger.info(f"✅ Split: {counts}")
    logger.info(f"📊 Segment distribution:\n{frame.to_string()}")

    inputs = {SEGMENTS_FILE: file_digest(config.path(SEGMENTS_FILE))}
    outputs = {SPLIT_FILE: digest, "distribution.csv": file_digest(config.path("distribution.csv"))}
    _write_manifest(config, "split", inputs, outputs)
    return StageResult("split", outputs)


def stage_train_lstm(config: PipelineConfig) -> StageResult:
    seed = config.require_seed("train-lstm")
    tensors, labels, partitions, _ = _training_inputs(config)
    train_idx = np.flatnonzero(partitions == "train")
    val_idx = np.flatnonzero(partitions == "validation")
    if len(train_idx) < 2:
        raise DataError("fewer than 2 training segments after the split")

    stats = fit_norm_stats(tensors[train_idx], mode=config.preprocess.norm_mode)
    X = apply_norm(stats, tensors)
    model = init_model(config.train.hidden_size, input_dim=X.shape[-1], seed=seed)
    logger.info(f"🧠 Training LSTM (u={config.train.hidden_size}) on {len(train_idx)} segments, "
                f"validating on {len(val_idx)}")
    best, history = train(model, X[train_idx], labels[train_idx], X[val_idx], labels[val_idx], config.train)

    outputs = {
        NORM_FILE: save_norm_stats(stats, config.path(NORM_FILE)),
        LSTM_FILE: save_model(config.path(LSTM_FILE), best, {"best_epoch": history.best_epoch,
                                                            "best_val_ap": history.best_val_ap}),
    }
    history_to_csv(history, config.path("lstm_history.csv"))
    outputs["lstm_history.csv"] = file_digest(config.path("lstm_history.csv"))
    inputs = {"features.lsf": container_digest(config.path("features.lsf")),
              SPLIT_FILE: file_digest(config.path(SPLIT_FILE))}
    _write_manifest(config, "train-lstm", inputs, outputs)
    logger.info(f"✅ LSTM trained: best epoch {history.best_epoch}, val AP {history.best_val_ap:.4f}, "
                f"digest {model_digest(best)[:12]}")
    return StageResult("train-lstm", outputs)


def _load_lstm(config: PipelineConfig):
    model, _ = load_model(_require_file(config, LSTM_FILE, "train-lstm"))
    stats = load_norm_stats(_require_file(config, NORM_FILE, "train-lstm"), stage="train-lstm")
    return model, stats


def stage_extract_features(config: PipelineConfig) -> StageResult:
    model, stats = _load_lstm(config)
    tensors, labels, partitions, _ = _training_inputs(config)
    used = np.flatnonzero(np.isin(partitions, list(PARTITION_CODES)))
    vectors = extract_features(model, apply_norm(stats, tensors[used]))
    arrays = {
        "features": vectors,
        "labels": labels[used],
        "indices": used,
        "partitions": np.array([PARTITION_CODES[p] for p in partitions[used]], dtype=np.int64),
    }
    digest = write_container(config.path(VECTORS_FILE), "VECS", arrays, {"hidden_size": model.hidden_size})
    inputs = {LSTM_FILE: container_digest(config.path(LSTM_FILE)),
              "features.lsf": container_digest(config.path("features.lsf"))}
    outputs = {VECTORS_FILE: digest}
    _write_manifest(config, "extract-features", inputs, outputs)
    logger.info(f"✅ Extracted {vectors.shape[0]} feature vectors of size {vectors.shape[1]}")
    return StageResult("extract-features", outputs)


def _load_vectors(config: PipelineConfig) -> Dict[str, np.ndarray]:
    arrays, _ = read_container(config.path(VECTORS_FILE), expected_kind="VECS", stage="extract-features")
    return arrays


def _partition(arrays: Dict[str, np.ndarray], name: str) -> Tuple[np.ndarray, np.ndarray]:
    mask = arrays["partitions"] == PARTITION_CODES[name]
    return arrays["features"][mask], arrays["labels"][mask]


def stage_train_svm(config: PipelineConfig) -> StageResult:
    config.require_seed("train-svm")
    arrays = _load_vectors(config)
    X_train, y_train = _partition(arrays, "train")
    X_val, y_val = _partition(arrays, "validation")
    best_config, model, table = grid_search(X_train, y_train, X_val, y_val, config.grid)
    table.to_csv(config.path("svm_grid.csv"), index=False, float_format="%.10g")

    outputs = {SVM_FILE: save_svm(config.path(SVM_FILE), model)}
    inputs = {VECTORS_FILE: container_digest(config.path(VECTORS_FILE))}
    _write_manifest(config, "train-svm", inputs, outputs)
    if not model.converged:
        logger.warning(f"⚠️ Selected SVM (C={best_config.C}) stopped at its iteration cap")
    logger.info(f"✅ SVM trained: {model.n_support} support vectors")
    return StageResult("train-svm", outputs, converged=model.converged)


def stage_evaluate(config: PipelineConfig) -> StageResult:
    model, stats = _load_lstm(config)
    svm_model, _ = load_svm(_require_file(config, SVM_FILE, "train-svm"))
    tensors, labels, partitions, _ = _training_inputs(config)
    test_idx = np.flatnonzero(partitions == "test")
    if len(test_idx) == 0:
        raise DataError("the split has no test segments")

    baseline = evaluate(predict_proba(model, apply_norm(stats, tensors[test_idx])), labels[test_idx],
                        BASELINE_THRESHOLD)
    X_test, y_test = _partition(_load_vectors(config), "test")
    lsf = evaluate(decision_score(svm_model, X_test), y_test, LSF_THRESHOLD)

    outputs = {}
    for prefix, report in (("baseline", baseline), ("lsf", lsf)):
        for _, path in write_eval_report(report, config.output_dir, prefix).items():
            outputs[os.path.basename(path)] = file_digest(path)
    inputs = {LSTM_FILE: container_digest(config.path(LSTM_FILE)),
              SVM_FILE: container_digest(config.path(SVM_FILE)),
              VECTORS_FILE: container_digest(config.path(VECTORS_FILE))}
    _write_manifest(config, "evaluate", inputs, outputs)
    logger.info(f"✅ Evaluate: baseline AP {baseline.ap:.4f}, LSF AP {lsf.ap:.4f}")
    return StageResult("evaluate", outputs)


def benchmark(config: PipelineConfig, n_segments: Optional[int] = None) -> BenchmarkReport:
    """Cold single-segment inference, raw samples in -> label out"""
    n_segments = n_segments if n_segments is not None else config.n_segments
    if n_segments < MIN_BENCHMARK_SEGMENTS:
        raise ParameterError(f"benchmark needs at least {MIN_BENCHMARK_SEGMENTS} segments, got {n_segments}")
    model, stats = _load_lstm(config)
    svm_model, _ = load_svm(_require_file(config, SVM_FILE, "train-svm"))
    _, segments, partitions = _load_split(config)
    chosen = [seg for seg, part in zip(segments, partitions) if part == "test"] or \
             [seg for seg, part in zip(segments, partitions) if part != "excluded"]
    if not chosen:
        raise DataError("no labelled segments to benchmark")

    signals = {}
    raw_windows = []
    for seg in (chosen * (1 + (n_segments + WARMUP_SEGMENTS) // len(chosen)))[:n_segments + WARMUP_SEGMENTS]:
        if seg.patient_id not in signals:
            record = _load_record(config, seg.patient_id)
            signals[seg.patient_id] = (to_millivolts(record, config.preprocess.channel),
                                       record.header.sampling_rate)
        signal_mv, fs = signals[seg.patient_id]
        length = int(round(config.preprocess.window_s * fs))
        raw_windows.append((signal_mv[seg.start_sample:seg.start_sample + length], fs))

    timings = {name: [] for name in ("preprocess", "lstm_forward", "pooling", "svm_score", "total")}
    for k, (raw, fs) in enumerate(raw_windows):
        t0 = time.perf_counter()
        x = apply_norm(stats, featurize_segment(raw, fs, config.preprocess))
        t1 = time.perf_counter()
        hidden, _ = lstm_forward(model.layer1, x)
        hidden, _ = lstm_forward(model.layer2, hidden)
        t2 = time.perf_counter()
        v = global_max_pool(hidden)
        t3 = time.perf_counter()
        int(decision_score(svm_model, v) > LSF_THRESHOLD)
        t4 = time.perf_counter()
        if k < WARMUP_SEGMENTS:
            continue
        for name, seconds in (("preprocess", t1 - t0), ("lstm_forward", t2 - t1), ("pooling", t3 - t2),
                              ("svm_score", t4 - t3), ("total", t4 - t0)):
            timings[name].append(seconds)

    hardware = f"{platform.platform()} | {platform.processor() or platform.machine()} | {os.cpu_count()} CPU(s)"
    report = BenchmarkReport(n_segments, {name: LatencyStats.of(values) for name, values in timings.items()},
                             hardware)
    logger.info(f"⏱️ Mean end-to-end latency: {report.stages['total'].mean:.4f} s per segment ({hardware})")
    return report


def stage_benchmark(config: PipelineConfig) -> StageResult:
    report = benchmark(config)
    path = config.path("benchmark.json")
    write_json(path, report.to_dict())
    inputs = {name: container_digest(config.path(name)) for name in (NORM_FILE, LSTM_FILE, SVM_FILE)}
    inputs[SPLIT_FILE] = file_digest(config.path(SPLIT_FILE))
    # benchmark.json holds wall-clock timings and is listed without a digest
    _write_manifest(config, "benchmark", inputs, {"benchmark.json": "timings"})
    return StageResult("benchmark", {"benchmark.json": path})


REPORT_COLUMNS = (("Accuracy", "accuracy"), ("Recall", "recall"), ("Specificity", "specificity"),
                  ("AUC ROC", "auc_roc"), ("AP score", "ap"))


def comparison_table(config: PipelineConfig) -> pd.DataFrame:
    rows = {}
    for method, prefix in (("LSF", "lsf"), ("Baseline", "baseline")):
        document = read_json(config.path(f"{prefix}_eval.json"), stage="evaluate")
        rows[method] = {column: document[key] for column, key in REPORT_COLUMNS}
    frame = pd.DataFrame.from_dict(rows, orient="index")
    frame.index.name = "Method"
    return frame


def _format_metric(value) -> str:
    return "undefined" if value is None or pd.isna(value) else f"{value:.4f}"


def render_markdown(frame: pd.DataFrame, title: str) -> str:
    header = ["Method"] + list(frame.columns)
    lines = [f"## {title}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for method, row in frame.iterrows():
        lines.append("| " + " | ".join([method] + [_format_metric(value) for value in row]) + " |")
    return "\n".join(lines) + "\n"


def stage_report(config: PipelineConfig) -> StageResult:
    frame = comparison_table(config)
    title = "Arrhythmia detection" if config.task == Task.ARRHYTHMIA else "AFIB detection"
    markdown = render_markdown(frame, title)
    with open(config.path("report.md"), "w", encoding="utf-8") as handle:
        handle.write(markdown)
    frame.map(_format_metric).to_csv(config.path("report.csv"))
    inputs = {f"{prefix}_eval.json": file_digest(config.path(f"{prefix}_eval.json")) for prefix in ("baseline", "lsf")}
    outputs = {name: file_digest(config.path(name)) for name in ("report.md", "report.csv")}
    _write_manifest(config, "report", inputs, outputs)
    return StageResult("report", {"report.md": config.path("report.md"), "report.csv": config.path("report.csv")})


def stage_export_features(config: PipelineConfig) -> StageResult:
    arrays = _load_vectors(config)
    _, segments, _ = _load_split(config)
    names = {code: name for name, code in PARTITION_CODES.items()}
    vectors = arrays["features"]
    frame = pd.DataFrame(vectors, columns=[f"v_{j}" for j in range(vectors.shape[1])])
    frame.insert(0, "record_id", [segments[i].patient_id for i in arrays["indices"]])
    frame.insert(1, "segment_index", [segments[i].index for i in arrays["indices"]])
    frame.insert(2, "partition", [names[int(code)] for code in arrays["partitions"]])
    frame.insert(3, "label", arrays["labels"])
    path = config.path("features_export.csv")
    frame.to_csv(path, index=False, float_format="%.10g")
    inputs = {VECTORS_FILE: container_digest(config.path(VECTORS_FILE)),
              SPLIT_FILE: file_digest(config.path(SPLIT_FILE))}
    _write_manifest(config, "export-features", inputs, {"features_export.csv": file_digest(path)})
    logger.info(f"✅ Exported {len(frame)} feature vectors to {path}")
    return StageResult("export-features", {"features_export.csv": path})


STAGE_RUNNERS: Dict[str, Callable[[PipelineConfig], StageResult]] = {
    "ingest": stage_ingest,
    "preprocess": stage_preprocess,
    "split": stage_split,
    "train-lstm": stage_train_lstm,
    "extract-features": stage_extract_features,
    "train-svm": stage_train_svm,
    "evaluate": stage_evaluate,
    "benchmark": stage_benchmark,
    "report": stage_report,
    "export-features": stage_export_features,
}


def run_stage(stage: str, config: PipelineConfig) -> StageResult:
    runner = STAGE_RUNNERS.get(stage)
    if runner is None:
        raise ParameterError(f"unknown stage '{stage}'; expected one of {', '.join(STAGES)}")
    if stage in SEEDED_STAGES:
        config.require_seed(stage)
    logger.info(f"🚀 Stage {stage}")
    return runner(config)


def build_dataset(config: PipelineConfig) -> List[StageResult]:
    """ingest -> preprocess -> split"""
    return [run_stage(stage, config) for stage in ("ingest", "preprocess", "split")]


def run_all(config: PipelineConfig) -> List[StageResult]:
    """Every stage through evaluate and report"""
    stages = ("ingest", "preprocess", "split", "train-lstm", "extract-features", "train-svm", "evaluate", "report")
    return [run_stage(stage, config) for stage in stages]
