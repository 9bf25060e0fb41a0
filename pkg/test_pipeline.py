#!/usr/bin/env python3
"""
Test configuration resolution, CLI exit codes, stage manifests and the
synthetic end-to-end run (LSTM baseline vs LSTM features + SVM)
"""

import json
import os
import sys
import tempfile

import pandas as pd
import pytest
from dotenv import load_dotenv

import cli
from lstm_net import load_model, model_digest
from pipeline import (PipelineConfig, _format_metric, benchmark, build_dataset, render_markdown, run_all,
                      run_stage, stage_benchmark, stage_export_features, stage_report)
from testing_support import run_tests
from utils.config_loader import load_config_file, resolve_settings
from utils.errors import MissingArtifactError, ParameterError
from utils.synthetic_ecg import SyntheticSettings, synthesize_dataset, write_dataset


def _write_records(directory, n_records, segments_per_record, seed=0):
    settings = SyntheticSettings(n_records=n_records, segments_per_record=segments_per_record, seed=seed)
    return write_dataset(synthesize_dataset(settings), directory)


def _config(data_dir, output_dir, **overrides):
    values = resolve_settings()
    values.update(data_dir=data_dir, output_dir=output_dir, record_format="interchange")
    values.update(overrides)
    return PipelineConfig.from_settings(values)


def _small_training(data_dir, output_dir, **overrides):
    settings = dict(seed=7, hidden_size=8, learning_rate=0.01, batch_size=32, max_epochs=30, patience=8,
                    grid_c_values=(0.5, 1.0), grid_weight_values=(0.5, 1.0))
    settings.update(overrides)
    return _config(data_dir, output_dir, **settings)


def _read_bytes(path):
    with open(path, "rb") as handle:
        return handle.read()


def _markdown_rows(path):
    with open(path, encoding="utf-8") as handle:
        lines = [line for line in handle.read().splitlines() if line.startswith("| ")]
    header = [cell.strip() for cell in lines[0].strip("|").split("|")]
    rows = {}
    for line in lines[1:]:
        cells = [cell.strip() for cell in line.strip("|").split("|")]
        rows[cells[0]] = dict(zip(header[1:], cells[1:]))
    return rows


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_defaults():
    values = resolve_settings()
    assert values["hidden_size"] == 100
    assert values["batch_size"] == 64
    assert values["seed"] is None
    config = PipelineConfig.from_settings(values)
    assert config.train.clip_norm == 5.0
    assert config.preprocess.target_hz == 100.0


def test_flags_override_file_override_defaults():
    with tempfile.TemporaryDirectory() as directory:
        path = os.path.join(directory, "run.env")
        with open(path, "w") as handle:
            handle.write("# desk run\nHIDDEN_SIZE=8\nSEED=3\nZERO_PHASE=yes\nGRID_C_VALUES=0.5,1.5\n")
        args = cli.build_parser().parse_args(["train-lstm", "--config", path, "--hidden-size", "16"])
        values = resolve_settings(args)
    assert values["hidden_size"] == 16
    assert values["seed"] == 3
    assert values["zero_phase"] is True
    assert values["grid_c_values"] == (0.5, 1.5)
    assert values["batch_size"] == 64


def test_bad_config_files():
    with tempfile.TemporaryDirectory() as directory:
        unknown = os.path.join(directory, "unknown.env")
        with open(unknown, "w") as handle:
            handle.write("HIDDEN_UNITS=8\n")
        malformed = os.path.join(directory, "malformed.env")
        with open(malformed, "w") as handle:
            handle.write("HIDDEN_SIZE=eight\n")

        with pytest.raises(ParameterError) as info:
            load_config_file(unknown)
        assert "HIDDEN_UNITS" in str(info.value)
        with pytest.raises(ParameterError):
            load_config_file(malformed)
        with pytest.raises(ParameterError):
            load_config_file(os.path.join(directory, "absent.env"))


def test_invalid_settings():
    with pytest.raises(ParameterError):
        _config(None, "out", task="ecg")
    with pytest.raises(ParameterError):
        _config(None, "out", record_format="edf")
    with pytest.raises(ParameterError):
        _config(None, "out", workers=0)


def test_digest_ignores_locations():
    assert _config("a", "b", seed=1).digest() == _config("c", "d", seed=1).digest()
    assert _config("a", "b", seed=1).digest() != _config("a", "b", seed=2).digest()


# ---------------------------------------------------------------------------
# Stage preconditions and exit codes
# ---------------------------------------------------------------------------

def test_missing_artifact_names_the_stage():
    with tempfile.TemporaryDirectory() as directory:
        config = _config(None, directory, seed=1)
        with pytest.raises(MissingArtifactError) as info:
            run_stage("evaluate", config)
        with pytest.raises(MissingArtifactError) as split_info:
            run_stage("split", config)
    assert "run train-lstm first" in str(info.value)
    assert "run ingest first" in str(split_info.value)


def test_train_stages_need_a_seed():
    with tempfile.TemporaryDirectory() as directory:
        with pytest.raises(ParameterError):
            run_stage("train-lstm", _config(None, directory))
        with pytest.raises(ParameterError):
            run_stage("train-svm", _config(None, directory))
    with pytest.raises(ParameterError):
        run_stage("deploy", _config(None, "out"))


def test_cli_exit_codes():
    with tempfile.TemporaryDirectory() as directory:
        output_dir = os.path.join(directory, "out")
        assert cli.main(["ingest", "--no-such-flag"]) == cli.EXIT_USAGE
        assert cli.main(["evaluate", "--output-dir", output_dir]) == cli.EXIT_USAGE
        assert cli.main(["train-lstm", "--output-dir", output_dir]) == cli.EXIT_USAGE
        assert cli.main(["ingest", "--data-dir", os.path.join(directory, "absent"),
                         "--record-format", "interchange", "--output-dir", output_dir]) == cli.EXIT_DATA


def test_cli_synthetic_writes_records():
    with tempfile.TemporaryDirectory() as directory:
        data_dir = os.path.join(directory, "records")
        code = cli.main(["synthetic", "--data-dir", data_dir, "--n-records", "3",
                         "--segments-per-record", "2", "--seed", "4"])
        names = sorted(os.listdir(data_dir))
    assert code == cli.EXIT_OK
    assert names == ["syn000.ecg", "syn001.ecg", "syn002.ecg"]


# ---------------------------------------------------------------------------
# Dataset stages
# ---------------------------------------------------------------------------

def test_build_dataset_outputs_and_idempotent_manifests():
    with tempfile.TemporaryDirectory() as directory:
        data_dir = os.path.join(directory, "records")
        _write_records(data_dir, n_records=4, segments_per_record=3)
        first = _config(data_dir, os.path.join(directory, "first"), seed=2)
        second = _config(data_dir, os.path.join(directory, "second"), seed=2)
        results = build_dataset(first)
        build_dataset(second)
        build_dataset(first)

        assert [result.stage for result in results] == ["ingest", "preprocess", "split"]
        segments = pd.read_csv(first.path("segments.csv"), dtype={"record_id": str})
        for stage in ("ingest", "preprocess", "split"):
            name = f"{stage}.manifest.json"
            assert _read_bytes(first.path(name)) == _read_bytes(second.path(name)), name
        with open(first.path("split.json")) as handle:
            split = json.load(handle)
        distribution = pd.read_csv(first.path("distribution.csv"), index_col="set")

    assert len(segments) == 12
    assert set(segments["record_id"]) == {"syn000", "syn001", "syn002", "syn003"}
    assert set(segments["class_tag"]) <= {"normal", "abnormal"}
    assert len(split["split"]["test_patients"]) == 1
    assert int(distribution.loc["Total", "Total"]) == 12


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def test_format_metric():
    assert _format_metric(None) == "undefined"
    assert _format_metric(float("nan")) == "undefined"
    assert _format_metric(0.94021) == "0.9402"


def test_render_markdown():
    frame = pd.DataFrame({"Accuracy": [0.9, 0.8], "Specificity": [None, 0.5]}, index=["LSF", "Baseline"])
    frame.index.name = "Method"
    markdown = render_markdown(frame, "AFIB detection")
    lines = markdown.splitlines()
    assert lines[0] == "## AFIB detection"
    assert lines[2] == "| Method | Accuracy | Specificity |"
    assert lines[4] == "| LSF | 0.9000 | undefined |"
    assert lines[5] == "| Baseline | 0.8000 | 0.5000 |"


# ---------------------------------------------------------------------------
# End to end on synthetic records
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_synthetic_end_to_end():
    with tempfile.TemporaryDirectory() as directory:
        data_dir = os.path.join(directory, "records")
        _write_records(data_dir, n_records=20, segments_per_record=20, seed=1)
        config = _small_training(data_dir, os.path.join(directory, "out"))

        results = run_all(config)
        assert results[-1].stage == "report"
        assert all(result.converged for result in results)

        _, meta = load_model(config.path("lstm_model.lsf"))
        with open(config.path("baseline_eval.json")) as handle:
            baseline = json.load(handle)
        with open(config.path("lsf_eval.json")) as handle:
            lsf = json.load(handle)
        history = pd.read_csv(config.path("lstm_history.csv"))
        grid = pd.read_csv(config.path("svm_grid.csv"))

        with pytest.raises(ParameterError):
            benchmark(config, n_segments=99)
        stage_benchmark(_small_training(data_dir, config.output_dir, n_segments=100))
        with open(config.path("benchmark.json")) as handle:
            timing = json.load(handle)

        stage_export_features(config)
        exported = pd.read_csv(config.path("features_export.csv"), dtype={"record_id": str})
        with open(config.path("report.md")) as handle:
            report = handle.read()
        markdown_rows = _markdown_rows(config.path("report.md"))
        csv_rows = pd.read_csv(config.path("report.csv"), index_col="Method", dtype=str)

        manifests = {stage: os.path.exists(config.path(f"{stage}.manifest.json"))
                     for stage in ("benchmark", "report", "export-features")}
        report_manifest = _read_bytes(config.path("report.manifest.json"))
        stage_report(config)
        assert _read_bytes(config.path("report.manifest.json")) == report_manifest
        with open(config.path("benchmark.manifest.json")) as handle:
            benchmark_manifest = json.load(handle)

    assert meta["best_val_ap"] >= 0.95
    assert history["val_ap"].max() == pytest.approx(meta["best_val_ap"])
    assert lsf["ap"] >= baseline["ap"]
    # 2 C values x 2 negative weights x 2 positive weights
    assert len(grid) == 8
    assert all(manifests.values()), manifests
    assert "benchmark.json" in json.dumps(benchmark_manifest)
    assert set(markdown_rows) == set(csv_rows.index) == {"LSF", "Baseline"}
    for method, cells in markdown_rows.items():
        assert list(cells) == list(csv_rows.columns)
        for column, text in cells.items():
            stored = csv_rows.loc[method, column]
            if text == "undefined":
                assert stored == "undefined"
            else:
                assert float(text) == float(stored)
    assert timing["n_segments"] == 100
    assert set(timing["seconds_per_segment"]) == {"preprocess", "lstm_forward", "pooling", "svm_score", "total"}
    assert list(exported.columns[:4]) == ["record_id", "segment_index", "partition", "label"]
    assert exported.shape[1] == 4 + 8
    assert set(exported["partition"]) == {"train", "validation", "test"}
    assert "| LSF |" in report and "| Baseline |" in report


@pytest.mark.slow
def test_synthetic_runs_are_deterministic():
    with tempfile.TemporaryDirectory() as directory:
        data_dir = os.path.join(directory, "records")
        _write_records(data_dir, n_records=6, segments_per_record=6, seed=2)
        outputs = []
        for run in ("a", "b"):
            config = _small_training(data_dir, os.path.join(directory, run), hidden_size=4, max_epochs=3)
            run_all(config)
            model, _ = load_model(config.path("lstm_model.lsf"))
            outputs.append((_read_bytes(config.path("split.json")), model_digest(model),
                            _read_bytes(config.path("svm_model.lsf")),
                            _read_bytes(config.path("lsf_eval.json")),
                            _read_bytes(config.path("baseline_eval.json"))))
    assert outputs[0] == outputs[1]


# ---------------------------------------------------------------------------
# Physical databases (LSF_MITDB_DIR / LSF_AFDB_DIR in the environment or .env)
# ---------------------------------------------------------------------------

def _full_run(variable, task):
    load_dotenv()
    data_dir = os.environ.get(variable)
    if not data_dir:
        pytest.skip(f"{variable} is not set")
    with tempfile.TemporaryDirectory() as directory:
        values = resolve_settings()
        values.update(data_dir=data_dir, output_dir=directory, task=task, seed=7)
        run_all(PipelineConfig.from_settings(values))
        with open(os.path.join(directory, "baseline_eval.json")) as handle:
            baseline = json.load(handle)
        with open(os.path.join(directory, "lsf_eval.json")) as handle:
            lsf = json.load(handle)
    return baseline, lsf


@pytest.mark.dataset
@pytest.mark.slow
def test_full_arrhythmia_run():
    baseline, lsf = _full_run("LSF_MITDB_DIR", "arrhythmia")
    assert lsf["ap"] >= baseline["ap"]
    assert abs(baseline["ap"] - 0.9235) <= 0.05


@pytest.mark.dataset
@pytest.mark.slow
def test_full_afib_run():
    _, lsf = _full_run("LSF_AFDB_DIR", "afib")
    assert abs(lsf["ap"] - 0.9563) <= 0.05


if __name__ == "__main__":
    sys.exit(run_tests(globals(), "Pipeline Test Suite"))
