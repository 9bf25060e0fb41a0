#!/usr/bin/env python3
"""
Test the high-pass filter, rational resampler, Haar DWT and z-score
normalisation, plus the feature cache
"""

import os
import sys
import tempfile

import numpy as np
import pandas as pd
import pytest

from preprocess import (NORM_EPSILON, PreprocessSettings, apply_filter, apply_norm, design_highpass,
                        design_resampling_filter, featurize_segment, fit_norm_stats, haar_dwt1, haar_tensor,
                        invert_norm, load_norm_stats, preprocess_record, preprocess_signal, read_feature_cache,
                        resample, save_norm_stats, write_feature_cache)
from testing_support import run_tests
from utils.errors import MissingArtifactError, ParameterError
from wfdb_io import make_record


# ---------------------------------------------------------------------------
# High-pass
# ---------------------------------------------------------------------------

def test_highpass_response():
    for fs in (360.0, 250.0):
        spec = design_highpass(0.5, fs, 4)
        assert spec.is_stable
        assert spec.gain_at(0.0)[0] < 1e-9
        assert spec.gain_at(0.5)[0] == pytest.approx(1 / np.sqrt(2), abs=1e-6)
        assert spec.gain_at(5.0)[0] == pytest.approx(1.0, rel=0.01)


def test_highpass_rejects_bad_cutoff():
    with pytest.raises(ParameterError):
        design_highpass(180.0, 360.0)
    with pytest.raises(ParameterError):
        design_highpass(0.0, 360.0)
    with pytest.raises(ParameterError):
        design_highpass(0.5, 360.0, order=0)


def test_highpass_constant_zero_and_impulse():
    spec = design_highpass(0.5, 360.0)
    constant = apply_filter(spec, np.full(360 * 60, 3.0))
    assert np.all(np.abs(constant[-360:]) < 1e-6 * 3.0)

    assert np.all(apply_filter(spec, np.zeros(1000)) == 0.0)

    impulse = np.zeros(360 * 120)
    impulse[0] = 1.0
    assert abs(apply_filter(spec, impulse).sum()) < 1e-6


def test_highpass_impulse_response_decays():
    for fs in (360.0, 250.0):
        for order in (2, 4):
            spec = design_highpass(0.5, fs, order)
            settle = int(10 * order / 0.5 * fs)
            impulse = np.zeros(settle + int(10 * fs))
            impulse[0] = 1.0
            response = apply_filter(spec, impulse)
            assert np.max(np.abs(response[settle:])) < 1e-8, (fs, order)


def test_zero_phase_filter_keeps_length():
    spec = design_highpass(0.5, 360.0)
    x = np.sin(2 * np.pi * 10 * np.arange(3600) / 360.0)
    assert apply_filter(spec, x, zero_phase=True).shape == x.shape
    assert apply_filter(spec, x[:5], zero_phase=True).shape == (5,)


def test_zero_phase_filter_has_no_passband_shift():
    fs = 360.0
    spec = design_highpass(0.5, fs)
    x = np.sin(2 * np.pi * 10 * np.arange(int(60 * fs)) / fs)
    y = apply_filter(spec, x, zero_phase=True)
    # edge effects of the reflected padding have decayed 20 s in
    margin = int(20 * fs)
    assert np.max(np.abs(y[margin:-margin] - x[margin:-margin])) < 1e-4
    causal = apply_filter(spec, x)
    assert np.max(np.abs(causal[margin:-margin] - x[margin:-margin])) > 1e-2


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def test_resample_lengths():
    assert resample(np.zeros(3600), 360.0, 100.0).size == 1000
    assert resample(np.zeros(2500), 250.0, 100.0).size == 1000
    assert resample(np.zeros(3601), 360.0, 100.0).size == 1001
    assert resample(np.arange(7.0), 100.0, 100.0).tolist() == list(range(7))


def test_resample_preserves_constant():
    out = resample(np.full(3600, 2.5), 360.0, 100.0)
    assert np.allclose(out[100:-100], 2.5, atol=2.5e-6)


def test_resample_sinusoid():
    t_in = np.arange(2500) / 250.0
    out = resample(np.sin(2 * np.pi * 5.0 * t_in), 250.0, 100.0)
    expected = np.sin(2 * np.pi * 5.0 * np.arange(1000) / 100.0)
    interior = slice(100, -100)
    rms = np.sqrt(np.mean((out[interior] - expected[interior]) ** 2))
    assert rms < 0.01 * np.sqrt(np.mean(expected[interior] ** 2))


def test_resample_rejects_awkward_ratio():
    with pytest.raises(ParameterError):
        resample(np.zeros(100), 360.0, 99.991)
    with pytest.raises(ParameterError):
        resample(np.zeros(100), 0.0, 100.0)


# ---------------------------------------------------------------------------
# Haar DWT
# ---------------------------------------------------------------------------

def test_haar_examples():
    cA, cD = haar_dwt1([1.0, 3.0])
    assert cA == pytest.approx([2 * np.sqrt(2)])
    assert cD == pytest.approx([-np.sqrt(2)])

    cA, cD = haar_dwt1([4.0, 4.0, 4.0, 4.0])
    assert cA == pytest.approx([4 * np.sqrt(2)] * 2)
    assert cD == pytest.approx([0.0, 0.0])

    with pytest.raises(ParameterError):
        haar_dwt1([])


def test_haar_matches_pair_formula():
    rng = np.random.default_rng(4)
    for n in (2, 7, 64, 1000, 1001):
        x = rng.normal(size=n)
        padded = np.append(x, x[-1]) if n % 2 else x
        cA, cD = haar_dwt1(x)
        assert np.allclose(cA, (padded[0::2] + padded[1::2]) / np.sqrt(2.0), rtol=0, atol=1e-12)
        assert np.allclose(cD, (padded[0::2] - padded[1::2]) / np.sqrt(2.0), rtol=0, atol=1e-12)


def test_haar_energy_and_shape():
    x = np.random.default_rng(1).normal(size=1000)
    tensor = haar_tensor(x)
    assert tensor.shape == (500, 2)
    assert np.sum(tensor ** 2) == pytest.approx(np.sum(x ** 2), rel=1e-12)


def test_haar_preserves_energy_on_random_signals():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        x = rng.normal(0.0, rng.uniform(0.1, 10.0), size=2 * int(rng.integers(1, 257)))
        cA, cD = haar_dwt1(x)
        assert np.sum(cA ** 2) + np.sum(cD ** 2) == pytest.approx(np.sum(x ** 2), rel=1e-9)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def test_norm_two_point_stats():
    stats = fit_norm_stats([np.zeros((4, 2)), np.full((4, 2), 2.0)])
    assert np.allclose(stats.mean, 1.0)
    assert np.allclose(stats.std, 1.0)
    assert np.allclose(apply_norm(stats, np.ones((4, 2))), 0.0)
    assert np.allclose(apply_norm(stats, stats.mean), 0.0)


def test_norm_degenerate_variance():
    t = np.arange(8.0).reshape(4, 2)
    stats = fit_norm_stats([t, t.copy()])
    assert np.all(stats.std == NORM_EPSILON)
    assert np.allclose(apply_norm(stats, t), 0.0)


def test_norm_channel_mode_and_inverse():
    batch = np.random.default_rng(2).normal(3.0, 2.0, size=(50, 10, 2))
    stats = fit_norm_stats(batch, mode="channel")
    assert np.allclose(stats.mean[0], stats.mean[-1])
    normalised = apply_norm(stats, batch)
    assert np.allclose(normalised.mean(axis=(0, 1)), 0.0, atol=1e-12)
    assert np.allclose(invert_norm(stats, normalised), batch)

    with pytest.raises(ParameterError):
        apply_norm(stats, np.zeros((9, 2)))
    with pytest.raises(ParameterError):
        fit_norm_stats([np.zeros((4, 2))])


def test_norm_stats_persistence():
    stats = fit_norm_stats(np.random.default_rng(3).normal(size=(5, 6, 2)))
    with tempfile.TemporaryDirectory() as directory:
        path = os.path.join(directory, "norm.lsf")
        save_norm_stats(stats, path)
        loaded = load_norm_stats(path)
        with pytest.raises(MissingArtifactError):
            load_norm_stats(os.path.join(directory, "absent.lsf"), stage="preprocess")
    assert np.array_equal(loaded.mean, stats.mean)
    assert np.array_equal(loaded.std, stats.std)
    assert loaded.mode == "elementwise"


# ---------------------------------------------------------------------------
# Segment pipeline
# ---------------------------------------------------------------------------

def test_segment_shape_contract():
    settings = PreprocessSettings()
    raw = np.random.default_rng(5).normal(size=3600)
    tensor = featurize_segment(raw, 360.0, settings)
    assert tensor.shape == (500, 2)


def test_segment_filters_are_designed_once():
    settings = PreprocessSettings()
    rng = np.random.default_rng(9)
    design_highpass.cache_clear()
    design_resampling_filter.cache_clear()
    for _ in range(5):
        featurize_segment(rng.normal(size=3600), 360.0, settings)
    assert design_highpass.cache_info().misses == 1
    assert design_highpass.cache_info().hits == 4
    assert design_resampling_filter.cache_info().misses == 1
    assert np.array_equal(tensor, featurize_segment(raw, 360.0, settings))
    assert featurize_segment(raw[:2500], 250.0, settings).shape == (500, 2)


def test_preprocess_record_uses_configured_channel():
    rng = np.random.default_rng(7)
    adu = rng.integers(-300, 300, size=(3600, 2))
    record = make_record("200", adu, 360.0, baseline=10)
    settings = PreprocessSettings(channel=1)
    out = preprocess_record(record, settings)
    expected = preprocess_signal((adu[:, 1] - 10) / 200.0, 360.0, settings)
    assert out.shape == (1000,)
    assert np.allclose(out, expected, rtol=0, atol=1e-12)
    with pytest.raises(ParameterError):
        preprocess_record(record, PreprocessSettings(channel=2))


def test_feature_cache_roundtrip():
    tensors = np.random.default_rng(6).normal(size=(3, 500, 2))
    manifest = pd.DataFrame({"record_id": ["00735", "100", "100"], "index": [0, 0, 1]})
    with tempfile.TemporaryDirectory() as directory:
        write_feature_cache(directory, tensors, manifest, {"task": "afib"})
        loaded, loaded_manifest, meta = read_feature_cache(directory)
    assert np.allclose(loaded, tensors.astype(np.float32))
    assert list(loaded_manifest["record_id"]) == ["00735", "100", "100"]
    assert meta["task"] == "afib"


if __name__ == "__main__":
    sys.exit(run_tests(globals(), "Preprocessing Test Suite"))
