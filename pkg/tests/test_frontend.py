import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlasr.errors import DataError
from mlasr.frontend import (
    FeatureMatrix,
    FrontendConfig,
    Waveform,
    cmvn_by_speaker,
    featurize,
    hz_to_mel,
    log_mel,
    num_frames,
    read_archive,
    read_wav,
    speed_perturb,
    stack_downsample,
    write_archive,
    write_wav,
)

NO_DITHER = FrontendConfig(dither=0.0)


def tone(freq, n, rate=8000, amp=0.3):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / rate)


def test_one_second_at_8k_gives_98_frames():
    w = Waveform(tone(440, 8000), 8000)
    assert log_mel(w).frames.shape == (98, 80)


def test_exact_window_gives_one_frame():
    assert log_mel(Waveform(tone(440, 200), 8000)).num_frames == 1
    with pytest.raises(DataError, match="too short"):
        log_mel(Waveform(tone(440, 199), 8000))


def test_unsupported_rate():
    with pytest.raises(DataError):
        log_mel(Waveform(tone(440, 4000), 44100))


def test_silence_hits_log_floor():
    feats = log_mel(Waveform(np.zeros(1600), 8000), NO_DITHER).frames
    assert np.all(feats == math.log(1e-10))


def test_frame_count_formula_random_lengths():
    rng = np.random.default_rng(0)
    for rate in (8000, 16000):
        cfg = NO_DITHER
        win, hop = cfg.window_samples(rate), cfg.hop_samples(rate)
        for n in rng.integers(win, win + 5000, size=500):
            x = rng.standard_normal(n) * 0.1
            t = log_mel(Waveform(x, rate), cfg).num_frames
            assert t == 1 + (n - win) // hop == num_frames(n, win, hop)


def test_energy_scaling_adds_log4():
    x = tone(700, 4000) + 0.05 * np.random.default_rng(1).standard_normal(4000)
    a = log_mel(Waveform(x, 8000), NO_DITHER).frames
    b = log_mel(Waveform(2 * x, 8000), NO_DITHER).frames
    above = a > math.log(1e-10) + 1.0
    assert above.mean() > 0.9
    np.testing.assert_allclose((b - a)[above], math.log(4), atol=1e-9)


def test_tone_peaks_in_matching_band():
    cfg = NO_DITHER
    feats = log_mel(Waveform(tone(1000, 4000), 8000), cfg).frames
    edges = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(4000), cfg.n_mels + 2)
    expected = int(np.argmin(np.abs(edges[1:-1] - hz_to_mel(1000))))
    assert abs(int(np.argmax(feats.mean(axis=0))) - expected) <= 1


def fm(values, speaker="s1", utt="u"):
    return FeatureMatrix(np.asarray(values, dtype=np.float64), 10.0, utt, speaker)


def test_cmvn_two_values():
    (out,) = cmvn_by_speaker([fm([[1.0], [3.0]])])
    np.testing.assert_allclose(out.frames[:, 0], [-1.0, 1.0])


def test_cmvn_constant_features_become_zero():
    (out,) = cmvn_by_speaker([fm(np.full((5, 3), 7.5))])
    assert np.all(out.frames == 0)


def test_cmvn_pooled_stats_per_speaker():
    rng = np.random.default_rng(3)
    batch = [
        fm(rng.normal(5, 3, (40, 6)), "a", "a1"),
        fm(rng.normal(5, 3, (25, 6)), "a", "a2"),
        fm(rng.normal(-2, 0.5, (30, 6)), "b", "b1"),
    ]
    out = cmvn_by_speaker(batch)
    for spk, members in {"a": [0, 1], "b": [2]}.items():
        pooled = np.concatenate([out[i].frames for i in members])
        assert np.all(np.abs(pooled.mean(axis=0)) <= 1e-6)
        assert np.all(np.abs(pooled.var(axis=0) - 1) <= 1e-4)
        # Independent recomputation from the raw inputs.
        raw = np.concatenate([batch[i].frames for i in members])
        ref = (raw - raw.mean(axis=0)) / raw.std(axis=0)
        np.testing.assert_allclose(pooled, ref, atol=1e-10)


def test_cmvn_idempotent():
    rng = np.random.default_rng(4)
    batch = [fm(rng.normal(1, 2, (20, 4)), s, s + str(i)) for i, s in enumerate("aab")]
    once = cmvn_by_speaker(batch)
    twice = cmvn_by_speaker(once)
    for a, b in zip(once, twice):
        np.testing.assert_allclose(a.frames, b.frames, atol=1e-6)


def test_stack_fixture_10x80():
    frames = np.arange(10)[:, None] * np.ones((1, 80))
    out = stack_downsample(fm(frames), 3, 3)
    assert out.frames.shape == (4, 320)
    assert out.frame_shift_ms == 30.0
    for t, base in enumerate([0, 3, 6, 9]):
        expected = [max(base - k, 0) for k in (3, 2, 1, 0)]
        assert list(out.frames[t, ::80]) == expected


def test_stack_identity_and_single_frame():
    rng = np.random.default_rng(5)
    frames = rng.standard_normal((7, 80))
    np.testing.assert_array_equal(stack_downsample(fm(frames), 0, 1).frames, frames)
    out = stack_downsample(fm(frames[:1]), 3, 3)
    assert out.frames.shape == (1, 320)
    for k in range(4):
        np.testing.assert_array_equal(out.frames[0, 80 * k: 80 * (k + 1)], frames[0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(0, 4), st.integers(1, 4))
def test_stack_shape(t, left, factor):
    out = stack_downsample(fm(np.zeros((t, 2))), left, factor)
    assert out.frames.shape == (math.ceil(t / factor), 2 * (left + 1))


def test_speed_perturb():
    w = Waveform(tone(300, 1000), 8000)
    assert len(speed_perturb(w, 1.1).samples) == 1100
    assert len(speed_perturb(w, 0.9).samples) == 900
    np.testing.assert_array_equal(speed_perturb(w, 1.0).samples, w.samples)
    const = Waveform(np.full(777, 0.25), 8000)
    for factor in (0.9, 1.1, 0.5, 2.3):
        assert np.all(speed_perturb(const, factor).samples == 0.25)
    with pytest.raises(ValueError):
        speed_perturb(w, 0.0)


def test_speed_perturb_interpolates_linearly():
    ramp = Waveform(np.arange(10, dtype=float), 8000)
    out = speed_perturb(ramp, 2.0).samples
    np.testing.assert_allclose(out[:19], np.arange(19) / 2)


def test_featurize_chain_dims():
    cfg = FrontendConfig()
    waves = [Waveform(tone(500 + 100 * i, 3000 + 37 * i), 8000, f"u{i}", "spk") for i in range(3)]
    mats = featurize(waves, cfg, perturb=(0.9, 1.1))
    assert len(mats) == 9
    assert {m.dim for m in mats} == {320}
    assert mats[3].utt_id == "sp0.9-u0"
    assert all(np.isfinite(m.frames).all() for m in mats)


def test_wav_round_trip(tmp_path):
    x = tone(440, 800)
    write_wav(tmp_path / "a.wav", x, 8000)
    y, rate = read_wav(tmp_path / "a.wav")
    assert rate == 8000
    np.testing.assert_allclose(x, y, atol=1 / 32768)


def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    mats = [FeatureMatrix(rng.standard_normal((t, 320)).astype(np.float32), 30.0, f"ütt{t}") for t in (1, 5, 9)]
    path = tmp_path / "feats.ark"
    write_archive(path, mats)
    raw = path.read_bytes()
    assert raw.startswith(b"MLFEAT1\n")
    back = read_archive(path)
    assert list(back) == ["ütt1", "ütt5", "ütt9"]
    for m in mats:
        np.testing.assert_array_equal(back[m.utt_id].frames, m.frames)
        assert back[m.utt_id].frame_shift_ms == 30.0
    path.write_bytes(raw[:-3])
    with pytest.raises(DataError, match="truncated"):
        read_archive(path)
