import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mad import signal as sig
from mad.errors import ContractError, ParameterError


def amplitude(x, fs, freq):
    """Sine amplitude at ``freq`` from a Hann-windowed FFT (scalloping-free on bin)."""
    spec = np.fft.rfft(x * np.hanning(x.size))
    k = int(round(freq * x.size / fs))
    return 2 * np.abs(spec[k]) / np.hanning(x.size).sum()


class TestBandpass:
    def test_passband(self):
        t = np.arange(20000) / 1000.0
        x = np.sin(2 * np.pi * 10 * t)
        y = sig.bandpass(x[None], 1.0, 40.0, 1000.0)[0]
        assert abs(amplitude(y, 1000, 10) / amplitude(x, 1000, 10) - 1) < 0.05

    def test_stopband(self):
        t = np.arange(200000) / 1000.0
        x = np.sin(2 * np.pi * 0.1 * t)
        y = sig.bandpass(x[None], 1.0, 40.0, 1000.0)[0]
        assert amplitude(y, 1000, 0.1) < 0.1 * amplitude(x, 1000, 0.1)

    def test_zero_in_zero_out(self):
        assert np.array_equal(sig.bandpass(np.zeros((3, 500))), np.zeros((3, 500)))

    def test_length_preserved(self):
        assert sig.bandpass(np.ones((2, 1234))).shape == (2, 1234)

    @pytest.mark.parametrize("lo,hi", [(0.0, 40.0), (40.0, 1.0), (1.0, 500.0), (1.0, 600.0)])
    def test_bad_cutoffs(self, lo, hi):
        with pytest.raises(ParameterError):
            sig.bandpass(np.ones((1, 100)), lo, hi, 1000.0)


class TestResample:
    def test_length(self):
        assert sig.resample(np.zeros((208, 4000))).shape == (208, 400)
        assert sig.resample(np.zeros(4009)).shape == (400,)

    def test_dc(self):
        y = sig.resample(np.full(4000, 2.5))
        assert np.max(np.abs(y[40:-40] - 2.5)) < 1e-6

    def test_low_sine_survives_high_sine_rejected(self):
        t = np.arange(10000) / 1000.0
        lo = sig.resample(np.sin(2 * np.pi * 5 * t))[100:900]
        hi = sig.resample(np.sin(2 * np.pi * 80 * t))[100:900]
        ref = amplitude(np.sin(2 * np.pi * 5 * np.arange(800) / 100.0), 100, 5)
        assert abs(amplitude(lo, 100, 5) / ref - 1) < 0.02
        # 80 Hz folds to 20 Hz after decimation; 40 dB is a factor of 100
        assert np.max(np.abs(np.fft.rfft(hi * np.hanning(hi.size)))) * 2 / np.hanning(hi.size).sum() < 0.01

    def test_non_integer_ratio(self):
        with pytest.raises(ParameterError):
            sig.resample(np.ones(100), 1000, 300)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2000)), rng.normal(size=(2, 2000))
    for f in (sig.bandpass, sig.resample):
        lhs = f(a * x + b * y)
        rhs = a * f(x) + b * f(y)
        assert np.max(np.abs(lhs - rhs)) < 1e-9


def _recording(seconds=10.0, words=None):
    n_meg = int(seconds * 1000)
    words = words if words is not None else [(f"w{i}", i + 0.5, i + 0.9) for i in range(int(seconds))]
    return sig.Recording(np.zeros((4, n_meg)), np.zeros(int(seconds * 16000)), words, 1, "s0")


class TestWindows:
    def test_grid_without_jitter(self):
        segs = sig.window_segments(_recording(), jitter_s=0.0)
        assert [s.window_start for s in segs] == [0, 1, 2, 3, 4, 5, 6]
        assert all(s.meg.shape == (4, 400) and s.mel.shape == (400, 80) for s in segs)

    def test_same_seed_same_starts(self):
        a = [s.window_start for s in sig.window_segments(_recording(), seed=3)]
        b = [s.window_start for s in sig.window_segments(_recording(), seed=3)]
        assert a == b

    def test_jitter_bounds(self):
        rec = _recording(seconds=40.0)
        starts = []
        for seed in range(30):
            starts += [(s.window_start, i) for i, s in enumerate(sig.window_segments(rec, seed=seed))]
        assert len(starts) >= 1000
        for start, k in starts:
            assert abs(start - k) <= 0.5 + 1e-12 or start in (0.0, 36.0)

    def test_onset_rule_and_empty_windows_dropped(self):
        rec = _recording(words=[("a", 0.5, 0.8), ("b", 3.9, 4.2)])
        segs = sig.window_segments(rec, jitter_s=0.0)
        assert [s.words for s in segs] == [["a", "b"], ["b"], ["b"], ["b"]]

    def test_short_recording(self):
        assert sig.window_segments(_recording(seconds=3.0, words=[])) == []

    def test_io_round_trip(self, tmp_path):
        rec = sig.synth_recording(["one", "two", "three"], duration_s=5.0, seed=1)
        sig.save_recording(rec, tmp_path)
        back = sig.load_recording(tmp_path)
        assert np.array_equal(back.meg, rec.meg)
        assert back.transcript_words == rec.transcript_words
        assert json.loads((tmp_path / "meta.json").read_text())["subject_id"] == 0

    def test_duration_mismatch(self):
        with pytest.raises(ContractError):
            sig.Recording(np.zeros((2, 1000)), np.zeros(32000), [], 0, "s")


class TestMel:
    def test_silence_constant(self):
        m = sig.mel_spectrogram(np.zeros(64000))
        assert m.shape == (400, 80)
        assert np.all(m == -1.5)

    def test_tone_peaks_at_covering_filter(self):
        audio = np.sin(2 * np.pi * 1000 * np.arange(64000) / 16000)
        m = sig.mel_spectrogram(audio)
        fb = sig.mel_filterbank()
        expected = int(np.argmax(fb[:, int(round(1000 * 400 / 16000))]))
        # the first frame sees the reflected edge; interior frames are clean
        assert set(np.argmax(m[1:], axis=1)) == {expected}

    def test_shape_and_bounds(self):
        audio = np.random.default_rng(0).uniform(-1, 1, 64000)
        m = sig.mel_spectrogram(audio)
        assert m.shape == (400, 80)
        assert np.all(np.isfinite(m))
        assert m.max() - m.min() <= 2.0 + 1e-12

    def test_wrong_length(self):
        with pytest.raises(ContractError):
            sig.mel_spectrogram(np.zeros(64001))

    def test_filterbank_slaney_area(self):
        fb = sig.mel_filterbank()
        assert fb.shape == (80, 201)
        assert np.all(fb >= 0)
        assert np.allclose(sig.mel_to_hz(sig.hz_to_mel([0.0, 500.0, 1000.0, 4000.0])),
                           [0, 500, 1000, 4000])
