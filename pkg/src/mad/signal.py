"""MEG and audio preprocessing.

Band-pass and decimate the MEG, cut 4 s windows on a jittered 1 s grid, and
turn the matching audio into a log-Mel spectrogram using the window, hop and
normalization of the reference speech model's front end.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import ContractError, DimensionError, ParameterError
from .io import load_array, save_array

__all__ = [
    "Recording", "MegSegment", "bandpass", "resample", "window_segments", "mel_spectrogram",
    "mel_filterbank", "hz_to_mel", "mel_to_hz", "load_recording", "save_recording",
    "synth_recording", "MEG_RATE", "AUDIO_RATE", "SEGMENT_RATE",
]

MEG_RATE = 1000.0
AUDIO_RATE = 16000
SEGMENT_RATE = 100.0
N_FFT = 400
HOP = 160
N_MELS = 80
LOG_FLOOR = 1e-10
DYNAMIC_RANGE = 8.0


@dataclass
class Recording:
    meg: np.ndarray
    audio: np.ndarray
    transcript_words: list[tuple[str, float, float]]
    subject_id: int
    story_id: str
    meg_rate: float = MEG_RATE
    audio_rate: int = AUDIO_RATE

    def __post_init__(self):
        self.meg = np.asarray(self.meg, dtype=np.float64)
        self.audio = np.asarray(self.audio, dtype=np.float64)
        if self.meg.ndim != 2:
            raise DimensionError(f"MEG must be [channels, samples], got {self.meg.shape}")
        meg_s = self.meg.shape[1] / self.meg_rate
        audio_s = self.audio.size / self.audio_rate
        if abs(meg_s - audio_s) > max(1.0 / self.meg_rate, 1.0 / self.audio_rate) + 1e-12:
            raise ContractError(f"MEG lasts {meg_s:.4f} s but audio lasts {audio_s:.4f} s")
        prev = -math.inf
        for word, on, off in self.transcript_words:
            if on < prev or off < on or on < 0 or off > self.duration + 1e-9:
                raise ContractError(f"bad word timing for {word!r}: ({on}, {off})")
            prev = on

    @property
    def duration(self) -> float:
        return self.meg.shape[1] / self.meg_rate


@dataclass
class MegSegment:
    meg: np.ndarray
    mel: np.ndarray
    tokens: list
    subject_id: int
    story_id: str
    window_start: float
    words: list[str] = field(default_factory=list)


def bandpass(x, lo_hz: float = 1.0, hi_hz: float = 40.0, fs_hz: float = MEG_RATE,
             order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis."""
    if not (0 < lo_hz < hi_hz < fs_hz / 2):
        raise ParameterError(f"need 0 < lo < hi < fs/2, got lo={lo_hz}, hi={hi_hz}, fs={fs_hz}")
    sos = sps.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=fs_hz, output="sos")
    return sps.sosfiltfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


@lru_cache(maxsize=8)
def _decimation_filter(factor: int, taps_per_phase: int, beta: float) -> np.ndarray:
    n = taps_per_phase * factor + 1
    h = sps.firwin(n, 1.0 / factor, window=("kaiser", beta))
    h.flags.writeable = False
    return h


def resample(x, fs_in: float = MEG_RATE, fs_out: float = SEGMENT_RATE) -> np.ndarray:
    """Kaiser-windowed sinc decimation by an integer factor along the last axis.

    Output length is ``floor(S * fs_out / fs_in)``.
    """
    ratio = fs_in / fs_out
    factor = int(round(ratio))
    if fs_out <= 0 or factor < 1 or abs(ratio - factor) > 1e-9:
        raise ParameterError(f"fs_in/fs_out must be a positive integer, got {fs_in}/{fs_out}")
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x.copy()
    h = _decimation_filter(factor, 64, 8.0)
    y = sps.resample_poly(x, 1, factor, axis=-1, window=h)
    return y[..., : x.shape[-1] // factor]


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep,
                    f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=4)
def mel_filterbank(sr: int = AUDIO_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft//2 + 1]`` with Slaney area normalization."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    fb.flags.writeable = False
    return fb


def mel_spectrogram(audio, sr: int = AUDIO_RATE, frames: int = 400) -> np.ndarray:
    """Log-Mel spectrogram ``[frames, 80]`` of exactly ``frames * hop`` samples."""
    audio = np.asarray(audio, dtype=np.float64)
    n = frames * HOP
    if audio.ndim != 1 or audio.size != n:
        raise ContractError(f"expected {n} mono samples, got shape {audio.shape}")
    padded = np.pad(audio, N_FFT // 2, mode="reflect")
    window = sps.get_window("hann", N_FFT, fftbins=True)
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(frames + 1)[:, None]
    spec = np.fft.rfft(padded[idx] * window, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power[:-1] @ mel_filterbank(sr).T
    log_spec = np.log10(np.maximum(mel, LOG_FLOOR))
    log_spec = np.maximum(log_spec, log_spec.max() - DYNAMIC_RANGE)
    return (log_spec + 4.0) / 4.0


def window_segments(rec: Recording, win_s: float = 4.0, stride_s: float = 1.0,
                    jitter_s: float = 0.5, seed=0, vocab=None) -> list[MegSegment]:
    """Cut a recording into jittered windows.

    MEG is band-passed at the source rate, decimated to 100 Hz, then sliced.
    A window's transcript is every word whose onset lies inside it; windows
    with no words are dropped. With ``vocab`` the tokens are ids framed by
    BOS/EOS, otherwise the raw words.
    """
    dur = rec.duration
    if dur < win_s:
        return []
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_win = int(math.floor((dur - win_s) / stride_s + 1e-9)) + 1
    offsets = rng.uniform(-jitter_s, jitter_s, size=n_win) if jitter_s > 0 else np.zeros(n_win)
    starts = np.clip(np.arange(n_win) * stride_s + offsets, 0.0, dur - win_s)

    meg = resample(bandpass(rec.meg, fs_hz=rec.meg_rate), rec.meg_rate, SEGMENT_RATE)
    meg_len = int(round(win_s * SEGMENT_RATE))
    audio_len = int(round(win_s * rec.audio_rate))
    frames = int(round(audio_len / HOP))
    out = []
    for start in starts:
        words = [w for w, on, _ in rec.transcript_words if start <= on < start + win_s]
        if not words:
            continue
        i0 = int(round(start * SEGMENT_RATE))
        seg = np.zeros((meg.shape[0], meg_len))
        chunk = meg[:, i0:i0 + meg_len]
        seg[:, :chunk.shape[1]] = chunk
        a0 = int(round(start * rec.audio_rate))
        audio = np.zeros(audio_len)
        piece = rec.audio[a0:a0 + audio_len]
        audio[:piece.size] = piece
        tokens = vocab.encode(" ".join(words)) if vocab is not None else list(words)
        out.append(MegSegment(seg, mel_spectrogram(audio, rec.audio_rate, frames), tokens,
                              rec.subject_id, rec.story_id, float(start), words))
    return out


def load_recording(directory) -> Recording:
    """Read ``meg.madt``, ``audio.madt`` and ``meta.json`` from one directory."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    words = [(w["w"], float(w["on"]), float(w["off"])) for w in meta.get("words", [])]
    return Recording(load_array(d / "meg.madt"), load_array(d / "audio.madt"), words,
                     int(meta["subject_id"]), str(meta["story_id"]),
                     float(meta.get("sample_rate_meg", MEG_RATE)),
                     int(meta.get("sample_rate_audio", AUDIO_RATE)))


def save_recording(rec: Recording, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_array(d / "meg.madt", rec.meg)
    save_array(d / "audio.madt", rec.audio)
    meta = {"subject_id": rec.subject_id, "story_id": rec.story_id,
            "sample_rate_meg": rec.meg_rate, "sample_rate_audio": rec.audio_rate,
            "words": [{"w": w, "on": on, "off": off} for w, on, off in rec.transcript_words]}
    (d / "meta.json").write_text(json.dumps(meta, indent=2))


def synth_recording(words, duration_s: float = 12.0, n_channels: int = 208, subject_id: int = 0,
                    story_id: str = "story0", seed=0, word_s: float = 0.4, gap_s: float = 0.2,
                    noise: float = 0.5) -> Recording:
    """Toy raw recording: each word is a tone chord, and MEG channels carry a
    random mix of the audio envelope (band-limited to the MEG band) plus
    noise. Only meant to exercise the preprocessing path end to end.
    """
    rng = np.random.default_rng(seed)
    n_audio = int(round(duration_s * AUDIO_RATE))
    n_meg = int(round(duration_s * MEG_RATE))
    audio = np.zeros(n_audio)
    drive = np.zeros((4, n_meg))
    timeline = []
    t = 0.25
    for w in words:
        if t + word_s > duration_s:
            break
        h = abs(hash(w)) % 997
        tones = 300.0 + 150.0 * np.array([h % 7, (h // 7) % 11, (h // 77) % 13])
        a0, a1 = int(t * AUDIO_RATE), int((t + word_s) * AUDIO_RATE)
        tt = np.arange(a1 - a0) / AUDIO_RATE
        env = np.sin(np.pi * tt / word_s) ** 2
        audio[a0:a1] += 0.3 * env * np.sin(2 * np.pi * tones[:, None] * tt).sum(axis=0) / 3
        m0, m1 = int(t * MEG_RATE), int((t + word_s) * MEG_RATE)
        menv = np.sin(np.pi * np.arange(m1 - m0) / (m1 - m0)) ** 2
        drive[h % 4, m0:m1] += menv
        timeline.append((w, round(t, 6), round(t + word_s, 6)))
        t += word_s + gap_s
    gains = rng.normal(size=(n_channels, 4))
    meg = gains @ drive + noise * rng.normal(size=(n_channels, n_meg))
    return Recording(meg, audio, timeline, subject_id, story_id)
