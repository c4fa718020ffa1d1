"""From a raw recording to aligned (MEG, Mel, tokens) windows.

The recording is synthetic: a tone chord per word on the audio side and a
noisy mixture of word envelopes on 208 MEG channels. The pipeline is the real
one: band-pass 1-40 Hz, decimate 1000 -> 100 Hz, slice 4 s windows with a
1 s stride and +-0.5 s jitter, and compute an 80-bin log-Mel per window.
"""
import numpy as np

from mad import signal as sig

rec = sig.synth_recording(["brains", "speak", "in", "waves", "of", "noise"], duration_s=12.0, seed=0)
print(f"recording: MEG {rec.meg.shape} at {rec.meg_rate} Hz, audio {rec.audio.shape} at {rec.audio_rate} Hz")
print("words with (start, end) seconds:", rec.transcript_words)

segments = sig.window_segments(rec, seed=0)
print(f"\n{len(segments)} windows")
for s in segments:
    print(f"  start {s.window_start:5.2f}s  MEG {s.meg.shape}  Mel {s.mel.shape}  words {s.words}")

# %% The filter keeps 10 Hz and removes slow drift.
t = np.arange(20000) / 1000.0
drift = np.sin(2 * np.pi * 0.1 * t)
alpha = np.sin(2 * np.pi * 10 * t)
out = sig.bandpass(np.stack([drift, alpha]))
print("\nstd after band-pass: 0.1 Hz drift %.3f, 10 Hz rhythm %.3f (input std %.3f)"
      % (out[0, 5000:-5000].std(), out[1, 5000:-5000].std(), alpha.std()))

# %% Silence gives a constant spectrogram; a 1 kHz tone lights up one filter.
tone = sig.mel_spectrogram(np.sin(2 * np.pi * 1000 * np.arange(64000) / 16000))
print("silence Mel value:", np.unique(sig.mel_spectrogram(np.zeros(64000))))
print("1 kHz tone peaks at Mel bin", np.bincount(tone[1:].argmax(axis=1)).argmax())
