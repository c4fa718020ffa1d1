"""Tape autodiff, the three alignment losses and the text metrics, in a few seconds.

Run with ``python demos/01_autodiff_and_losses.py``.
"""
import math

import numpy as np

from mad import tensors as tt
from mad.align import LossWeights, Temperature, ce_loss, clip_loss, composite_loss, mmd_loss
from mad.metrics import metric_report
from mad.tensors import Tensor

rng = np.random.default_rng(0)

# %% Gradients come from a tape; grad_check compares them with central differences.
x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
loss = tt.sum(tt.gelu(tt.conv1d(x, w, dilation=2)))
tt.backward(loss)
print("d loss / d w has shape", w.grad.shape)
print("relative error vs finite differences:",
      tt.grad_check(lambda: tt.sum(tt.gelu(tt.conv1d(x, w, dilation=2))), [x, w]))

# %% CLIP aligns whole spectrograms in a batch by cosine similarity.
mel = rng.normal(size=(6, 40, 10))
print("\nCLIP, perfectly matched pairs:", round(clip_loss(mel, mel, Temperature()).item(), 4))
print("CLIP, shuffled pairs:        ", round(clip_loss(mel, mel[::-1], Temperature()).item(), 4))
print("CLIP of the 2x2 identity at scale 1 equals ln(1 + 1/e):",
      math.isclose(clip_loss(np.eye(2), np.eye(2), Temperature(1.0)).item(), math.log(1 + math.exp(-1))))

# %% MMD compares the distribution of time-averaged encoder states.
e = rng.normal(size=(8, 60, 4))
print("\nMMD(X, X) =", mmd_loss(e, e, tr=50, seed=1).item())
print("MMD(X, X + 1) =", round(mmd_loss(e, e + 1.0, tr=50, seed=1).item(), 4))

# %% Cross-entropy skips PAD (id 0); uniform logits give ln V.
print("\nCE on uniform logits over 50 tokens:", round(ce_loss(np.zeros((2, 4, 50)), rng.integers(1, 50, (2, 4))).item(), 6),
      "vs ln 50 =", round(math.log(50), 6))

# %% The composite weights default to 1, 0.01 and 1.
print("composite of (2, 3, 4):", composite_loss(Tensor(2.0), Tensor(3.0), Tensor(4.0), LossWeights()).item())

# %% Corpus metrics.
report = metric_report(["the cat sat on the mat", "a dog ran"], ["the cat sat on a mat", "the dog ran far"])
print("\n", report)
