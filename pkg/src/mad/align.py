"""Alignment losses between the MEG stream and the speech stream.

* :func:`clip_loss` - symmetric contrastive loss over a scaled cosine
  similarity matrix of flattened Mel spectrograms.
* :func:`mmd_loss` - kernel MMD between encoder hidden states, with the
  ``i != j`` estimator used for all three kernel terms.
* :func:`ce_loss` - token cross-entropy with PAD positions excluded.
* :func:`composite_loss` - weighted sum over the active terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensors as tt
from .errors import ContractError, DimensionError, ParameterError
from .tensors import Tensor

__all__ = [
    "LossWeights", "Temperature", "clip_loss", "mmd_loss", "ce_loss", "composite_loss",
    "select_time_indices", "median_bandwidth",
]

NORM_FLOOR = 1e-12
SIGMA_FLOOR = 1e-6
TEMP_MIN, TEMP_MAX = 1.0, 100.0


@dataclass
class LossWeights:
    lambda_m: float = 1.0
    lambda_e: float = 0.01
    lambda_t: float = 1.0

    def __post_init__(self):
        ws = (self.lambda_m, self.lambda_e, self.lambda_t)
        if any(w < 0 for w in ws):
            raise ParameterError(f"loss weights must be nonnegative, got {ws}")
        if not any(w > 0 for w in ws):
            raise ParameterError("at least one loss weight must be positive")


class Temperature:
    """Learnable log-scale ``t``; similarities are multiplied by ``exp(t)``."""

    def __init__(self, scale: float = 1.0 / 0.07):
        self.t = Tensor(math.log(scale), requires_grad=True, name="temperature")

    @property
    def scale(self) -> float:
        return math.exp(self.t.item())

    def clamp_(self) -> None:
        self.t.data[...] = np.clip(self.t.data, math.log(TEMP_MIN), math.log(TEMP_MAX))


def _flatten_rows(x: Tensor) -> Tensor:
    x = tt._as_tensor(x)
    return x if x.ndim == 2 else tt.reshape(x, (x.shape[0], -1))


def _l2_normalize(x: Tensor) -> Tensor:
    norms = tt.sqrt(tt.maximum(tt.sum(tt.square(x), axis=1, keepdims=True), NORM_FLOOR ** 2))
    return tt.div(x, tt.maximum(norms, NORM_FLOOR))


def clip_loss(m1, m2, temp: Temperature | Tensor | float) -> Tensor:
    """Symmetric cross-entropy over ``S = norm(M1) norm(M2)^T * exp(t)``.

    Each sample is flattened to one row before normalization, so ``m1`` and
    ``m2`` may be ``[N, F]`` or ``[N, frames, bins]``.
    """
    m1, m2 = _flatten_rows(m1), _flatten_rows(m2)
    if m1.shape != m2.shape:
        raise DimensionError(f"clip_loss operands differ: {m1.shape} vs {m2.shape}")
    n = m1.shape[0]
    if n < 1:
        raise ContractError("clip_loss needs at least one pair")
    t = temp.t if isinstance(temp, Temperature) else tt._as_tensor(temp)
    sim = tt.matmul(_l2_normalize(m1), tt.transpose(_l2_normalize(m2)))
    logits = tt.mul(sim, tt.exp(t))
    idx = np.arange(n)
    row_ce = tt.sub(tt.logsumexp(logits, axis=1), logits[idx, idx])
    col_ce = tt.sub(tt.logsumexp(logits, axis=0), logits[idx, idx])
    return tt.mul(tt.add(tt.sum(row_ce), tt.sum(col_ce)), 1.0 / (2 * n))


def select_time_indices(t_len: int, tr: int, seed) -> np.ndarray:
    """Sorted random subset of ``tr`` time indices out of ``t_len``."""
    if not (1 <= tr <= t_len):
        raise ParameterError(f"need 1 <= Tr <= T, got Tr={tr}, T={t_len}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.sort(rng.choice(t_len, size=tr, replace=False))


def _pairwise_sq_dists(z: Tensor) -> Tensor:
    # explicit differences keep identical rows bit-identical across blocks
    n, d = z.shape
    diff = tt.sub(tt.reshape(z, (n, 1, d)), tt.reshape(z, (1, n, d)))
    return tt.sum(tt.square(diff), axis=2)


def median_bandwidth(sq_dists: Tensor) -> Tensor:
    """Median of the strictly-upper-triangular pairwise distances, floored."""
    n = sq_dists.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    d = tt.sqrt(tt.maximum(sq_dists[iu, ju], 0.0) + 1e-300)
    order = np.argsort(d.data, kind="stable")
    m = order.size
    if m % 2:
        med = d[order[m // 2]]
    else:
        med = tt.mul(tt.add(d[order[m // 2 - 1]], d[order[m // 2]]), 0.5)
    return tt.maximum(med, SIGMA_FLOOR)


def _rbf_mmd(x: Tensor, y: Tensor) -> Tensor:
    n = x.shape[0]
    z = tt.concat([x, y], axis=0)
    sq = _pairwise_sq_dists(z)
    sigma = median_bandwidth(sq)
    k = tt.exp(tt.div(tt.neg(sq), tt.mul(tt.square(sigma), 2.0)))
    kxx = k[:n, :n]
    kyy = k[n:, n:]
    kxy = k[:n, n:]
    off = ~np.eye(n, dtype=bool)
    terms = tt.add(tt.sub(kxx, tt.mul(kxy, 2.0)), kyy)
    total = tt.sum(tt.masked_fill(terms, ~off, 0.0))
    return tt.mul(total, 1.0 / (n * (n - 1)))


def mmd_loss(e1, e2, tr: int | None = 50, seed=0, kernel: str = "rbf") -> Tensor:
    """Kernel MMD between two batches of hidden-state sequences.

    ``e1``/``e2`` are ``[N, T, D]``. ``tr`` time indices are drawn once
    (seeded, without replacement) and shared by both inputs; each sample is
    then represented by the mean of its selected frames. ``[N, D]`` inputs
    skip the time step. The RBF bandwidth is the median pairwise distance
    over the joint batch.
    """
    e1, e2 = tt._as_tensor(e1), tt._as_tensor(e2)
    if e1.shape != e2.shape:
        raise DimensionError(f"mmd_loss operands differ: {e1.shape} vs {e2.shape}")
    if kernel != "rbf":
        raise ParameterError(f"unknown kernel {kernel!r}")
    n = e1.shape[0]
    if n < 2:
        raise ContractError(f"mmd_loss needs N >= 2, got N={n}")
    if e1.ndim == 3:
        t_len = e1.shape[1]
        idx = select_time_indices(t_len, t_len if tr is None else tr, seed)
        x = tt.mean(e1[:, idx, :], axis=1)
        y = tt.mean(e2[:, idx, :], axis=1)
    elif e1.ndim == 2:
        x, y = e1, e2
    else:
        raise DimensionError(f"mmd_loss expects [N, T, D] or [N, D], got {e1.shape}")
    return _rbf_mmd(x, y)


def ce_loss(logits, targets, pad_id: int = 0) -> Tensor:
    """Mean token cross-entropy over non-PAD target positions.

    ``logits`` is ``[N, J, V]``; ``targets`` is an ``[N, J]`` integer array.
    """
    logits = tt._as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 3 or targets.shape != logits.shape[:2]:
        raise DimensionError(f"ce_loss shapes: logits {logits.shape}, targets {targets.shape}")
    v = logits.shape[2]
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise ContractError(f"target ids must lie in [0, {v})")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ContractError("ce_loss: every target position is PAD")
    logp = tt.log_softmax(logits, axis=-1)
    ni, ji = np.nonzero(keep)
    picked = logp[ni, ji, targets[ni, ji]]
    return tt.mul(tt.sum(picked), -1.0 / count)


def composite_loss(lm, le, lt, w, mask=(True, True, True)) -> Tensor:
    """``lambda_m*lm + lambda_e*le + lambda_t*lt`` over the active terms.

    ``w`` is a :class:`LossWeights` or a plain ``(m, e, t)`` triple. Inactive
    terms may be passed as ``None``; they are never touched.
    """
    weights = (w.lambda_m, w.lambda_e, w.lambda_t) if isinstance(w, LossWeights) else tuple(w)
    total = None
    for value, weight, active in zip((lm, le, lt), weights, mask):
        if not active:
            continue
        if value is None:
            raise ContractError("an active loss term was not computed")
        term = tt.mul(value, weight)
        total = term if total is None else tt.add(total, term)
    if total is None:
        raise ContractError("composite_loss needs at least one active term")
    return total
