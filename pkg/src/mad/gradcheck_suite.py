"""Finite-difference checks for every differentiable op, the losses and the
small-scale model forwards.

Each case builds a scalar from random inputs (usually ``sum(op(x) * w)`` with
a random weight ``w``, so every output element contributes a distinct
gradient) and compares the tape gradient with central differences.
"""
from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import tensors as tt
from .align import Temperature, ce_loss, clip_loss, composite_loss, mmd_loss
from .brain import (brain_forward, init_brain, residual_block, spatial_attention,
                    subject_layer)
from .seq2seq import (BOS, Seq2SeqConfig, decode_teacher_forced, encode, init_adapters,
                      init_seq2seq)
from .tensors import Tensor

__all__ = ["CASES", "run_suite", "TOLERANCE"]

TOLERANCE = 1e-4

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _p(rng, *shape, scale=1.0, shift=0.0) -> Tensor:
    return Tensor(shift + scale * rng.normal(size=shape), requires_grad=True)


def _weighted(out_fn, shape_rng):
    """Wrap an op so the scalar is ``sum(op(...) * w)`` with a fixed random ``w``."""
    cache = {}

    def f():
        out = out_fn()
        if "w" not in cache:
            cache["w"] = shape_rng.normal(size=out.shape)
        return tt.sum(tt.mul(out, cache["w"]))
    return f


def _unary(op, scale=1.0, shift=0.0, shape=(3, 4)):
    def case(rng):
        x = _p(rng, *shape, scale=scale, shift=shift)
        return _weighted(lambda: op(x), rng), [x]
    return case


def _binary(op, b_shape=(3, 4), b_shift=0.0):
    def case(rng):
        a = _p(rng, 3, 4)
        b = _p(rng, *b_shape, shift=b_shift)
        return _weighted(lambda: op(a, b), rng), [a, b]
    return case


def _positive_div(a, b):
    return tt.div(a, b)


def _case_matmul_batched(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 2, 4, 5)
    return _weighted(lambda: tt.matmul(a, b), rng), [a, b]


def _case_matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return _weighted(lambda: tt.matmul(a, b), rng), [a, b]


def _case_linear(rng):
    x, w, b = _p(rng, 2, 3, 5), _p(rng, 4, 5), _p(rng, 4)
    return _weighted(lambda: tt.linear(x, w, b), rng), [x, w, b]


def _case_conv(dilation, padding, stride, batched):
    def case(rng):
        shape = (2, 3, 11) if batched else (3, 11)
        x, w, b = _p(rng, *shape), _p(rng, 4, 3, 3), _p(rng, 4)
        return (_weighted(lambda: tt.conv1d(x, w, b, dilation=dilation, padding=padding,
                                            stride=stride), rng), [x, w, b])
    return case


def _case_layer_norm(rng):
    x, g, b = _p(rng, 2, 3, 6), _p(rng, 6, shift=1.0), _p(rng, 6)
    return _weighted(lambda: tt.layer_norm(x, g, b), rng), [x, g, b]


def _case_getitem(rng):
    x = _p(rng, 4, 5)
    rows = np.array([0, 2, 2, 3])
    return _weighted(lambda: x[rows, 1:4], rng), [x]


def _case_concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 4, 3)
    return _weighted(lambda: tt.concat([a, b], axis=0), rng), [a, b]


def _case_masked_fill(rng):
    x = _p(rng, 3, 4)
    mask = rng.random((3, 4)) < 0.4
    return _weighted(lambda: tt.masked_fill(x, mask, -2.0), rng), [x]


def _case_maximum(rng):
    # keep every entry well away from the kink
    data = rng.normal(size=(3, 4))
    data = np.where(np.abs(data) < 0.1, data + 0.3, data)
    x = Tensor(data, requires_grad=True)
    return _weighted(lambda: tt.maximum(x, 0.0), rng), [x]


def _case_clip(rng):
    m1, m2 = _p(rng, 4, 3, 5), _p(rng, 4, 3, 5)
    temp = Temperature(scale=float(rng.uniform(1.5, 5.0)))
    return (lambda: clip_loss(m1, m2, temp)), [m1, m2, temp.t]


def _case_mmd(rng):
    seed = int(rng.integers(1 << 31))
    e1, e2 = _p(rng, 5, 8, 3), _p(rng, 5, 8, 3, shift=0.5)
    return (lambda: mmd_loss(e1, e2, tr=4, seed=seed)), [e1, e2]


def _case_ce(rng):
    logits = _p(rng, 2, 4, 6)
    targets = rng.integers(1, 6, size=(2, 4))
    targets[0, -1] = 0
    return (lambda: ce_loss(logits, targets)), [logits]


def _case_composite(rng):
    m1, m2 = _p(rng, 4, 6, 3), _p(rng, 4, 6, 3)
    e1, e2 = _p(rng, 4, 6, 2), _p(rng, 4, 6, 2, shift=0.3)
    logits = _p(rng, 4, 3, 5)
    targets = rng.integers(1, 5, size=(4, 3))
    temp = Temperature(scale=2.0)
    seed = int(rng.integers(1 << 31))

    def f():
        return composite_loss(clip_loss(m1, m2, temp), mmd_loss(e1, e2, tr=3, seed=seed),
                              ce_loss(logits, targets), (1.0, 0.01, 1.0))
    return f, [m1, e1, logits, temp.t]


def _small_brain(rng, subjects=(3, 7)):
    return init_brain(list(subjects), n_channels=5, hidden=4, n_mels=3,
                      seed=int(rng.integers(1 << 31)))


def _case_spatial_attention(rng):
    x, logits = _p(rng, 2, 5, 7), _p(rng, 4, 5)
    return _weighted(lambda: spatial_attention(x, logits), rng), [x, logits]


def _case_subject_layer(rng):
    params = _small_brain(rng)
    x = _p(rng, 2, 4, 6)
    subj = [7, 3]
    return (_weighted(lambda: subject_layer(x, subj, params), rng),
            [x, params["subject_layers"]])


def _case_residual_block(rng):
    params = _small_brain(rng)
    x = _p(rng, 2, 4, 9)
    k = int(rng.integers(0, 3))
    names = [f"block{k}.conv{i}.{t}" for i in (1, 2, 3) for t in ("w", "b")]
    return (_weighted(lambda: residual_block(x, k, params), rng),
            [x] + [params[n] for n in names])


def _case_brain(rng):
    params = _small_brain(rng)
    meg = _p(rng, 2, 5, 12)
    subj = [3, 7]
    probe = [meg, params["spatial_attention"], params["subject_layers"], params["in_proj.w"],
             params["block4.conv1.w"], params["head2.w"], params["head2.b"]]
    return _weighted(lambda: brain_forward(meg, subj, params), rng), probe


def _tiny_seq2seq(rng):
    cfg = Seq2SeqConfig(vocab_size=7, n_mels=3, d_model=4, n_heads=2, ffn_mult=2,
                        enc_layers=1, dec_layers=1, max_len=4)
    return init_seq2seq(cfg, seed=int(rng.integers(1 << 31)))


def _case_encode_lora(rng):
    params = _tiny_seq2seq(rng)
    adapters = init_adapters(params, rank=2, alpha=4.0, seed=int(rng.integers(1 << 31)))
    for a in adapters.values():
        a.B.data[...] = rng.normal(scale=0.3, size=a.B.shape)
    mel = _p(rng, 2, 6, 3)
    probe = [mel, params["conv1.w"], params["enc0.attn.q.w"], params["enc0.fc1.w"]]
    for a in adapters.values():
        probe += [a.A, a.B]
    return _weighted(lambda: encode(mel, params, adapters), rng), probe


def _case_decoder(rng):
    params = _tiny_seq2seq(rng)
    e = _p(rng, 2, 3, 4)
    tokens = np.array([[BOS, 3, 4, 2], [BOS, 5, 2, 0]])
    probe = [e, params["embed"], params["dec0.self.q.w"], params["dec0.cross.k.w"],
             params["dec.ln.g"]]
    return (lambda: ce_loss(decode_teacher_forced(e, tokens[:, :-1], params), tokens[:, 1:])), probe


CASES: dict[str, dict[str, Case]] = {
    "tensors": {
        "add": _binary(tt.add, b_shape=(4,)),
        "sub": _binary(tt.sub, b_shape=(3, 1)),
        "mul": _binary(tt.mul),
        "div": _binary(_positive_div, b_shift=3.0),
        "neg": _unary(tt.neg),
        "exp": _unary(tt.exp, scale=0.5),
        "log": _unary(tt.log, scale=0.3, shift=2.0),
        "sqrt": _unary(tt.sqrt, scale=0.3, shift=2.0),
        "square": _unary(tt.square),
        "pow_half": _unary(lambda x: x ** 0.5, scale=0.3, shift=2.0),
        "sigmoid": _unary(tt.sigmoid),
        "tanh": _unary(tt.tanh),
        "gelu": _unary(tt.gelu),
        "glu": _unary(lambda x: tt.glu(x, axis=-2), shape=(2, 4, 3)),
        "maximum": _case_maximum,
        "masked_fill": _case_masked_fill,
        "sum": _unary(lambda x: tt.sum(x, axis=1, keepdims=True)),
        "mean": _unary(lambda x: tt.mean(x, axis=(0, 2)), shape=(2, 3, 4)),
        "logsumexp": _unary(lambda x: tt.logsumexp(x, axis=1)),
        "softmax": _unary(lambda x: tt.softmax(x, axis=-1)),
        "log_softmax": _unary(lambda x: tt.log_softmax(x, axis=0)),
        "reshape": _unary(lambda x: tt.reshape(x, (2, 6))),
        "transpose": _unary(lambda x: tt.transpose(x, (2, 0, 1)), shape=(2, 3, 4)),
        "swapaxes": _unary(lambda x: tt.swapaxes(x, 0, 2), shape=(2, 3, 4)),
        "getitem": _case_getitem,
        "concat": _case_concat,
        "matmul": _case_matmul,
        "matmul_batched": _case_matmul_batched,
        "linear": _case_linear,
        "conv1d": _case_conv(1, "same", 1, False),
        "conv1d_dilated": _case_conv(4, "same", 1, True),
        "conv1d_strided": _case_conv(1, 1, 2, True),
        "conv1d_valid": _case_conv(2, "none", 1, False),
        "layer_norm": _case_layer_norm,
    },
    "align": {
        "clip_loss": _case_clip,
        "mmd_loss": _case_mmd,
        "ce_loss": _case_ce,
        "composite_loss": _case_composite,
    },
    "brain": {
        "spatial_attention": _case_spatial_attention,
        "subject_layer": _case_subject_layer,
        "residual_block": _case_residual_block,
        "brain_forward": _case_brain,
    },
    "seq2seq": {
        "encode_lora": _case_encode_lora,
        "decoder_ce": _case_decoder,
    },
}


def run_suite(module: str = "all", seeds: int = 20, max_coords: int = 24,
              tol: float = TOLERANCE) -> list[dict]:
    """Run every case of ``module`` (or all) over ``seeds`` seeds."""
    groups = CASES if module == "all" else {module: CASES[module]}
    results = []
    for group, cases in groups.items():
        for name, case in cases.items():
            worst = 0.0
            t0 = time.perf_counter()
            for seed in range(seeds):
                rng = np.random.default_rng([seed, sum(map(ord, name))])
                f, params = case(rng)
                err = tt.grad_check(f, params, eps=1e-5, max_coords=max_coords, seed=seed)
                worst = max(worst, err)
            results.append({"module": group, "case": name, "rel_err": worst,
                            "passed": bool(worst < tol and math.isfinite(worst)),
                            "seconds": time.perf_counter() - t0})
    return results
