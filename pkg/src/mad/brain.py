"""Brain Module: MEG channels x time -> predicted Mel spectrogram.

Pipeline: spatial attention (softmax-weighted channel mixing) -> 1x1 conv ->
per-subject 1x1 conv -> five residual dilated blocks -> two 1x1 convs with a
GELU between them -> transpose to ``[frames, bins]``.

Every function takes either one sample (``[C, T]``) or a batch
(``[B, C, T]``, with one subject id per sample).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensors as tt
from .errors import ContractError, DimensionError, UnknownKeyError
from .io import load_array, save_array
from .tensors import Tensor

__all__ = [
    "BrainParams", "init_brain", "spatial_attention", "subject_layer", "residual_block",
    "brain_forward", "N_BLOCKS",
]

N_BLOCKS = 5


class BrainParams:
    """Named parameter tensors plus the subject-id -> row table.

    Subject layers are stored stacked as ``subject_layers[S, D, D]``; row
    ``subject_index[s]`` belongs to subject id ``s``.
    """

    def __init__(self, tensors: dict[str, Tensor], subject_ids, n_channels: int, hidden: int,
                 n_mels: int = 80):
        self.tensors = dict(tensors)
        self.subject_ids = [int(s) for s in subject_ids]
        self.subject_index = {s: i for i, s in enumerate(self.subject_ids)}
        self.n_channels = n_channels
        self.hidden = hidden
        self.n_mels = n_mels

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> dict[str, Tensor]:
        return self.tensors

    def rows_for(self, subjects) -> np.ndarray:
        try:
            return np.array([self.subject_index[int(s)] for s in np.atleast_1d(subjects)])
        except KeyError as exc:
            raise UnknownKeyError(f"unknown subject id {exc.args[0]}") from None

    def copy(self) -> "BrainParams":
        return BrainParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                            for k, v in self.tensors.items()},
                           self.subject_ids, self.n_channels, self.hidden, self.n_mels)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"names": [], "shapes": [], "subject_ids": self.subject_ids,
                "n_channels": self.n_channels, "hidden": self.hidden, "n_mels": self.n_mels}
        for name, t in self.tensors.items():
            save_array(d / f"{name}.madt", t.data)
            meta["names"].append(name)
            meta["shapes"].append(list(t.shape))
        (d / "params.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "BrainParams":
        d = Path(directory)
        meta = json.loads((d / "params.json").read_text())
        tensors = {}
        for name, shape in zip(meta["names"], meta["shapes"]):
            arr = load_array(d / f"{name}.madt")
            if list(arr.shape) != shape:
                raise ContractError(f"{name}: stored shape {arr.shape} != manifest {shape}")
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(tensors, meta["subject_ids"], meta["n_channels"], meta["hidden"], meta["n_mels"])


def init_brain(subject_ids, n_channels: int = 208, hidden: int = 64, n_mels: int = 80,
               seed=0) -> BrainParams:
    """Random initialization.

    Attention logits ~ N(0, 1); conv weights ~ N(0, 1/fan_in); biases zero;
    subject layers identity plus N(0, 0.01^2).
    """
    if hidden % 2:
        raise DimensionError(f"hidden width must be even, got {hidden}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = hidden

    def conv_w(cout, cin, k):
        return rng.normal(0.0, np.sqrt(1.0 / (cin * k)), size=(cout, cin, k))

    p: dict[str, np.ndarray] = {
        "spatial_attention": rng.normal(0.0, 1.0, size=(d, n_channels)),
        "in_proj.w": conv_w(d, d, 1),
        "in_proj.b": np.zeros(d),
        "subject_layers": np.stack([np.eye(d) + rng.normal(0.0, 0.01, size=(d, d))
                                    for _ in subject_ids]),
    }
    for k in range(N_BLOCKS):
        p[f"block{k}.conv1.w"] = conv_w(d, d, 3)
        p[f"block{k}.conv1.b"] = np.zeros(d)
        p[f"block{k}.conv2.w"] = conv_w(d, d, 3)
        p[f"block{k}.conv2.b"] = np.zeros(d)
        p[f"block{k}.conv3.w"] = conv_w(2 * d, d, 1)
        p[f"block{k}.conv3.b"] = np.zeros(2 * d)
    p["head1.w"] = conv_w(d, d, 1)
    p["head1.b"] = np.zeros(d)
    p["head2.w"] = conv_w(n_mels, d, 1)
    p["head2.b"] = np.zeros(n_mels)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
    return BrainParams(tensors, subject_ids, n_channels, hidden, n_mels)


def spatial_attention(x, logits) -> Tensor:
    """``out[d, t] = sum_c softmax(logits[d])[c] * x[c, t]``."""
    x, logits = tt._as_tensor(x), tt._as_tensor(logits)
    if x.shape[-2] != logits.shape[1]:
        raise DimensionError(f"spatial attention: input {x.shape} vs logits {logits.shape}")
    return tt.matmul(tt.softmax(logits, axis=1), x)


def subject_layer(x, s, params: BrainParams) -> Tensor:
    """Apply the subject's 1x1 conv (no bias). ``s`` is an id or one id per sample."""
    x = tt._as_tensor(x)
    rows = params.rows_for(s)
    w = params["subject_layers"][rows]
    if x.ndim == 2:
        if rows.size != 1:
            raise ContractError("one subject id expected for an unbatched input")
        return tt.matmul(w[0] if w.ndim == 3 else w, x)
    if rows.size != x.shape[0]:
        raise ContractError(f"{rows.size} subject ids for a batch of {x.shape[0]}")
    return tt.matmul(w, x)


def residual_block(x, k: int, params: BrainParams) -> Tensor:
    """Two dilated residual convs (dilation ``2**k``) then a 1x1 conv + GLU."""
    dil = 2 ** k
    p = f"block{k}."
    h1 = tt.add(x, tt.gelu(tt.conv1d(x, params[p + "conv1.w"], params[p + "conv1.b"], dilation=dil)))
    h2 = tt.add(h1, tt.gelu(tt.conv1d(h1, params[p + "conv2.w"], params[p + "conv2.b"], dilation=dil)))
    return tt.glu(tt.conv1d(h2, params[p + "conv3.w"], params[p + "conv3.b"]), axis=-2)


def brain_forward(meg, s, params: BrainParams) -> Tensor:
    """MEG ``[C, T]`` (or ``[B, C, T]``) -> Mel ``[T, n_mels]`` (or ``[B, T, n_mels]``)."""
    meg = tt._as_tensor(meg)
    if meg.shape[-2] != params.n_channels:
        raise DimensionError(f"expected {params.n_channels} channels, got input {meg.shape}")
    h = spatial_attention(meg, params["spatial_attention"])
    h = tt.conv1d(h, params["in_proj.w"], params["in_proj.b"])
    h = subject_layer(h, s, params)
    for k in range(N_BLOCKS):
        h = residual_block(h, k, params)
    h = tt.gelu(tt.conv1d(h, params["head1.w"], params["head1.b"]))
    h = tt.conv1d(h, params["head2.w"], params["head2.b"])
    return tt.swapaxes(h, -1, -2)
