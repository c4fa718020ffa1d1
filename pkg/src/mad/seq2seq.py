"""Toy speech encoder-decoder standing in for a pretrained ASR model.

Encoder: per-spectrogram standardization -> conv(80->d, K=3) + GELU ->
conv(d->d, K=3, stride 2) + GELU -> sinusoidal positions -> pre-LN
transformer layers -> final LayerNorm. 400 Mel frames become 200 states.

Decoder: token embedding + sinusoidal positions -> pre-LN layers with causal
self-attention, cross-attention and FFN -> LayerNorm -> logits through the
tied embedding.

Optional fixed-rank adapters (``W + alpha/r * B @ A``) modify the encoder's
query and value projections.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensors as tt
from .errors import ContractError, DimensionError
from .io import load_array, save_array
from .tensors import Tensor

__all__ = [
    "PAD", "BOS", "EOS", "Seq2SeqConfig", "Seq2SeqParams", "LoraAdapter", "Vocabulary",
    "init_seq2seq", "init_adapters", "lora_effective", "encode", "decode_teacher_forced",
    "decode_greedy", "sinusoidal_positions", "teacher_forced_predictions", "strip_special",
]

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
_MASK_VALUE = -1e30


@dataclass
class Seq2SeqConfig:
    vocab_size: int = 53
    n_mels: int = 80
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 12

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.vocab_size <= EOS:
            raise ContractError("vocabulary must hold PAD, BOS and EOS")


class Vocabulary:
    """Word list where index == token id; ids 0-2 are PAD/BOS/EOS."""

    def __init__(self, words):
        words = list(words)
        if tuple(words[:3]) != SPECIALS:
            words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, add_special: bool = True) -> list[int]:
        ids = [self.index[w] for w in text.split() if w in self.index]
        return [BOS] + ids + [EOS] if add_special else ids

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in strip_special(ids))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.words))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"vocabulary file missing: {p}")
        return cls(json.loads(p.read_text()))


def strip_special(ids) -> list[int]:
    """Drop a leading BOS, cut at the first EOS, drop PAD."""
    out = []
    for i, tok in enumerate(ids):
        tok = int(tok)
        if tok == EOS:
            break
        if tok == PAD or (tok == BOS and i == 0):
            continue
        out.append(tok)
    return out


@dataclass
class LoraAdapter:
    """Fixed-rank additive update for one ``[d_out, d_in]`` weight."""

    A: Tensor
    B: Tensor
    alpha: float = 8.0

    @property
    def r(self) -> int:
        return self.A.shape[0]


def lora_effective(w, adapter: LoraAdapter | None) -> Tensor:
    """``W + (alpha / r) * B @ A``."""
    w = tt._as_tensor(w)
    if adapter is None:
        return w
    a, b = adapter.A, adapter.B
    if a.shape[1] != w.shape[1] or b.shape[0] != w.shape[0] or b.shape[1] != a.shape[0]:
        raise DimensionError(f"adapter shapes A{a.shape} B{b.shape} do not fit W{w.shape}")
    return tt.add(w, tt.mul(tt.matmul(b, a), adapter.alpha / adapter.r))


class Seq2SeqParams:
    def __init__(self, config: Seq2SeqConfig, tensors: dict[str, Tensor], frozen: bool = True):
        self.config = config
        self.tensors = dict(tensors)
        self.frozen = frozen
        self.set_frozen(frozen)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> dict[str, Tensor]:
        return self.tensors

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for t in self.tensors.values():
            t.requires_grad = not frozen

    def copy(self) -> "Seq2SeqParams":
        return Seq2SeqParams(self.config, {k: Tensor(v.data.copy(), name=k)
                                           for k, v in self.tensors.items()}, self.frozen)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = list(self.tensors)
        for name in names:
            save_array(d / f"{name}.madt", self.tensors[name].data)
        meta = {"config": asdict(self.config), "names": names,
                "shapes": [list(self.tensors[n].shape) for n in names], "frozen": self.frozen}
        (d / "params.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "Seq2SeqParams":
        d = Path(directory)
        meta = json.loads((d / "params.json").read_text())
        tensors = {n: Tensor(load_array(d / f"{n}.madt"), name=n) for n in meta["names"]}
        return cls(Seq2SeqConfig(**meta["config"]), tensors, frozen=meta.get("frozen", True))


def init_seq2seq(config: Seq2SeqConfig | None = None, seed=0, frozen: bool = False) -> Seq2SeqParams:
    cfg = config or Seq2SeqConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.ffn_mult * cfg.d_model

    def lin(dout, din):
        return rng.normal(0.0, np.sqrt(1.0 / din), size=(dout, din))

    p: dict[str, np.ndarray] = {
        "conv1.w": rng.normal(0.0, np.sqrt(1.0 / (cfg.n_mels * 3)), size=(d, cfg.n_mels, 3)),
        "conv1.b": np.zeros(d),
        "conv2.w": rng.normal(0.0, np.sqrt(1.0 / (d * 3)), size=(d, d, 3)),
        "conv2.b": np.zeros(d),
        "embed": rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.vocab_size, d)),
    }

    def attn(prefix):
        for nm in ("q", "k", "v", "o"):
            p[f"{prefix}.{nm}.w"] = lin(d, d)
            p[f"{prefix}.{nm}.b"] = np.zeros(d)

    def norm(prefix):
        p[f"{prefix}.g"] = np.ones(d)
        p[f"{prefix}.b"] = np.zeros(d)

    def ffn(prefix):
        p[f"{prefix}.fc1.w"] = lin(f, d)
        p[f"{prefix}.fc1.b"] = np.zeros(f)
        p[f"{prefix}.fc2.w"] = lin(d, f)
        p[f"{prefix}.fc2.b"] = np.zeros(d)

    for i in range(cfg.enc_layers):
        norm(f"enc{i}.ln1"); attn(f"enc{i}.attn"); norm(f"enc{i}.ln2"); ffn(f"enc{i}")
    norm("enc.ln")
    for i in range(cfg.dec_layers):
        norm(f"dec{i}.ln1"); attn(f"dec{i}.self")
        norm(f"dec{i}.ln2"); attn(f"dec{i}.cross")
        norm(f"dec{i}.ln3"); ffn(f"dec{i}")
    norm("dec.ln")
    tensors = {k: Tensor(v, name=k) for k, v in p.items()}
    return Seq2SeqParams(cfg, tensors, frozen=frozen)


def init_adapters(params: Seq2SeqParams, rank: int = 4, alpha: float = 8.0,
                  seed=0) -> dict[str, LoraAdapter]:
    """Adapters on every encoder query/value projection; ``B`` starts at zero."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = params.config.d_model
    out = {}
    for i in range(params.config.enc_layers):
        for nm in ("q", "v"):
            key = f"enc{i}.attn.{nm}.w"
            a = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(rank, d)), requires_grad=True,
                       name=key + ".lora_A")
            b = Tensor(np.zeros((d, rank)), requires_grad=True, name=key + ".lora_B")
            out[key] = LoraAdapter(a, b, alpha)
    return out


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((length, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def _weight(params, name, adapters):
    w = params[name]
    if adapters and name in adapters:
        return lora_effective(w, adapters[name])
    return w


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, t, d = x.shape
    return tt.transpose(tt.reshape(x, (b, t, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return tt.reshape(tt.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attention(params, prefix, xq, xkv, n_heads, adapters=None, causal=False) -> Tensor:
    q = tt.linear(xq, _weight(params, f"{prefix}.q.w", adapters), params[f"{prefix}.q.b"])
    k = tt.linear(xkv, _weight(params, f"{prefix}.k.w", adapters), params[f"{prefix}.k.b"])
    v = tt.linear(xkv, _weight(params, f"{prefix}.v.w", adapters), params[f"{prefix}.v.b"])
    q, k, v = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    scores = tt.mul(tt.matmul(q, tt.swapaxes(k, -1, -2)), 1.0 / np.sqrt(q.shape[-1]))
    if causal:
        tq, tk = scores.shape[-2], scores.shape[-1]
        scores = tt.masked_fill(scores, np.triu(np.ones((tq, tk), dtype=bool), k=1), _MASK_VALUE)
    ctx = _merge_heads(tt.matmul(tt.softmax(scores, axis=-1), v))
    return tt.linear(ctx, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])


def _ffn(params, prefix, x) -> Tensor:
    h = tt.gelu(tt.linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return tt.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def _ln(params, prefix, x) -> Tensor:
    return tt.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _standardize(mel: Tensor) -> Tensor:
    axes = (-2, -1)
    mu = tt.mean(mel, axis=axes, keepdims=True)
    xc = tt.sub(mel, mu)
    var = tt.mean(tt.square(xc), axis=axes, keepdims=True)
    return tt.div(xc, tt.sqrt(tt.add(var, 1e-8)))


def encode(mel, params: Seq2SeqParams, adapters: dict[str, LoraAdapter] | None = None) -> Tensor:
    """Mel ``[frames, n_mels]`` (or batched) -> hidden states ``[frames/2, d]``."""
    mel = tt._as_tensor(mel)
    cfg = params.config
    if mel.ndim not in (2, 3) or mel.shape[-1] != cfg.n_mels:
        raise DimensionError(f"encode expects [frames, {cfg.n_mels}], got {mel.shape}")
    squeeze = mel.ndim == 2
    x = tt.reshape(mel, (1,) + mel.shape) if squeeze else mel
    x = tt.swapaxes(_standardize(x), -1, -2)
    x = tt.gelu(tt.conv1d(x, params["conv1.w"], params["conv1.b"]))
    x = tt.gelu(tt.conv1d(x, params["conv2.w"], params["conv2.b"], padding=1, stride=2))
    x = tt.swapaxes(x, -1, -2)
    x = tt.add(x, sinusoidal_positions(x.shape[1], cfg.d_model))
    for i in range(cfg.enc_layers):
        h = _ln(params, f"enc{i}.ln1", x)
        x = tt.add(x, _attention(params, f"enc{i}.attn", h, h, cfg.n_heads, adapters))
        x = tt.add(x, _ffn(params, f"enc{i}", _ln(params, f"enc{i}.ln2", x)))
    x = _ln(params, "enc.ln", x)
    return x[0] if squeeze else x


def _decoder(e: Tensor, tokens: np.ndarray, params: Seq2SeqParams) -> Tensor:
    cfg = params.config
    x = tt.add(params["embed"][tokens], sinusoidal_positions(tokens.shape[1], cfg.d_model))
    for i in range(cfg.dec_layers):
        h = _ln(params, f"dec{i}.ln1", x)
        x = tt.add(x, _attention(params, f"dec{i}.self", h, h, cfg.n_heads, causal=True))
        h = _ln(params, f"dec{i}.ln2", x)
        x = tt.add(x, _attention(params, f"dec{i}.cross", h, e, cfg.n_heads))
        x = tt.add(x, _ffn(params, f"dec{i}", _ln(params, f"dec{i}.ln3", x)))
    x = _ln(params, "dec.ln", x)
    return tt.matmul(x, tt.transpose(params["embed"]))


def decode_teacher_forced(e, target, params: Seq2SeqParams) -> Tensor:
    """Logits ``[J, V]`` (or ``[B, J, V]``); position j sees ``target[:j+1]`` only."""
    e = tt._as_tensor(e)
    tokens = np.asarray(target, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None]
        e = tt.reshape(e, (1,) + e.shape)
    if e.ndim != 3 or e.shape[0] != tokens.shape[0]:
        raise DimensionError(f"hidden states {e.shape} do not match tokens {tokens.shape}")
    v = params.config.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= v):
        raise ContractError(f"token ids must lie in [0, {v})")
    if np.any(tokens[:, 0] != BOS):
        raise ContractError("decoder input must start with BOS")
    logits = _decoder(e, tokens, params)
    return logits[0] if squeeze else logits


def decode_greedy(e, params: Seq2SeqParams, max_len: int | None = None) -> list[list[int]] | list[int]:
    """Argmax decoding from BOS until EOS or ``max_len`` generated tokens.

    Returns the generated ids without BOS and EOS. Ties go to the lowest id.
    """
    max_len = params.config.max_len if max_len is None else max_len
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    e = tt._as_tensor(e)
    squeeze = e.ndim == 2
    if squeeze:
        e = tt.reshape(e, (1,) + e.shape)
    b = e.shape[0]
    seq = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    with tt.no_grad():
        for _ in range(max_len):
            logits = _decoder(e, seq, params).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            nxt = np.where(done, PAD, nxt)
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out = [strip_special(row) for row in seq]
    return out[0] if squeeze else out


def teacher_forced_predictions(e, target, params: Seq2SeqParams) -> list[list[int]]:
    """Per-position argmax given the gold prefix, cut at EOS.

    ``target`` is the full ``[BOS, w1..wn, EOS]`` sequence. Inputs are
    ``BOS, w1..wn``, so each row yields one prediction per target token; the
    position fed EOS would predict past the sequence and is not scored.
    """
    tokens = np.atleast_2d(np.asarray(target, dtype=np.int64))
    e = tt._as_tensor(e)
    if e.ndim == 2:
        e = tt.reshape(e, (1,) + e.shape)
    with tt.no_grad():
        logits = decode_teacher_forced(e, tokens[:, :-1], params).data
    pred = np.argmax(logits, axis=-1)
    out = []
    for row_pred, row in zip(pred, tokens):
        n = int(np.sum(row != PAD)) - 1
        out.append(strip_special([BOS] + list(row_pred[:n])))
    return out
