"""Pretraining of the toy speech encoder-decoder on synthetic speech.

The model learns Mel -> text on random sentences drawn from the whole
speech-world vocabulary, then is frozen and reused by every experiment on
datasets sharing that world. Pretrained weights are cached on disk keyed by
the world and the training settings.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensors as tt
from .align import ce_loss
from .data import SpeechWorld
from .optim import AdamW
from .seq2seq import (PAD, Seq2SeqConfig, Seq2SeqParams, decode_teacher_forced,
                      encode, init_seq2seq)

__all__ = ["PretrainConfig", "speech_batch", "token_accuracy", "pretrain_speech_model",
           "load_or_pretrain", "default_cache_dir"]

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    seed: int = 0
    batch_size: int = 32
    lr: float = 1e-3
    max_steps: int = 4000
    eval_every: int = 100
    eval_size: int = 256
    target_accuracy: float = 0.98
    min_noise: float = 0.05
    max_noise: float = 0.4
    max_onset_frames: int = 40
    frames: int = 400


def speech_batch(world: SpeechWorld, rng, n: int, cfg: PretrainConfig, max_len: int):
    """Random sentences rendered to noisy Mel plus padded token ids."""
    mels = np.empty((n, cfg.frames, world.n_mels))
    toks = np.full((n, max_len), PAD, dtype=np.int64)
    for i in range(n):
        words = world.random_sentence(rng)
        onset = world.random_onset(rng, len(words), cfg.max_onset_frames, cfg.frames)
        noise = rng.uniform(cfg.min_noise, cfg.max_noise)
        mels[i] = world.sentence_mel(words, onset, rng, noise, cfg.frames)
        ids = [1] + world.token_ids(words) + [2]
        toks[i, :len(ids)] = ids
    return mels, toks


def token_accuracy(params: Seq2SeqParams, mels, toks) -> float:
    """Teacher-forced next-token accuracy over non-PAD targets."""
    with tt.no_grad():
        logits = decode_teacher_forced(encode(mels, params), toks[:, :-1], params).data
    target = toks[:, 1:]
    keep = target != PAD
    return float(np.mean(np.argmax(logits, axis=-1)[keep] == target[keep]))


def pretrain_speech_model(world: SpeechWorld, model_cfg: Seq2SeqConfig | None = None,
                          cfg: PretrainConfig | None = None) -> tuple[Seq2SeqParams, dict]:
    cfg = cfg or PretrainConfig()
    model_cfg = model_cfg or Seq2SeqConfig(vocab_size=len(world.vocab), n_mels=world.n_mels)
    streams = np.random.SeedSequence([cfg.seed, 2]).spawn(3)
    init_rng, data_rng, eval_rng = (np.random.default_rng(s) for s in streams)
    params = init_seq2seq(model_cfg, seed=init_rng, frozen=False)
    opt = AdamW(params.parameters().values(), lr=cfg.lr, weight_decay=0.01)
    width = model_cfg.max_len
    eval_mels, eval_toks = speech_batch(world, eval_rng, cfg.eval_size, cfg, width)
    history = []
    acc = 0.0
    step = 0
    for step in range(1, cfg.max_steps + 1):
        mels, toks = speech_batch(world, data_rng, cfg.batch_size, cfg, width)
        opt.zero_grad()
        logits = decode_teacher_forced(encode(mels, params), toks[:, :-1], params)
        loss = ce_loss(logits, toks[:, 1:])
        tt.backward(loss)
        opt.step()
        if step % cfg.eval_every == 0:
            acc = token_accuracy(params, eval_mels, eval_toks)
            history.append({"step": step, "loss": loss.item(), "accuracy": acc})
            log.info("pretrain step %d loss %.4f acc %.4f", step, loss.item(), acc)
            if acc >= cfg.target_accuracy:
                break
    params.set_frozen(True)
    return params, {"steps": step, "accuracy": acc, "history": history}


def default_cache_dir() -> Path:
    return Path(os.environ.get("MAD_CACHE_DIR", Path.home() / ".cache" / "mad"))


def load_or_pretrain(world: SpeechWorld, cache_dir=None, cfg: PretrainConfig | None = None,
                     model_cfg: Seq2SeqConfig | None = None) -> Seq2SeqParams:
    """Return the pretrained frozen speech model for ``world``, training it once."""
    cfg = cfg or PretrainConfig()
    model_cfg = model_cfg or Seq2SeqConfig(vocab_size=len(world.vocab), n_mels=world.n_mels)
    blob = json.dumps([asdict(cfg), asdict(model_cfg)], sort_keys=True).encode()
    tag = f"speech-{world.key()}-{hashlib.sha256(blob).hexdigest()[:12]}"
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = root / tag
    if (path / "params.json").exists():
        return Seq2SeqParams.load(path)
    params, info = pretrain_speech_model(world, model_cfg, cfg)
    params.save(path)
    world.vocab.save(path / "vocab.json")
    (path / "pretrain.json").write_text(json.dumps(info, indent=2))
    return params
