"""Synthetic MEG/speech/text benchmark with a known linear forward model.

The "speech world" fixes a word list, one latent template per word
(``template_frames x latent_dim``) and a mixing matrix ``R`` so that a
sentence's Mel spectrogram is ``baseline + L @ R`` (plus noise), where ``L``
is the concatenated latent track. MEG is ``G_s @ A @ L^T + noise`` with a
fixed sensor mixing ``A`` and a per-subject diagonal gain ``G_s``.

Datasets live in a directory::

    config.json        generation config echo
    manifest.jsonl     one record per segment
    vocab.json         token list (ids 0-2 reserved)
    segments/NNNNN.meg.madt, segments/NNNNN.mel.madt
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParameterError, UnknownKeyError
from .io import load_array, save_array
from .seq2seq import PAD, Vocabulary

__all__ = [
    "WORDS", "SpeechWorld", "SynthConfig", "synth_generate", "split_by_story", "split_stats",
    "make_noise_input", "NOISE_STRATEGIES", "Dataset", "read_manifest", "write_manifest",
    "pseudo_inverse_decode",
]

WORDS = (
    "the a and to of in he she it was said his her they we you on at for with but not "
    "boy girl dog cat tree house road water fire stone light night day sun moon wind "
    "run walk see look find make take give come go saw ran fell held big small old new "
    "red green dark cold warm far near fast slow home door"
).split()

NOISE_STRATEGIES = ("gaussian", "shuffle_channel", "shuffle_time", "channelwise_gaussian",
                    "timewise_gaussian")


def _word_list(n: int) -> list[str]:
    if n <= len(WORDS):
        return list(WORDS[:n])
    syll = ["ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "ze"]
    extra = []
    i = 0
    while len(WORDS) + len(extra) < n:
        extra.append(syll[i % 10] + syll[(i // 10) % 10] + syll[(i // 100) % 10])
        i += 1
    return list(WORDS) + extra


class SpeechWorld:
    """Word templates and the latent -> Mel map shared by every dataset.

    Everything is a deterministic function of ``(vocab_size, speech_seed,
    latent_dim, template_frames, n_mels)``; the toy speech model is
    pretrained against this world.
    """

    def __init__(self, vocab_size: int = 50, speech_seed: int = 0, latent_dim: int = 16,
                 template_frames: int = 40, n_mels: int = 80, baseline: float = -0.5,
                 mel_scale: float = 0.4):
        self.vocab_size = vocab_size
        self.speech_seed = speech_seed
        self.latent_dim = latent_dim
        self.template_frames = template_frames
        self.n_mels = n_mels
        self.baseline = baseline
        self.words = _word_list(vocab_size)
        self.vocab = Vocabulary(self.words)
        rng = np.random.default_rng([speech_seed, 7919])
        tf, k = template_frames, latent_dim
        raw = rng.normal(size=(vocab_size, tf + 4, k))
        kernel = np.ones(5) / 5.0
        smooth = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="valid"), 1, raw)
        envelope = np.sin(np.pi * (np.arange(tf) + 0.5) / tf) ** 0.5
        smooth = smooth * envelope[None, :, None]
        rms = np.sqrt(np.mean(smooth ** 2, axis=(1, 2), keepdims=True))
        self.templates = smooth / rms
        mix = rng.normal(size=(k, n_mels + 6))
        mix = np.apply_along_axis(lambda v: np.convolve(v, np.ones(7) / 7.0, mode="valid"), 1, mix)
        mix *= mel_scale / np.sqrt(np.mean(np.sum(mix ** 2, axis=0)))
        self.mixing = mix
        self.readout = np.linalg.pinv(mix)

    def key(self) -> str:
        return (f"v{self.vocab_size}-s{self.speech_seed}-k{self.latent_dim}"
                f"-f{self.template_frames}-m{self.n_mels}")

    def token_ids(self, word_idx) -> list[int]:
        return [int(w) + 3 for w in word_idx]

    def latent_track(self, word_idx, onset: int, frames: int = 400) -> np.ndarray:
        track = np.zeros((frames, self.latent_dim))
        t = onset
        for w in word_idx:
            track[t:t + self.template_frames] = self.templates[w]
            t += self.template_frames
        if t > frames:
            raise ContractError(f"sentence of {len(word_idx)} words does not fit {frames} frames")
        return track

    def mel_from_latent(self, track: np.ndarray) -> np.ndarray:
        return self.baseline + track @ self.mixing

    def latent_from_mel(self, mel: np.ndarray) -> np.ndarray:
        return (mel - self.baseline) @ self.readout

    def sentence_mel(self, word_idx, onset: int, rng=None, noise_std: float = 0.0,
                     frames: int = 400) -> np.ndarray:
        mel = self.mel_from_latent(self.latent_track(word_idx, onset, frames))
        if noise_std > 0:
            mel = mel + rng.normal(0.0, noise_std, size=mel.shape)
        return mel

    def random_sentence(self, rng, min_words: int = 3, max_words: int = 8, pool=None):
        pool = np.arange(self.vocab_size) if pool is None else np.asarray(pool)
        n = int(rng.integers(min_words, max_words + 1))
        return [int(w) for w in rng.choice(pool, size=n)]

    def random_onset(self, rng, n_words: int, max_onset: int, frames: int = 400) -> int:
        hi = min(max_onset, frames - self.template_frames * n_words)
        return int(rng.integers(0, hi + 1)) if hi > 0 else 0


@dataclass
class SynthConfig:
    vocab_size: int = 50
    min_words: int = 3
    max_words: int = 8
    n_stories: int = 4
    sentences_per_story: list = field(default_factory=lambda: [500, 250, 1000, 1000])
    n_subjects: int = 4
    meg_channels: int = 208
    snr_db: float = 5.0
    seed: int = 0
    speech_seed: int = 0
    latent_dim: int = 16
    template_frames: int = 40
    frames: int = 400
    mel_noise_std: float = 0.05
    max_onset_frames: int = 40
    test_story_vocab: int = 24
    test_overlap: float = 0.46
    test_story: str = "story0"
    val_story: str = "story1"

    def __post_init__(self):
        if isinstance(self.sentences_per_story, int):
            self.sentences_per_story = [self.sentences_per_story] * self.n_stories
        self.sentences_per_story = [int(n) for n in self.sentences_per_story]
        if len(self.sentences_per_story) != self.n_stories:
            raise ParameterError("sentences_per_story needs one entry per story")
        if self.max_words * self.template_frames > self.frames:
            raise ParameterError("longest sentence does not fit in a window")
        if not (0.0 <= self.test_overlap <= 1.0):
            raise ParameterError("test_overlap must lie in [0, 1]")
        if self.test_story_vocab > self.vocab_size:
            raise ParameterError("test story vocabulary larger than the vocabulary")

    @property
    def story_ids(self) -> list[str]:
        return [f"story{i}" for i in range(self.n_stories)]

    def world(self) -> SpeechWorld:
        return SpeechWorld(self.vocab_size, self.speech_seed, self.latent_dim,
                           self.template_frames)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("snr_db", 0.0) in ("inf", "Infinity", None):
            d["snr_db"] = math.inf
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.snr_db):
            d["snr_db"] = "inf"
        return d


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _story_pools(cfg: SynthConfig, rng) -> tuple[dict[str, np.ndarray], np.ndarray]:
    words = np.arange(cfg.vocab_size)
    test_vocab = rng.choice(words, size=cfg.test_story_vocab, replace=False)
    n_shared = int(round(cfg.test_overlap * cfg.test_story_vocab))
    exclusive = test_vocab[n_shared:]
    others = np.setdiff1d(words, exclusive)
    pools = {sid: (np.sort(test_vocab) if sid == cfg.test_story else others)
             for sid in cfg.story_ids}
    return pools, exclusive


def synth_generate(cfg: SynthConfig, out_dir) -> list[dict]:
    """Write a dataset directory and return its (split-labelled) manifest."""
    out = Path(out_dir)
    (out / "segments").mkdir(parents=True, exist_ok=True)
    world = cfg.world()
    root = np.random.SeedSequence([cfg.seed, 1])
    rng_text, rng_meg, rng_noise = (np.random.default_rng(s) for s in root.spawn(3))
    pools, _ = _story_pools(cfg, rng_text)
    if cfg.test_story not in pools or cfg.val_story not in pools:
        raise UnknownKeyError(f"unknown test/val story {cfg.test_story!r}/{cfg.val_story!r}")

    mixing = rng_meg.normal(0.0, 1.0 / math.sqrt(cfg.latent_dim),
                            size=(cfg.meg_channels, cfg.latent_dim))
    gains = rng_meg.uniform(0.5, 1.5, size=(cfg.n_subjects, cfg.meg_channels))
    noise_std = 0.0 if math.isinf(cfg.snr_db) else 10.0 ** (-cfg.snr_db / 20.0)

    seen: set[str] = set()
    records = []
    idx = 0
    for sid, n_sent in zip(cfg.story_ids, cfg.sentences_per_story):
        made = 0
        while made < n_sent:
            words = world.random_sentence(rng_text, cfg.min_words, cfg.max_words, pools[sid])
            text = " ".join(world.words[w] for w in words)
            if text in seen:
                continue
            seen.add(text)
            onset = world.random_onset(rng_text, len(words), cfg.max_onset_frames, cfg.frames)
            subject = int(rng_text.integers(cfg.n_subjects))
            mel = world.sentence_mel(words, onset, rng_noise, cfg.mel_noise_std, cfg.frames)
            latent = world.latent_from_mel(mel)
            meg = gains[subject][:, None] * (mixing @ latent.T)
            if noise_std > 0:
                meg = meg + rng_noise.normal(0.0, noise_std, size=meg.shape)
            base = f"segments/{idx:05d}"
            save_array(out / f"{base}.meg.madt", meg)
            save_array(out / f"{base}.mel.madt", mel)
            records.append({"path": base, "subject_id": subject, "story_id": sid,
                            "split": "", "transcript": text, "onset": onset})
            idx += 1
            made += 1

    records, stats = split_by_story(records, cfg.test_story, cfg.val_story)
    write_manifest(out / "manifest.jsonl", records)
    world.vocab.save(out / "vocab.json")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    (out / "split_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    save_array(out / "forward_mixing.madt", mixing)
    save_array(out / "forward_gains.madt", gains)
    return records


def pseudo_inverse_decode(meg: np.ndarray, subject: int, data_dir, world: SpeechWorld) -> np.ndarray:
    """Invert the stored forward model: MEG -> latent (least squares) -> Mel."""
    d = Path(data_dir)
    g_a = load_array(d / "forward_gains.madt")[subject][:, None] * load_array(d / "forward_mixing.madt")
    latent = np.linalg.pinv(g_a) @ meg
    return world.mel_from_latent(latent.T)


def split_stats(records) -> dict:
    by = {s: [r for r in records if r["split"] == s] for s in ("train", "validation", "test")}
    out = {}
    vocab = {}
    sents = {}
    for s, rs in by.items():
        words = [w for r in rs for w in r["transcript"].split()]
        vocab[s] = set(words)
        sents[s] = {r["transcript"] for r in rs}
        out[s] = {"segments": len(rs), "unique_sentences": len(sents[s]), "words": len(words),
                  "unique_words": len(vocab[s])}
    overlap_words = len(vocab["test"] & vocab["train"])
    out["test"]["overlap_sentences"] = len(sents["test"] & sents["train"])
    out["test"]["overlap_words"] = overlap_words
    out["test"]["overlap_words_pct"] = (100.0 * overlap_words / len(vocab["test"])
                                        if vocab["test"] else 0.0)
    return out


def split_by_story(records, test_story: str, val_story: str) -> tuple[list[dict], dict]:
    """Relabel every record by story: test, validation, or train."""
    stories = {r["story_id"] for r in records}
    for sid in (test_story, val_story):
        if sid not in stories:
            raise UnknownKeyError(f"unknown story {sid!r}; have {sorted(stories)}")
    if test_story == val_story:
        raise ContractError("test and validation stories must differ")
    out = []
    for r in records:
        r = dict(r)
        r["split"] = ("test" if r["story_id"] == test_story
                      else "validation" if r["story_id"] == val_story else "train")
        out.append(r)
    return out, split_stats(out)


def make_noise_input(meg, strategy: str = "gaussian", ratio: float = 1.0, seed=0) -> np.ndarray:
    """Replace or blend MEG with a noise control: ``meg * (1 - a) + noise * a``.

    Works on ``[C, T]`` or ``[B, C, T]``; statistics for the matched-Gaussian
    strategies are taken per sample.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ParameterError(f"noise ratio must lie in [0, 1], got {ratio}")
    if strategy not in NOISE_STRATEGIES:
        raise ParameterError(f"unknown noise strategy {strategy!r}")
    x = np.asarray(meg, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if strategy == "gaussian":
        noise = rng.standard_normal(x.shape)
    elif strategy == "shuffle_channel":
        if x.ndim == 2:
            noise = x[rng.permutation(x.shape[0])]
        else:
            noise = np.stack([xi[rng.permutation(x.shape[1])] for xi in x])
    elif strategy == "shuffle_time":
        noise = rng.permuted(x, axis=-1)
    elif strategy == "channelwise_gaussian":
        mu = x.mean(axis=-1, keepdims=True)
        sd = x.std(axis=-1, keepdims=True)
        noise = mu + sd * rng.standard_normal(x.shape)
    else:
        mu = x.mean(axis=-2, keepdims=True)
        sd = x.std(axis=-2, keepdims=True)
        noise = mu + sd * rng.standard_normal(x.shape)
    return x * (1.0 - ratio) + noise * ratio


def _load_fast(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    ndim = raw[6]
    shape = np.frombuffer(raw, dtype="<u8", count=ndim, offset=8)
    return np.frombuffer(raw, dtype="<f8", offset=8 + 8 * ndim).reshape(tuple(int(s) for s in shape))


class Dataset:
    """Read access to a generated (or imported) dataset directory."""

    def __init__(self, directory):
        self.root = Path(directory)
        if not (self.root / "manifest.jsonl").exists():
            raise FileNotFoundError(f"no manifest.jsonl in {self.root}")
        self.records = read_manifest(self.root / "manifest.jsonl")
        self.vocab = Vocabulary.load(self.root / "vocab.json")
        cfg_path = self.root / "config.json"
        self.config = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}

    def split(self, name: str) -> list[int]:
        if name not in ("train", "validation", "test"):
            raise UnknownKeyError(f"unknown split {name!r}")
        return [i for i, r in enumerate(self.records) if r["split"] == name]

    @property
    def subject_ids(self) -> list[int]:
        return sorted({int(r["subject_id"]) for r in self.records})

    def synth_config(self) -> SynthConfig | None:
        return SynthConfig.from_dict(self.config) if self.config else None

    def tokens(self, indices, max_len: int | None = None) -> np.ndarray:
        seqs = [self.vocab.encode(self.records[i]["transcript"]) for i in indices]
        width = max(len(s) for s in seqs) if max_len is None else max_len
        out = np.full((len(seqs), width), PAD, dtype=np.int64)
        for row, s in zip(out, seqs):
            s = s[:width]
            row[:len(s)] = s
        return out

    def load(self, indices) -> dict:
        meg = np.stack([_load_fast(self.root / f"{self.records[i]['path']}.meg.madt") for i in indices])
        mel = np.stack([_load_fast(self.root / f"{self.records[i]['path']}.mel.madt") for i in indices])
        return {"meg": meg, "mel": mel,
                "subjects": np.array([self.records[i]["subject_id"] for i in indices]),
                "transcripts": [self.records[i]["transcript"] for i in indices]}

