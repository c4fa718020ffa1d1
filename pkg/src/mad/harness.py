"""Training, evaluation, ablation and noise sweeps.

The MEG stream (Brain Module, then the frozen speech encoder with optional
LoRA adapters) is aligned to the speech stream (the frozen encoder applied to
the true Mel) by any subset of three losses:

* ``Lm`` on Mel spectrograms (CLIP by default),
* ``Le`` on encoder hidden states (MMD by default),
* ``Lt`` token cross-entropy through the frozen decoder.

Either alignment slot can be switched to the other loss kind over its own
operands, which is how the "(CLIP)"/"(MMD)" ablation rows are built.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensors as tt
from .align import LossWeights, Temperature, ce_loss, clip_loss, mmd_loss
from .brain import BrainParams, brain_forward, init_brain
from .data import Dataset, make_noise_input
from .errors import ContractError, NumericError, ParameterError
from .io import load_array, save_array
from .metrics import MetricReport, metric_report
from .optim import AdamW
from .pretrain import PretrainConfig, load_or_pretrain
from .seq2seq import (LoraAdapter, Seq2SeqParams, Vocabulary, decode_greedy,
                      decode_teacher_forced, encode, init_adapters, teacher_forced_predictions)

__all__ = [
    "EvalConfig", "RunConfig", "RunReport", "Checkpoint", "seed_stream", "train", "evaluate",
    "ablate", "noise_sweep", "standard_grid", "validation_loss", "ABLATION_FIELDS",
]

log = logging.getLogger(__name__)

LOSS_NAMES = ("Lm", "Le", "Lt")
TRAINABLES = ("brain", "lora")


def seed_stream(master: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose, derived from the master seed.

    Uses a counter-based bit generator keyed by ``(master, name)``, so adding a
    consumer never shifts the numbers another consumer sees.
    """
    key = [int(master)] + list(name.encode())
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass
class EvalConfig:
    teacher_forcing: bool = False
    input: str = "meg"
    noise_ratio: float = 1.0
    split: str = "test"
    batch_size: int = 64
    max_segments: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.noise_ratio <= 1.0):
            raise ParameterError(f"noise_ratio must lie in [0, 1], got {self.noise_ratio}")


@dataclass
class RunConfig:
    losses: list = field(default_factory=lambda: ["Lm", "Le", "Lt"])
    loss_types: dict = field(default_factory=lambda: {"Lm": "clip", "Le": "mmd"})
    trainables: list = field(default_factory=lambda: ["brain"])
    lambda_m: float = 1.0
    lambda_e: float = 0.01
    lambda_t: float = 1.0
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    hidden: int = 64
    mmd_tr: int = 50
    lora_rank: int = 4
    lora_alpha: float = 8.0
    max_train_segments: int | None = None
    max_val_segments: int | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if isinstance(self.eval, dict):
            self.eval = EvalConfig(**self.eval)
        self.betas = tuple(self.betas)
        self.losses = list(self.losses)
        self.trainables = list(self.trainables)
        self.loss_types = {"Lm": "clip", "Le": "mmd", **dict(self.loss_types)}
        bad = set(self.losses) - set(LOSS_NAMES)
        if bad or not self.losses:
            raise ParameterError(f"losses must be a nonempty subset of {LOSS_NAMES}, got {self.losses}")
        if not self.trainables or set(self.trainables) - set(TRAINABLES):
            raise ParameterError(f"trainables must be a nonempty subset of {TRAINABLES}")
        for slot in ("Lm", "Le"):
            if self.loss_types[slot] not in ("clip", "mmd"):
                raise ParameterError(f"loss type for {slot} must be clip or mmd")
        self.weights()
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2")

    def weights(self) -> LossWeights:
        active = [n in self.losses for n in LOSS_NAMES]
        w = [x if a else 0.0 for x, a in zip((self.lambda_m, self.lambda_e, self.lambda_t), active)]
        return LossWeights(*w)

    @property
    def label(self) -> str:
        parts = []
        for name in self.losses:
            kind = self.loss_types.get(name)
            native = {"Lm": "clip", "Le": "mmd"}.get(name)
            parts.append(f"{name}({kind.upper()})" if kind and kind != native else name)
        return "+".join(parts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


@dataclass
class RunReport:
    config: dict
    train_losses: list
    val_losses: list
    best_epoch: int
    best_val_loss: float
    metrics: dict | None
    wall_time_s: float
    steps: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


class Checkpoint:
    """Everything evaluation needs: brain, frozen speech model, adapters, vocab."""

    def __init__(self, brain: BrainParams, speech: Seq2SeqParams, vocab: Vocabulary,
                 adapters: dict[str, LoraAdapter] | None, temperature: float, config: dict):
        self.brain = brain
        self.speech = speech
        self.vocab = vocab
        self.adapters = adapters
        self.temperature = temperature
        self.config = config

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.brain.save(d / "brain")
        self.speech.save(d / "seq2seq")
        self.vocab.save(d / "vocab.json")
        if self.adapters:
            ad = d / "adapters"
            ad.mkdir(exist_ok=True)
            meta = {}
            for name, a in self.adapters.items():
                save_array(ad / f"{name}.A.madt", a.A.data)
                save_array(ad / f"{name}.B.madt", a.B.data)
                meta[name] = a.alpha
            (ad / "adapters.json").write_text(json.dumps(meta, indent=2))
        save_array(d / "temperature.madt", np.array([self.temperature]))
        (d / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        if not d.is_dir():
            raise FileNotFoundError(f"no checkpoint at {d}")
        vocab = Vocabulary.load(d / "vocab.json")
        adapters = None
        meta_path = d / "adapters" / "adapters.json"
        if meta_path.exists():
            adapters = {}
            for name, alpha in json.loads(meta_path.read_text()).items():
                adapters[name] = LoraAdapter(
                    tt.Tensor(load_array(d / "adapters" / f"{name}.A.madt"), requires_grad=True),
                    tt.Tensor(load_array(d / "adapters" / f"{name}.B.madt"), requires_grad=True),
                    float(alpha))
        temp = float(load_array(d / "temperature.madt")[0])
        return cls(BrainParams.load(d / "brain"), Seq2SeqParams.load(d / "seq2seq"), vocab,
                   adapters, temp, json.loads((d / "config.json").read_text()))


def _speech_model(dataset: Dataset, speech: Seq2SeqParams | None, cache_dir=None,
                  pretrain_cfg: PretrainConfig | None = None) -> Seq2SeqParams:
    if speech is not None:
        return speech
    synth = dataset.synth_config()
    if synth is None:
        raise ContractError("dataset has no generation config; pass a pretrained speech model")
    return load_or_pretrain(synth.world(), cache_dir=cache_dir, cfg=pretrain_cfg)


def _batches(indices, batch_size: int, rng=None, drop_last: bool = True):
    """Index chunks. Without ``drop_last`` a lone trailing item joins the previous
    chunk, so every chunk has at least two items whenever the input does."""
    idx = np.asarray(indices, dtype=np.int64)
    if rng is not None:
        idx = idx[rng.permutation(idx.size)]
    if drop_last:
        bounds = list(range(0, idx.size - idx.size % batch_size + 1, batch_size))
    else:
        bounds = list(range(0, idx.size, batch_size)) + [idx.size]
        if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
            del bounds[-2]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        yield idx[lo:hi]


def _check_finite(name: str, value: tt.Tensor) -> None:
    if not math.isfinite(value.item()):
        raise NumericError(f"loss term {name} is not finite ({value.item()})")


class _Objective:
    """Computes the composite objective for one batch."""

    def __init__(self, cfg: RunConfig, brain: BrainParams, speech: Seq2SeqParams,
                 adapters, temperature: Temperature):
        self.cfg = cfg
        self.brain = brain
        self.speech = speech
        self.adapters = adapters
        self.temperature = temperature
        self.weights = cfg.weights()

    def _align(self, kind: str, a, b, mmd_seed):
        if kind == "clip":
            return clip_loss(a, b, self.temperature)
        return mmd_loss(a, b, tr=min(self.cfg.mmd_tr, a.shape[1]), seed=mmd_seed)

    def __call__(self, batch: dict, tokens: np.ndarray, e2, mmd_seed) -> tuple[tt.Tensor, dict]:
        cfg = self.cfg
        active = {n: n in cfg.losses for n in LOSS_NAMES}
        m1 = brain_forward(batch["meg"], batch["subjects"], self.brain)
        terms: dict[str, tt.Tensor] = {}
        if active["Lm"]:
            terms["Lm"] = self._align(cfg.loss_types["Lm"], m1, batch["mel"], mmd_seed)
        if active["Le"] or active["Lt"]:
            e1 = encode(m1, self.speech, self.adapters)
            if active["Le"]:
                terms["Le"] = self._align(cfg.loss_types["Le"], e1, e2, mmd_seed)
            if active["Lt"]:
                logits = teacher_forced_logits(e1, tokens, self.speech)
                terms["Lt"] = ce_loss(logits, tokens[:, 1:])
        for name, value in terms.items():
            _check_finite(name, value)
        w = self.weights
        weights = {"Lm": w.lambda_m, "Le": w.lambda_e, "Lt": w.lambda_t}
        total = None
        for name, value in terms.items():
            term = tt.mul(value, weights[name])
            total = term if total is None else tt.add(total, term)
        _check_finite("total", total)
        return total, {k: v.item() for k, v in terms.items()}


def teacher_forced_logits(e1, tokens: np.ndarray, speech: Seq2SeqParams) -> tt.Tensor:
    """Decoder input is ``tokens[:, :-1]``; the labels are ``tokens[:, 1:]``."""
    return decode_teacher_forced(e1, tokens[:, :-1], speech)


def _speech_hidden(speech: Seq2SeqParams, mel: np.ndarray) -> np.ndarray:
    with tt.no_grad():
        return encode(mel, speech).data


def validation_loss(objective: _Objective, dataset: Dataset, indices, batch_size: int,
                    seed: int, need_e2: bool) -> float:
    """Mean active-loss composite over validation batches, with fixed MMD seeds."""
    total, count = 0.0, 0
    rng = seed_stream(seed, "mmd-validation")
    with tt.no_grad():
        for chunk in _batches(indices, batch_size, drop_last=False):
            batch = dataset.load(chunk)
            tokens = dataset.tokens(chunk)
            e2 = _speech_hidden(objective.speech, batch["mel"]) if need_e2 else None
            loss, _ = objective(batch, tokens, e2, int(rng.integers(2**63)))
            total += loss.item() * len(chunk)
            count += len(chunk)
    if count == 0:
        raise ContractError("validation split is empty")
    return total / count


def _limit(indices, n):
    return indices if n is None else indices[:n]


def train(cfg: RunConfig, dataset: Dataset | str | Path, out_dir=None, speech: Seq2SeqParams | None = None,
          cache_dir=None, pretrain_cfg: PretrainConfig | None = None, evaluate_test: bool = True
          ) -> tuple[Checkpoint, RunReport]:
    """Train the MEG stream and return the best-validation checkpoint and its report."""
    start = time.perf_counter()
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    train_idx = _limit(dataset.split("train"), cfg.max_train_segments)
    val_idx = _limit(dataset.split("validation"), cfg.max_val_segments)
    if len(train_idx) < cfg.batch_size:
        raise ContractError(f"{len(train_idx)} training segments, fewer than one batch")
    if not val_idx:
        raise ContractError("dataset has no validation segments")
    speech = _speech_model(dataset, speech, cache_dir, pretrain_cfg)
    speech.set_frozen(True)
    n_channels = dataset.load(train_idx[:1])["meg"].shape[1]
    brain = init_brain(dataset.subject_ids, n_channels=n_channels, hidden=cfg.hidden,
                       n_mels=speech.config.n_mels, seed=seed_stream(cfg.seed, "init-brain"))
    adapters = None
    if "lora" in cfg.trainables:
        adapters = init_adapters(speech, rank=cfg.lora_rank, alpha=cfg.lora_alpha,
                                 seed=seed_stream(cfg.seed, "init-lora"))
    temperature = Temperature()
    uses_clip = any(n in cfg.losses and cfg.loss_types[n] == "clip" for n in ("Lm", "Le"))

    params: list[tt.Tensor] = []
    if "brain" in cfg.trainables:
        params += list(brain.parameters().values())
    else:
        for p in brain.parameters().values():
            p.requires_grad = False
    if adapters:
        for a in adapters.values():
            params += [a.A, a.B]
    if uses_clip:
        params.append(temperature.t)
    else:
        temperature.t.requires_grad = False
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
                no_decay=[temperature.t])
    objective = _Objective(cfg, brain, speech, adapters, temperature)
    need_e2 = "Le" in cfg.losses

    shuffle_rng = seed_stream(cfg.seed, "shuffle")
    mmd_rng = seed_stream(cfg.seed, "mmd-train")
    train_losses, val_losses = [], []
    best = None
    steps = 0
    for epoch in range(cfg.epochs):
        epoch_total, epoch_n = 0.0, 0
        for chunk in _batches(train_idx, cfg.batch_size, shuffle_rng):
            batch = dataset.load(chunk)
            tokens = dataset.tokens(chunk)
            e2 = _speech_hidden(speech, batch["mel"]) if need_e2 else None
            opt.zero_grad()
            loss, parts = objective(batch, tokens, e2, int(mmd_rng.integers(2**63)))
            tt.backward(loss)
            opt.step()
            if uses_clip:
                temperature.clamp_()
            epoch_total += loss.item()
            epoch_n += 1
            steps += 1
            log.debug("epoch %d step %d loss %.5f %s", epoch, steps, loss.item(), parts)
        train_losses.append(epoch_total / max(epoch_n, 1))
        val = validation_loss(objective, dataset, val_idx, cfg.batch_size, cfg.seed, need_e2)
        val_losses.append(val)
        log.info("epoch %d train %.5f val %.5f", epoch, train_losses[-1], val)
        if best is None or val < best[1]:
            best = (epoch, val, brain.copy(),
                    {k: LoraAdapter(tt.Tensor(a.A.data.copy()), tt.Tensor(a.B.data.copy()), a.alpha)
                     for k, a in adapters.items()} if adapters else None,
                    temperature.scale)

    best_epoch, best_val, best_brain, best_adapters, best_temp = best
    meta = {**cfg.to_dict(), "data_dir": str(dataset.root.resolve())}
    ckpt = Checkpoint(best_brain, speech, dataset.vocab, best_adapters, best_temp, meta)
    metrics = None
    if evaluate_test:
        metrics = evaluate(ckpt, dataset, cfg.eval).to_dict()
    report = RunReport(cfg.to_dict(), train_losses, val_losses, best_epoch, best_val, metrics,
                       time.perf_counter() - start, steps)
    if out_dir is not None:
        out = Path(out_dir)
        ckpt.save(out)
        (out / "report.json").write_text(report.to_json())
    return ckpt, report


def predict_texts(ckpt: Checkpoint, dataset: Dataset, mode: EvalConfig, seed: int = 0):
    """Decoded strings and references for a split under one evaluation mode."""
    indices = _limit(dataset.split(mode.split), mode.max_segments)
    noise_rng = seed_stream(seed, f"noise-{mode.input}")
    hyps, refs = [], []
    with tt.no_grad():
        for chunk in _batches(indices, mode.batch_size, drop_last=False):
            batch = dataset.load(chunk)
            meg = batch["meg"]
            if mode.input != "meg":
                meg = make_noise_input(meg, mode.input, mode.noise_ratio, noise_rng)
            m1 = brain_forward(meg, batch["subjects"], ckpt.brain)
            e1 = encode(m1, ckpt.speech, ckpt.adapters)
            if mode.teacher_forcing:
                ids = teacher_forced_predictions(e1, dataset.tokens(chunk), ckpt.speech)
            else:
                ids = decode_greedy(e1, ckpt.speech)
            hyps += [ckpt.vocab.decode(row) for row in ids]
            refs += batch["transcripts"]
    return hyps, refs


def evaluate(ckpt: Checkpoint | str | Path, dataset: Dataset | str | Path,
             mode: EvalConfig | None = None, seed: int | None = None) -> MetricReport:
    """Metrics for one checkpoint on one split under one input/decoding mode."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    mode = mode or EvalConfig()
    if seed is None:
        seed = int(ckpt.config.get("seed", 0))
    hyps, refs = predict_texts(ckpt, dataset, mode, seed)
    if not refs:
        raise ContractError(f"split {mode.split!r} is empty")
    return metric_report(hyps, refs)


ABLATION_FIELDS = ["row", "losses", "trainables", "status", "bleu1", "rouge1_f", "cer",
                   "self_bleu", "best_val_loss", "frozen_intact", "error"]


def _frozen_fingerprint(speech: Seq2SeqParams) -> dict[str, bytes]:
    return {k: v.data.tobytes() for k, v in speech.parameters().items()}


def ablate(grid, dataset: Dataset | str | Path, out_dir=None, speech: Seq2SeqParams | None = None,
           cache_dir=None, pretrain_cfg: PretrainConfig | None = None) -> list[dict]:
    """Train and evaluate each config in order; a failing row is recorded, not raised."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    rows = []
    base_speech = None
    for i, cfg in enumerate(grid):
        if isinstance(cfg, dict):
            cfg = RunConfig.from_dict(cfg)
        row = {"row": i, "losses": cfg.label, "trainables": "+".join(cfg.trainables),
               "status": "ok", "bleu1": None, "rouge1_f": None, "cer": None, "self_bleu": None,
               "best_val_loss": None, "frozen_intact": None, "error": ""}
        try:
            if base_speech is None:
                base_speech = _speech_model(dataset, speech, cache_dir, pretrain_cfg)
            before = _frozen_fingerprint(base_speech)
            _, report = train(cfg, dataset, speech=base_speech)
            row["frozen_intact"] = _frozen_fingerprint(base_speech) == before
            m = report.metrics
            row.update(bleu1=m["bleu1_pct"], rouge1_f=m["rouge1_f_pct"], cer=m["cer_pct"],
                       self_bleu=m["self_bleu_pct"], best_val_loss=report.best_val_loss)
        except Exception as exc:  # one bad row must not sink the table
            log.warning("ablation row %d failed: %s", i, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    if out_dir is not None:
        write_table(rows, out_dir, "ablation")
    return rows


def write_table(rows: list[dict], out_dir, stem: str, fields=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = fields or (list(rows[0]) if rows else ABLATION_FIELDS)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields)
    writer.writeheader()
    writer.writerows(rows)
    (out / f"{stem}.csv").write_text(buf.getvalue())
    (out / f"{stem}.json").write_text(json.dumps(rows, indent=2))


def noise_sweep(ckpt: Checkpoint, dataset: Dataset, ratios=tuple(np.round(np.arange(11) * 0.1, 1)),
                strategy: str = "gaussian", split: str = "test", seed: int = 0,
                max_segments: int | None = None) -> list[dict]:
    """BLEU-1 and friends for each mixing ratio ``a`` of MEG and noise."""
    rows = []
    for a in ratios:
        mode = EvalConfig(input=strategy if a > 0 else "meg", noise_ratio=float(a), split=split,
                          max_segments=max_segments)
        rep = evaluate(ckpt, dataset, mode, seed=seed)
        rows.append({"ratio": float(a), "bleu1": rep.bleu1_pct, "rouge1_f": rep.rouge1_f_pct,
                     "cer": rep.cer_pct, "self_bleu": rep.self_bleu_pct})
    return rows


def standard_grid(base: RunConfig | None = None) -> list[RunConfig]:
    """The nine loss-set / trainable-set rows of the ablation table."""
    base = base or RunConfig()
    rows = [
        (["Le"], {}, ["brain"]),
        (["Lm", "Le"], {}, ["brain"]),
        (["Lm", "Le"], {"Le": "clip"}, ["brain"]),
        (["Lm", "Le"], {"Lm": "mmd"}, ["brain"]),
        (["Lt"], {}, ["brain"]),
        (["Lm", "Lt"], {}, ["brain"]),
        (["Le", "Lt"], {}, ["brain"]),
        (["Lm", "Le", "Lt"], {}, ["brain"]),
        (["Lm", "Le", "Lt"], {}, ["brain", "lora"]),
    ]
    out = []
    for losses, types, trainables in rows:
        d = base.to_dict()
        d.update(losses=losses, loss_types={"Lm": "clip", "Le": "mmd", **types},
                 trainables=trainables)
        out.append(RunConfig.from_dict(d))
    return out
