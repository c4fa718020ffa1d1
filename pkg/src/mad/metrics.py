"""Text metrics on decoded transcripts: BLEU-1, ROUGE-1 F, CER and Self-BLEU.

All word-level metrics share :func:`tokenize_for_metrics`. Scores are
percentages.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError

__all__ = ["MetricReport", "tokenize_for_metrics", "bleu1", "rouge1_f", "cer", "self_bleu",
           "levenshtein", "metric_report"]

_DROP = re.compile(r"[^a-z0-9' ]")


@dataclass
class MetricReport:
    bleu1_pct: float
    rouge1_f_pct: float
    cer_pct: float
    self_bleu_pct: float
    n_pairs: int

    def to_dict(self) -> dict:
        return asdict(self)


def tokenize_for_metrics(text: str) -> list[str]:
    """Lowercase, map whitespace to spaces, drop other non ``[a-z0-9']`` chars, split."""
    text = re.sub(r"\s", " ", text.lower())
    return _DROP.sub("", text).split()


def _as_tokens(x) -> list[str]:
    return tokenize_for_metrics(x) if isinstance(x, str) else list(x)


def _check_pairs(candidates, references):
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} references")
    if not references:
        raise ContractError("reference corpus is empty")


def _clipped(cand: list[str], ref_counts: Counter) -> int:
    return sum(min(c, ref_counts[w]) for w, c in Counter(cand).items())


def _brevity(c: float, r: float) -> float:
    if c <= 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu1(candidates, references) -> float:
    """Corpus BLEU-1: clipped unigram precision times the corpus brevity penalty."""
    _check_pairs(candidates, references)
    cands = [_as_tokens(c) for c in candidates]
    refs = [_as_tokens(r) for r in references]
    c = sum(len(x) for x in cands)
    if c == 0:
        return 0.0
    r = sum(len(x) for x in refs)
    matches = sum(_clipped(x, Counter(y)) for x, y in zip(cands, refs))
    return 100.0 * matches / c * _brevity(c, r)


def rouge1_f(candidates, references) -> float:
    """Mean per-pair unigram F1."""
    _check_pairs(candidates, references)
    scores = []
    for cand, ref in zip(candidates, references):
        cand, ref = _as_tokens(cand), _as_tokens(ref)
        overlap = _clipped(cand, Counter(ref))
        p = overlap / len(cand) if cand else 0.0
        rec = overlap / len(ref) if ref else 0.0
        scores.append(0.0 if p + rec == 0 else 2 * p * rec / (p + rec))
    return 100.0 * float(np.mean(scores))


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance, one row at a time."""
    if len(a) < len(b):
        a, b = b, a
    prev = np.arange(len(b) + 1)
    for i, ca in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return int(prev[-1])


def cer(candidates, references) -> float:
    """Summed character edit distance over total reference characters (lowercased)."""
    if isinstance(candidates, str):
        candidates, references = [candidates], [references]
    _check_pairs(candidates, references)
    total = sum(len(r) for r in references)
    if total == 0:
        raise ContractError("reference corpus has no characters")
    dist = sum(levenshtein(c.lower(), r.lower()) for c, r in zip(candidates, references))
    return 100.0 * dist / total


def self_bleu(candidates) -> float:
    """Mean BLEU-1 of each candidate against the pooled other candidates."""
    cands = [_as_tokens(c) for c in candidates]
    n = len(cands)
    if n < 2:
        raise ContractError(f"self_bleu needs at least 2 candidates, got {n}")
    total = Counter()
    for c in cands:
        total.update(c)
    lengths = [len(c) for c in cands]
    scores = []
    for i, cand in enumerate(cands):
        if not cand:
            scores.append(0.0)
            continue
        pool = total - Counter(cand)
        r = (sum(lengths) - lengths[i]) / (n - 1)
        scores.append(_clipped(cand, pool) / len(cand) * _brevity(len(cand), r))
    return 100.0 * float(np.mean(scores))


def metric_report(candidates: list[str], references: list[str]) -> MetricReport:
    """All four metrics for a corpus of decoded strings."""
    _check_pairs(candidates, references)
    cand_tok = [tokenize_for_metrics(c) for c in candidates]
    ref_tok = [tokenize_for_metrics(r) for r in references]
    sb = self_bleu(cand_tok) if len(cand_tok) >= 2 else 0.0
    refs_nonempty = sum(len(r) for r in references) > 0
    return MetricReport(
        bleu1_pct=bleu1(cand_tok, ref_tok),
        rouge1_f_pct=rouge1_f(cand_tok, ref_tok),
        cer_pct=cer(list(candidates), list(references)) if refs_nonempty else float("nan"),
        self_bleu_pct=sb,
        n_pairs=len(candidates),
    )
