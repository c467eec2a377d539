"""Shallow-fusion decoding with prior-bias subtraction.

Each decode step combines an acoustic score, a label prior, and a language
model over the vocabulary:

    fused_v = am_v - lambda_prior * prior_v + lambda_lm * lm_v

and hypotheses maximize the sum of fused terms over their tokens. Scorers
are pluggable: anything returning a normalized log-probability vector for a
token prefix. Table-driven toy scorers (and an exhaustive-search oracle)
make the rule testable without a trained network.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ScorerContractError

SOS_ID = -1
NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class FusionWeights:
    lambda_prior: float = 0.0
    lambda_lm: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda_prior) and math.isfinite(self.lambda_lm)):
            raise ValueError("fusion weights must be finite")
        if self.lambda_prior < 0 or self.lambda_lm < 0:
            raise ValueError("fusion weights must be non-negative")


@dataclass(frozen=True)
class Hypothesis:
    """Token sequence (starting with SOS) and its cumulative fused score."""

    tokens: tuple[int, ...]
    score: float
    finished: bool


class StepScorer(Protocol):
    def log_probs(self, prefix: tuple[int, ...], context) -> np.ndarray:
        """Normalized log-probability vector over the vocabulary for the
        next token after prefix (prefix[0] is SOS)."""
        ...


@dataclass
class PriorModel:
    """Unigram label log-probabilities, normalized, finite after smoothing."""

    log_probs: np.ndarray

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        if not np.all(np.isfinite(self.log_probs)):
            raise ValueError("prior log-probabilities must be finite")
        lse = _logsumexp(self.log_probs)
        if abs(lse) > NORMALIZATION_TOL:
            raise ValueError(f"prior is not normalized (logsumexp={lse:.2e})")

    def __len__(self) -> int:
        return len(self.log_probs)


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + math.log(float(np.sum(np.exp(x - m))))


def estimate_prior(corpus: Iterable[Sequence[int]], vocab_size: int,
                   smoothing: float = 1.0) -> PriorModel:
    """Smoothed unigram prior: log((count_v + s) / (N + s*V))."""
    if vocab_size < 1:
        raise ValueError("vocabulary must be non-empty")
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    counts = np.zeros(vocab_size, dtype=np.float64)
    total = 0
    for seq in corpus:
        for tok in seq:
            if not (0 <= tok < vocab_size):
                raise ValueError(f"token id {tok} outside vocabulary of {vocab_size}")
            counts[tok] += 1
            total += 1
    if total == 0:
        raise ValueError("corpus contains no tokens")
    return PriorModel(np.log((counts + smoothing) / (total + smoothing * vocab_size)))


def fused_step(am_logp: np.ndarray, lm_logp: np.ndarray, prior: PriorModel,
               weights: FusionWeights) -> np.ndarray:
    """One step of the fusion rule (unnormalized combination)."""
    am = np.asarray(am_logp, dtype=np.float64)
    lm = np.asarray(lm_logp, dtype=np.float64)
    if am.shape != lm.shape or am.shape != prior.log_probs.shape:
        raise ValueError(
            f"vector lengths differ: am {am.shape}, lm {lm.shape}, "
            f"prior {prior.log_probs.shape}")
    return am - weights.lambda_prior * prior.log_probs + weights.lambda_lm * lm


def _checked(scorer: StepScorer, prefix: tuple[int, ...], context,
             vocab_size: int) -> np.ndarray:
    vec = np.asarray(scorer.log_probs(prefix, context), dtype=np.float64)
    if vec.shape != (vocab_size,):
        raise ScorerContractError(
            f"scorer returned shape {vec.shape}, expected ({vocab_size},)")
    lse = _logsumexp(vec)
    if abs(lse) > NORMALIZATION_TOL:
        raise ScorerContractError(
            f"scorer output is not normalized (logsumexp={lse:.2e})")
    return vec


def _better(a: Hypothesis, b: Hypothesis | None) -> bool:
    """Higher score wins; ties go to the lexicographically smaller tokens."""
    if b is None:
        return True
    if a.score != b.score:
        return a.score > b.score
    return a.tokens < b.tokens


def beam_search(am: StepScorer, lm: StepScorer, prior: PriorModel,
                weights: FusionWeights, beam_size: int, max_len: int,
                eos_id: int, context=None) -> Hypothesis:
    """Beam search over fused step scores.

    Hypotheses that emit eos are frozen (no further terms accrue) and
    collected; the best finished hypothesis wins, falling back to the best
    live hypothesis at max_len. Ties break toward the lexicographically
    smaller token sequence.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    vocab_size = len(prior)
    live = [Hypothesis((SOS_ID,), 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        candidates: list[Hypothesis] = []
        for hyp in live:
            fused = fused_step(_checked(am, hyp.tokens, context, vocab_size),
                               _checked(lm, hyp.tokens, context, vocab_size),
                               prior, weights)
            for v in range(vocab_size):
                candidates.append(Hypothesis(hyp.tokens + (v,),
                                             hyp.score + float(fused[v]),
                                             v == eos_id))
        candidates.sort(key=lambda h: (-h.score, h.tokens))
        kept = candidates[:beam_size]
        live = [h for h in kept if not h.finished]
        finished.extend(h for h in kept if h.finished)
    best = None
    for h in finished if finished else live:
        if _better(h, best):
            best = h
    return best


def exhaustive_search(am: StepScorer, lm: StepScorer, prior: PriorModel,
                      weights: FusionWeights, max_len: int, eos_id: int,
                      context=None) -> Hypothesis:
    """Enumerate every token sequence up to max_len and return the argmax.

    The oracle twin of beam_search: same scoring, same eos freezing, same
    finished-first selection and tie-break.
    """
    vocab_size = len(prior)
    if vocab_size ** max_len > 10 ** 6:
        raise ValueError(
            f"search space {vocab_size}^{max_len} exceeds the enumeration limit")
    finished: list[Hypothesis] = []
    deepest: list[Hypothesis] = []

    def expand(hyp: Hypothesis, depth: int):
        if hyp.finished:
            finished.append(hyp)
            return
        if depth == max_len:
            deepest.append(hyp)
            return
        fused = fused_step(_checked(am, hyp.tokens, context, vocab_size),
                           _checked(lm, hyp.tokens, context, vocab_size),
                           prior, weights)
        for v in range(vocab_size):
            expand(Hypothesis(hyp.tokens + (v,), hyp.score + float(fused[v]),
                              v == eos_id), depth + 1)

    expand(Hypothesis((SOS_ID,), 0.0, False), 0)
    best = None
    for h in finished if finished else deepest:
        if _better(h, best):
            best = h
    return best


class TableAcousticScorer:
    """Acoustic scorer backed by a per-prefix table of log-prob vectors.

    Keys are space-joined token ids after SOS ("" for the first step);
    missing prefixes fall back to a default vector.
    """

    def __init__(self, vocab_size: int, table: dict[str, Sequence[float]],
                 default: Sequence[float] | None = None):
        self.vocab_size = vocab_size
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        if default is None:
            default = np.full(vocab_size, -math.log(vocab_size))
        self.default = np.asarray(default, dtype=np.float64)

    @classmethod
    def from_json(cls, path: str) -> "TableAcousticScorer":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(int(doc["vocab_size"]), doc.get("table", {}), doc.get("default"))

    def log_probs(self, prefix: tuple[int, ...], context) -> np.ndarray:
        key = " ".join(str(t) for t in prefix[1:])
        return self.table.get(key, self.default)


class BigramLanguageScorer:
    """Bigram LM: an initial row for SOS and one row per previous token."""

    def __init__(self, initial: Sequence[float], bigram: Sequence[Sequence[float]]):
        self.initial = np.asarray(initial, dtype=np.float64)
        self.bigram = np.asarray(bigram, dtype=np.float64)
        if self.bigram.shape != (len(self.initial), len(self.initial)):
            raise ValueError("bigram matrix must be square and match the initial row")

    @classmethod
    def from_json(cls, path: str) -> "BigramLanguageScorer":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(doc["initial"], doc["bigram"])

    def log_probs(self, prefix: tuple[int, ...], context) -> np.ndarray:
        prev = prefix[-1]
        if prev == SOS_ID:
            return self.initial
        return self.bigram[prev]


def uniform_prior(vocab_size: int) -> PriorModel:
    return PriorModel(np.full(vocab_size, -math.log(vocab_size)))
