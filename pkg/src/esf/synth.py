"""Synthetic speech-like corpora for benchmarks and tests.

Utterances are short mixtures of random tones with a little noise, which
gives the feature front end and VTLP something spectrally meaningful to act
on while staying cheap to generate.
"""

from __future__ import annotations

import os

import numpy as np

from .pipeline import build_char_vocab, write_vocab
from .recordio import ShardSet, UtteranceRecord, write_shards

_WORDS = ("algo", "baseline", "cepstrum", "delta", "epoch", "filter", "gain",
          "hop", "input", "join", "kernel", "label", "mel")


def synth_utterance(rng: np.random.Generator, utt_id: str, sample_rate: int,
                    duration_range: tuple[float, float]) -> UtteranceRecord:
    duration = float(rng.uniform(*duration_range))
    n = max(1, int(round(duration * sample_rate)))
    t = np.arange(n) / sample_rate
    wave = np.zeros(n)
    for _ in range(int(rng.integers(2, 4))):
        freq = float(rng.uniform(120.0, 3800.0))
        amp = float(rng.uniform(0.05, 0.2))
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        wave += amp * np.sin(2.0 * np.pi * freq * t + phase)
    wave += 0.01 * rng.standard_normal(n)
    words = rng.choice(len(_WORDS), size=int(rng.integers(1, 4)))
    transcript = " ".join(_WORDS[w] for w in words)
    return UtteranceRecord.from_float(utt_id, sample_rate, wave, transcript)


def synth_corpus(num_utterances: int, *, seed: int = 0, sample_rate: int = 16000,
                 duration_range: tuple[float, float] = (0.2, 0.5)) -> list[UtteranceRecord]:
    rng = np.random.default_rng(seed)
    return [synth_utterance(rng, f"utt-{i:06d}", sample_rate, duration_range)
            for i in range(num_utterances)]


def write_synth_corpus(directory: str, num_utterances: int, num_shards: int, *,
                       seed: int = 0, sample_rate: int = 16000,
                       duration_range: tuple[float, float] = (0.2, 0.5),
                       ) -> tuple[ShardSet, str]:
    """Write a synthetic corpus plus its vocabulary; returns (shards, vocab path)."""
    os.makedirs(directory, exist_ok=True)
    records = synth_corpus(num_utterances, seed=seed, sample_rate=sample_rate,
                           duration_range=duration_range)
    shards = write_shards(records, num_shards,
                          os.path.join(directory, "corpus-{shard:04d}.esrd"))
    vocab_path = os.path.join(directory, "vocab.txt")
    write_vocab(vocab_path, build_char_vocab([r.transcript for r in records]))
    return shards, vocab_path
