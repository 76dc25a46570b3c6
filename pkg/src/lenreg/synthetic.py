"""Templated Markov corpus with a length-controlled answer slot.

Two paragraph families share one filler inventory:

* short: ``<topic> <filler>`` — the filler after a short context is drawn
  from K equiprobable choices (globally exactly balanced), independent of
  the topic word. Ground-truth entropy at the slot: ln K.
* long: ``<key> <tail ...> <filler>`` — a long deterministic tail follows a
  key word, and the filler is a fixed function of the key. Ground-truth
  entropy at the slot: 0.

Token lengths (with [CLS]/[SEP]) are 4 for short paragraphs and
``long_min_tokens..long_max_tokens`` for long ones, so with a 128-token
model the two families land in the first and last length intervals and
length-grouped batching never mixes them. Regenerating with a different
seed yields a held-out split over the same word inventory: fresh filler
assignments for short paragraphs, identical (deterministic) long paragraphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["MarkovSpec", "generate_corpus", "write_corpus", "classify_unit"]

_TAIL_STRIDE = 7  # coprime with tail_words so rotations differ per key


@dataclass(frozen=True)
class MarkovSpec:
    n_fillers: int = 8
    n_topics: int = 128
    per_topic: int = 4
    n_long: int = 1120
    n_keys: int = 8
    long_min_tokens: int = 120
    long_max_tokens: int = 126
    tail_words: int = 32

    def __post_init__(self) -> None:
        if self.n_fillers < 4:
            raise ValueError("need at least 4 fillers")
        if (self.n_topics * self.per_topic) % self.n_fillers != 0:
            raise ValueError("short paragraph count must divide evenly across fillers")
        if self.long_min_tokens < 6 or self.long_max_tokens < self.long_min_tokens:
            raise ValueError("bad long-paragraph token range")
        if math.gcd(_TAIL_STRIDE, self.tail_words) != 1:
            raise ValueError("tail_words must be coprime with the rotation stride")

    @property
    def n_short(self) -> int:
        return self.n_topics * self.per_topic

    def fillers(self) -> list[str]:
        return [f"ans{i:02d}" for i in range(self.n_fillers)]

    def topics(self) -> list[str]:
        return [f"topic{i:03d}" for i in range(self.n_topics)]

    def keys(self) -> list[str]:
        return [f"case{i:02d}" for i in range(self.n_keys)]

    def tail_vocab(self) -> list[str]:
        return [f"body{i:02d}" for i in range(self.tail_words)]

    def long_filler_index(self, key_index: int) -> int:
        return key_index % self.n_fillers

    @property
    def short_slot_entropy(self) -> float:
        return math.log(self.n_fillers)


def _short_units(spec: MarkovSpec, rng: np.random.Generator) -> list[str]:
    fillers = spec.fillers()
    balanced = np.repeat(np.arange(spec.n_fillers), spec.n_short // spec.n_fillers)
    assignment = rng.permutation(balanced)
    topics = spec.topics()
    units = []
    for i in range(spec.n_short):
        units.append(f"{topics[i // spec.per_topic]} {fillers[assignment[i]]}")
    return units


def _long_units(spec: MarkovSpec) -> list[str]:
    fillers = spec.fillers()
    keys = spec.keys()
    tail = spec.tail_vocab()
    span = spec.long_max_tokens - spec.long_min_tokens + 1
    units = []
    for j in range(spec.n_long):
        k = j % spec.n_keys
        token_len = spec.long_min_tokens + (j % span)
        n_tail = token_len - 4  # [CLS] key tail... filler [SEP]
        words = [keys[k]]
        words += [tail[(t + _TAIL_STRIDE * k) % spec.tail_words] for t in range(n_tail)]
        words.append(fillers[spec.long_filler_index(k)])
        units.append(" ".join(words))
    return units


def generate_corpus(spec: MarkovSpec, seed: int) -> str:
    """Paragraphs separated by blank lines, in a seed-shuffled order."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x5EED)))
    units = _short_units(spec, rng) + _long_units(spec)
    order = rng.permutation(len(units))
    return "\n\n".join(units[i] for i in order) + "\n"


def write_corpus(path, spec: MarkovSpec, seed: int) -> None:
    from pathlib import Path

    Path(path).write_text(generate_corpus(spec, seed), encoding="utf-8")


def classify_unit(unit: str) -> tuple[str, str, str]:
    """(kind, context word, slot filler word) for a generated paragraph."""
    words = unit.split()
    first, last = words[0], words[-1]
    if first.startswith("topic"):
        kind = "short"
    elif first.startswith("case"):
        kind = "long"
    else:
        raise ValueError(f"not a generated paragraph: {unit[:40]!r}")
    if not last.startswith("ans"):
        raise ValueError(f"paragraph does not end in a filler: {unit[:40]!r}")
    return kind, first, last


def length_skew_corpus(n_units: int = 2048, min_tokens: int = 8, max_tokens: int = 128,
                       n_words: int = 400, seed: int = 0) -> str:
    """Filler paragraphs whose tokenized lengths are uniform over the range.

    Token length counts the two boundary markers, so a unit of length L
    carries L - 2 body words. Used to exercise length-bucketed batching
    against a worst-case (uniform) length distribution.
    """
    if not 3 <= min_tokens <= max_tokens:
        raise ValueError("need 3 <= min_tokens <= max_tokens")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x51E7)))
    words = [f"w{i:03d}" for i in range(n_words)]
    units = []
    for _ in range(n_units):
        token_len = int(rng.integers(min_tokens, max_tokens + 1))
        body = rng.integers(0, n_words, size=token_len - 2)
        units.append(" ".join(words[w] for w in body))
    return "\n\n".join(units) + "\n"
