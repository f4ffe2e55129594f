#!/usr/bin/env python3
"""
Query Complexity
Flesch Reading Ease with fixed counting rules, and equal-width binning of the
score into complexity categories.
"""

import math
import re
from dataclasses import dataclass

from ml_engine.errors import InvalidInputError

WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)
SENTENCE_END_RE = re.compile(r"[.!?](?=\s|$)")
VOWEL_GROUP_RE = re.compile(r"[aeiouy]+")

SCORE_MIN = 0.0
SCORE_MAX = 100.0


def count_words(text: str) -> int:
    return len(WORD_RE.findall(text))


def count_sentences(text: str) -> int:
    """Terminal punctuation followed by whitespace or end of text; at least 1."""
    return max(1, len(SENTENCE_END_RE.findall(text)))


def count_syllables(word: str) -> int:
    word = word.lower()
    syllables = len(VOWEL_GROUP_RE.findall(word))
    if word.endswith("e"):
        syllables -= 1
    return max(1, syllables)


@dataclass(frozen=True)
class FleschBreakdown:
    words: int
    sentences: int
    syllables: int
    raw: float
    score: float


def flesch_breakdown(text: str) -> FleschBreakdown:
    words = WORD_RE.findall(text or "")
    if not words:
        raise InvalidInputError("text has no countable words")
    n_words = len(words)
    n_sents = count_sentences(text)
    n_syll = sum(count_syllables(w) for w in words)
    raw = 206.835 - 1.015 * (n_words / n_sents) - 84.6 * (n_syll / n_words)
    score = min(SCORE_MAX, max(SCORE_MIN, raw))
    return FleschBreakdown(n_words, n_sents, n_syll, raw, score)


def flesch_score(text: str) -> float:
    """Reading ease clamped to [0, 100]; lower means harder text."""
    return flesch_breakdown(text).score


class ComplexityBinner:
    """Equal-width bins over [lo, hi]; hi falls into the last bin."""

    def __init__(self, n_bins: int = 3, lo: float = SCORE_MIN, hi: float = SCORE_MAX):
        if n_bins < 1 or not hi > lo:
            raise InvalidInputError("need n_bins >= 1 and hi > lo")
        self.n_bins = n_bins
        self.lo = lo
        self.hi = hi
        self.width = (hi - lo) / n_bins

    def bin(self, score: float) -> int:
        if not self.lo <= score <= self.hi:
            raise InvalidInputError(f"score {score} outside [{self.lo}, {self.hi}]")
        return min(self.n_bins - 1, int(math.floor((score - self.lo) / self.width)))


def bin_complexity(binner: ComplexityBinner, score: float) -> int:
    return binner.bin(score)
