#!/usr/bin/env python3
"""
Embedding Providers
Turns query text into fixed-dimension vectors for task classification and
semantic clustering.

Two providers ship with the router:
- HashingEmbeddingProvider: deterministic feature hashing of token n-grams
- PrecomputedEmbeddingProvider: vectors produced by an external sentence
  encoder and stored as JSON Lines
"""

import hashlib
import json
import logging
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from ml_engine.errors import InvalidInputError, ProviderError

logger = logging.getLogger(__name__)

TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> List[str]:
    """Lowercased alphanumeric tokens; punctuation and whitespace separate."""
    return TOKEN_RE.findall(text.lower())


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """Embedding with its cached Euclidean norm."""

    values: np.ndarray
    norm: float = field(default=-1.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.norm < 0:
            object.__setattr__(self, "norm", float(np.linalg.norm(values)))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def cosine(self, other: "EmbeddingVector") -> float:
        if self.dim != other.dim:
            raise InvalidInputError(f"dimension mismatch: {self.dim} vs {other.dim}")
        if self.norm == 0 or other.norm == 0:
            return 0.0
        return float(self.values @ other.values) / (self.norm * other.norm)


class EmbeddingProvider(ABC):
    """Interface every embedding backend implements."""

    d_emb: int

    @abstractmethod
    def _encode(self, text: str) -> np.ndarray:
        """Return the raw vector for already-validated text."""

    def embed(self, text: str) -> EmbeddingVector:
        if text is None or not text.strip():
            raise InvalidInputError("text is empty")
        try:
            values = self._encode(text)
        except (InvalidInputError, ProviderError):
            raise
        except Exception as e:
            raise ProviderError(f"{type(self).__name__} failed: {e}") from e
        if values.shape != (self.d_emb,):
            raise ProviderError(f"provider returned shape {values.shape}, expected ({self.d_emb},)")
        return EmbeddingVector(values)


class HashingEmbeddingProvider(EmbeddingProvider):
    """
    Signed feature hashing of unigrams and bigrams into d_emb buckets.
    Text is truncated to max_tokens tokens before hashing and the result is
    L2-normalized.
    """

    def __init__(self, d_emb: int = 64, max_tokens: int = 256, ngram_range=(1, 2)):
        if d_emb < 1 or max_tokens < 1:
            raise InvalidInputError("d_emb and max_tokens must be positive")
        self.d_emb = d_emb
        self.max_tokens = max_tokens
        self.ngram_range = ngram_range
        self._bucket_cache: Dict[str, tuple] = {}

    def _bucket(self, gram: str) -> tuple:
        hit = self._bucket_cache.get(gram)
        if hit is None:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "little")
            hit = (h % self.d_emb, 1.0 if (h >> 63) & 1 else -1.0)
            if len(self._bucket_cache) < 200_000:
                self._bucket_cache[gram] = hit
        return hit

    def _ngrams(self, tokens: Sequence[str]) -> List[str]:
        lo, hi = self.ngram_range
        grams = []
        for n in range(lo, hi + 1):
            for i in range(len(tokens) - n + 1):
                grams.append(" ".join(tokens[i : i + n]))
        return grams

    def _encode(self, text: str) -> np.ndarray:
        tokens = tokenize(text)[: self.max_tokens]
        if not tokens:
            raise InvalidInputError("text has no tokens")
        vec = np.zeros(self.d_emb)
        for gram in self._ngrams(tokens):
            idx, sign = self._bucket(gram)
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0:
            # Signed collisions cancelled out completely
            vec[self._bucket(tokens[0])[0]] = 1.0
            norm = 1.0
        return vec / norm


def text_key(text: str) -> str:
    """Lookup key used by precomputed embedding files."""
    return hashlib.sha256(text.strip().encode("utf-8")).hexdigest()[:16]


class PrecomputedEmbeddingProvider(EmbeddingProvider):
    """
    Reads vectors produced out of process.
    File format: one JSON object per line, {"id": str, "vector": [float, ...]}.
    Text is looked up by its text_key().
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.vectors: Dict[str, np.ndarray] = {}
        self.d_emb = 0
        self._load()

    def _load(self):
        if not self.path.exists():
            raise ProviderError(f"embedding file not found: {self.path}")
        with open(self.path) as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                    vec = np.asarray(row["vector"], dtype=float)
                    key = str(row["id"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise ProviderError(f"{self.path}:{line_no}: malformed row") from e
                if self.d_emb == 0:
                    self.d_emb = int(vec.shape[0])
                elif vec.shape != (self.d_emb,):
                    raise ProviderError(f"{self.path}:{line_no}: dimension {vec.shape[0]}")
                self.vectors[key] = vec
        if not self.vectors:
            raise ProviderError(f"embedding file is empty: {self.path}")
        logger.info(f"Loaded {len(self.vectors)} precomputed embeddings (d={self.d_emb})")

    def embed_id(self, key: str) -> EmbeddingVector:
        if key not in self.vectors:
            raise ProviderError(f"no precomputed embedding for id {key}")
        return EmbeddingVector(self.vectors[key])

    def _encode(self, text: str) -> np.ndarray:
        key = text_key(text)
        if key not in self.vectors:
            raise ProviderError(f"no precomputed embedding for text key {key}")
        return self.vectors[key]


def embed(text: str, provider: EmbeddingProvider) -> EmbeddingVector:
    return provider.embed(text)
