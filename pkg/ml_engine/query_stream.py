#!/usr/bin/env python3
"""
Synthetic Query Stream
Templated prompts whose instruction lines identify the task, whose topic
vocabulary drives the semantic cluster, and whose sentence length and
syllable density set the readability bin.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ml_engine.complexity import ComplexityBinner, flesch_breakdown
from ml_engine.embeddings import EmbeddingProvider, EmbeddingVector
from ml_engine.task_classifier import extract_instruction

logger = logging.getLogger(__name__)

TASK_LABELS = [
    "question_answering",
    "situation_completion",
    "commonsense_reasoning",
    "math_reasoning",
    "summarization",
]

INSTRUCTIONS: Dict[str, Tuple[List[str], List[str]]] = {
    "question_answering": (
        [
            "Answer the following multiple choice exam question.",
            "Choose the correct option for this knowledge question.",
            "Read the question and pick the right answer choice.",
        ],
        [
            "Reply with the letter of the correct option only.",
            "Respond with one letter from A to D.",
        ],
    ),
    "situation_completion": (
        [
            "Pick the most plausible continuation of the scene.",
            "Choose the ending that best continues this situation.",
            "Select how the described activity most likely continues.",
        ],
        [
            "Select the ending that naturally follows the context.",
            "Give the number of the most sensible continuation.",
        ],
    ),
    "commonsense_reasoning": (
        [
            "Fill in the blank using everyday common sense.",
            "Decide which option the pronoun in the sentence refers to.",
            "Resolve the ambiguous reference with ordinary reasoning.",
        ],
        [
            "Answer with option one or option two.",
            "State which of the two candidates fits the blank.",
        ],
    ),
    "math_reasoning": (
        [
            "Solve the following grade school math word problem.",
            "Work out the arithmetic problem described below.",
            "Calculate the numeric answer to this word problem.",
        ],
        [
            "Show your calculation steps and give the final number.",
            "Reason step by step and finish with the numeric result.",
        ],
    ),
    "summarization": (
        [
            "Summarize the following news article.",
            "Write a concise summary of the report below.",
            "Condense the article that follows into its key points.",
        ],
        [
            "Keep the summary to a few short sentences.",
            "Mention only the main facts in your summary.",
        ],
    ),
}

TOPICS: List[Tuple[List[str], List[str]]] = [
    (
        ["bank", "cash", "loan", "stock", "tax", "fund", "bond", "debt", "cost", "trade"],
        [
            "investment",
            "economy",
            "inflation",
            "currency",
            "portfolio",
            "dividend",
            "economics",
            "liability",
            "commodity",
            "valuation",
        ],
    ),
    (
        ["cell", "gene", "plant", "seed", "root", "leaf", "fish", "bird", "germ", "blood"],
        [
            "organism",
            "photosynthesis",
            "biology",
            "molecular",
            "ecosystem",
            "evolution",
            "chromosome",
            "bacteria",
            "metabolism",
            "laboratory",
        ],
    ),
    (
        ["ball", "goal", "team", "coach", "race", "game", "match", "kick", "run", "win"],
        [
            "tournament",
            "championship",
            "competition",
            "athletic",
            "marathon",
            "spectator",
            "federation",
            "olympic",
            "victory",
            "professional",
        ],
    ),
]


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    task: str
    task_index: int
    topic: int
    complexity_bin: int
    flesch: float

    @property
    def cell(self) -> Tuple[int, int, int]:
        """Ground-truth (task, topic, complexity bin) the oracle is keyed on."""
        return (self.task_index, self.topic, self.complexity_bin)


class QueryStream(BaseModel):
    horizon: int = Field(2500, ge=1)
    task_labels: List[str] = Field(default_factory=lambda: list(TASK_LABELS))
    task_mix: Optional[List[float]] = None
    n_topics: int = Field(3, ge=1, le=len(TOPICS))
    n_bins: int = Field(3, ge=1)
    body_words: int = Field(40, ge=5)
    max_attempts: int = Field(25, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_mix(self):
        unknown = set(self.task_labels) - set(INSTRUCTIONS)
        if unknown:
            raise ValueError(f"no templates for tasks {sorted(unknown)}")
        if self.task_mix is not None:
            if len(self.task_mix) != len(self.task_labels) or min(self.task_mix) < 0:
                raise ValueError("task_mix must give one nonnegative weight per task")
            if sum(self.task_mix) <= 0:
                raise ValueError("task_mix must not be all zero")
        return self

    def mix(self) -> np.ndarray:
        weights = np.ones(len(self.task_labels)) if self.task_mix is None else np.array(self.task_mix)
        return weights / weights.sum()


class QueryGenerator:
    """Composes prompts for a target (task, topic, complexity bin)."""

    def __init__(self, stream: QueryStream):
        self.stream = stream
        self.binner = ComplexityBinner(stream.n_bins)

    def _style(self, target_bin: int) -> Tuple[int, float]:
        # Low bins are hard to read: long sentences, many polysyllables
        ease = (target_bin + 0.5) / self.stream.n_bins
        sentence_len = int(round(22 - 17 * ease))
        p_long = max(0.0, 0.8 - 0.9 * ease)
        return sentence_len, p_long

    def compose(self, task: str, topic: int, target_bin: int, rng) -> str:
        first, second = INSTRUCTIONS[task]
        short, long = TOPICS[topic]
        sentence_len, p_long = self._style(target_bin)
        n_sentences = max(2, self.stream.body_words // sentence_len)
        sentences = []
        for _ in range(n_sentences):
            words = []
            for _ in range(sentence_len):
                vocab = long if rng.random() < p_long else short
                words.append(vocab[rng.integers(len(vocab))])
            sentences.append(" ".join(words).capitalize() + ".")
        return "\n".join(
            [first[rng.integers(len(first))], second[rng.integers(len(second))], " ".join(sentences)]
        )

    def make(self, query_id: str, task_index: int, topic: int, target_bin: int, rng) -> Query:
        task = self.stream.task_labels[task_index]
        text, flesch = "", None
        for _ in range(self.stream.max_attempts):
            text = self.compose(task, topic, target_bin, rng)
            flesch = flesch_breakdown(text)
            if self.binner.bin(flesch.score) == target_bin:
                break
        return Query(
            query_id=query_id,
            text=text,
            task=task,
            task_index=task_index,
            topic=topic,
            complexity_bin=self.binner.bin(flesch.score),
            flesch=flesch.score,
        )


def generate_queries(stream: QueryStream, prefix: str = "q") -> List[Query]:
    """Deterministic given the stream's seed."""
    rng = np.random.default_rng(stream.seed)
    generator = QueryGenerator(stream)
    mix = stream.mix()
    queries = []
    for t in range(stream.horizon):
        task_index = int(rng.choice(len(mix), p=mix))
        topic = int(rng.integers(stream.n_topics))
        target_bin = int(rng.integers(stream.n_bins))
        queries.append(generator.make(f"{prefix}{t}", task_index, topic, target_bin, rng))
    return queries


def build_training_pairs(
    provider: EmbeddingProvider,
    task_labels: Optional[List[str]] = None,
    per_task: int = 40,
    seed: int = 0,
) -> List[Tuple[EmbeddingVector, str]]:
    """Labelled instruction embeddings for bootstrapping the task classifier."""
    labels = list(task_labels or TASK_LABELS)
    stream = QueryStream(horizon=1, task_labels=labels, seed=seed)
    generator = QueryGenerator(stream)
    rng = np.random.default_rng(seed + 7919)
    pairs = []
    for task_index, label in enumerate(labels):
        for i in range(per_task):
            topic = int(rng.integers(stream.n_topics))
            target_bin = int(rng.integers(stream.n_bins))
            text = generator.compose(label, topic, target_bin, rng)
            pairs.append((provider.embed(extract_instruction(text)), label))
    return pairs
