#!/usr/bin/env python3
"""
Task Classifier
Softmax logistic regression over instruction embeddings.
Predicts the task type of a query from the first lines of its prompt.
"""

import json
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from sklearn.metrics import f1_score
from sklearn.model_selection import train_test_split

from ml_engine.embeddings import EmbeddingVector, tokenize
from ml_engine.errors import DegenerateTrainingError, InvalidInputError

logger = logging.getLogger(__name__)

INSTRUCTION_LINES = 2
INSTRUCTION_CHARS = 200


def extract_instruction(text: str) -> str:
    """
    First 2 lines that carry a token, or the first 200 characters from the
    first such line, whichever is shorter. Blank and punctuation-only lines are
    skipped; text without any token line is returned whole.
    """
    lines = [line for line in text.splitlines() if tokenize(line)]
    if not lines:
        return text
    by_lines = "\n".join(lines[:INSTRUCTION_LINES])
    start = text.find(lines[0])
    by_chars = text[start : start + INSTRUCTION_CHARS]
    if len(by_chars) < len(by_lines) and tokenize(by_chars):
        return by_chars
    return by_lines


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


class TrainingConfig(BaseModel):
    learning_rate: float = Field(0.1, gt=0)
    iterations: int = Field(500, ge=1)
    weight_decay: float = Field(1e-4, ge=0)
    validation_fraction: float = Field(0.2, gt=0, lt=1)
    seed: int = 0


def loss_and_gradient(
    W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray, weight_decay: float
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy plus (weight_decay / 2)·||W||² and its gradients."""
    n = X.shape[0]
    probs = softmax(X @ W.T + b)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300)) + 0.5 * weight_decay * np.sum(W * W)
    delta = (probs - onehot) / n
    grad_W = delta.T @ X + weight_decay * W
    grad_b = delta.sum(axis=0)
    return float(loss), grad_W, grad_b


class TaskClassifier:
    """p(label | e) = softmax(W e + b)"""

    def __init__(self, W: np.ndarray, b: np.ndarray, labels: Sequence[str]):
        W = np.asarray(W, dtype=float)
        b = np.asarray(b, dtype=float)
        if W.ndim != 2 or W.shape[0] != len(labels) or b.shape != (len(labels),):
            raise InvalidInputError(
                f"classifier shape mismatch: W{W.shape}, b{b.shape}, {len(labels)} labels"
            )
        self.W = W
        self.b = b
        self.labels = list(labels)

    @property
    def d_emb(self) -> int:
        return int(self.W.shape[1])

    def predict_proba(self, e: EmbeddingVector) -> np.ndarray:
        if e.dim != self.d_emb:
            raise InvalidInputError(f"embedding dimension {e.dim}, classifier expects {self.d_emb}")
        return softmax(self.W @ e.values + self.b)

    def classify(self, e: EmbeddingVector) -> Tuple[str, np.ndarray]:
        probs = self.predict_proba(e)
        return self.labels[int(np.argmax(probs))], probs

    def label_index(self, label: str) -> int:
        return self.labels.index(label)

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "d_emb": self.d_emb,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskClassifier":
        clf = cls(np.array(data["W"], dtype=float), np.array(data["b"], dtype=float), data["labels"])
        if clf.d_emb != int(data["d_emb"]):
            raise InvalidInputError("stored d_emb does not match W")
        return clf

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)
        logger.info(f"Task classifier saved to {path}")

    @classmethod
    def load(cls, path) -> "TaskClassifier":
        with open(path) as f:
            return cls.from_dict(json.load(f))


class TrainingReport(BaseModel):
    macro_f1: float
    train_size: int
    validation_size: int
    final_loss: float


def _fit(X, y, n_labels, config: TrainingConfig, rng) -> Tuple[np.ndarray, np.ndarray, float]:
    W = rng.normal(0.0, 0.01, size=(n_labels, X.shape[1]))
    b = np.zeros(n_labels)
    loss = float("nan")
    for _ in range(config.iterations):
        loss, grad_W, grad_b = loss_and_gradient(W, b, X, y, config.weight_decay)
        W -= config.learning_rate * grad_W
        b -= config.learning_rate * grad_b
    return W, b, loss


def train_task_classifier(
    pairs: Sequence[Tuple[EmbeddingVector, str]],
    config: Optional[TrainingConfig] = None,
    labels: Optional[List[str]] = None,
) -> Tuple[TaskClassifier, TrainingReport]:
    """
    Full-batch gradient descent on softmax cross-entropy.
    Returns the classifier fit on the training split and the macro-F1 it reaches
    on the held-out split.
    """
    config = config or TrainingConfig()
    if not pairs:
        raise DegenerateTrainingError("no training pairs")

    dims = {e.dim for e, _ in pairs}
    if len(dims) != 1:
        raise InvalidInputError(f"embeddings have mixed dimensions: {sorted(dims)}")

    present = sorted({label for _, label in pairs})
    if len(present) < 2:
        raise DegenerateTrainingError(f"need at least 2 labels, got {present}")
    labels = list(labels) if labels else present
    unknown = set(present) - set(labels)
    if unknown:
        raise InvalidInputError(f"labels not in label list: {sorted(unknown)}")

    X = np.vstack([e.values for e, _ in pairs])
    y = np.array([labels.index(label) for _, label in pairs])

    counts = np.bincount(y, minlength=len(labels))
    stratify = y if counts[counts > 0].min() >= 2 else None
    X_train, X_val, y_train, y_val = train_test_split(
        X, y, test_size=config.validation_fraction, random_state=config.seed, stratify=stratify
    )

    rng = np.random.default_rng(config.seed)
    W, b, loss = _fit(X_train, y_train, len(labels), config, rng)
    clf = TaskClassifier(W, b, labels)

    predicted = np.argmax(X_val @ W.T + b, axis=1)
    macro_f1 = float(f1_score(y_val, predicted, labels=np.unique(y_val), average="macro"))
    report = TrainingReport(
        macro_f1=macro_f1, train_size=len(y_train), validation_size=len(y_val), final_loss=loss
    )
    logger.info(
        f"Task classifier trained on {len(y_train)} pairs: "
        f"held-out macro-F1 {macro_f1:.3f}, loss {loss:.4f}"
    )
    return clf, report


def classify_task(clf: TaskClassifier, e: EmbeddingVector) -> Tuple[str, np.ndarray]:
    return clf.classify(e)
