"""Memory-structure selection: conversation features and a small MLP classifier."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import STRUCTURES, Page, StructureKind, tokenize
from .extraction import CONDITIONAL_CUES, RELATION_CUES, Extractor

FEATURE_NAMES = (
    "page_count", "avg_page_length", "entity_density", "relation_indicators",
    "topic_diversity", "topic_transitions", "is_qna_pattern", "is_decision_tree",
    "is_entity_centric", "time_span", "temporal_density", "semantic_complexity",
)
N_FEATURES = len(FEATURE_NAMES)
N_CLASSES = len(STRUCTURES)
MODEL_FORMAT = "fluxmem.selector/v1"

QNA_FRACTION = 0.7
DECISION_RUN = 3
ENTITY_CENTRIC_FRACTION = 0.5


def _unit_rows(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    m = np.array(embeddings, dtype=float)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def count_topics(embeddings: Sequence[np.ndarray], threshold: float = 0.5) -> int:
    """Number of clusters from greedy centroid assignment (same rule as the topic index)."""
    totals: list[np.ndarray] = []
    units = np.zeros((0, 0))
    for e in _unit_rows(embeddings):
        if totals:
            sims = np.clip(units @ e, -1.0, 1.0) if e.any() else np.zeros(len(totals))
            best = int(np.argmax(sims))
        if not totals or sims[best] < threshold:
            totals.append(e.copy())
        else:
            totals[best] = totals[best] + e
        units = _unit_rows(totals)
    return len(totals)


def extract_features(window: Sequence[Page], extractor: Extractor,
                     join_threshold: float = 0.5) -> np.ndarray:
    if not window:
        raise ValueError("feature window must contain at least one page")
    n = len(window)
    tokens = [tokenize(p.text) for p in window]
    entities = [extractor.extract_entities(p.text) for p in window]

    cue_counts = [sum(t in RELATION_CUES for t in toks) for toks in tokens]
    embs = [p.embedding for p in window]
    units = _unit_rows(embs)
    gram = np.clip(units @ units.T, -1.0, 1.0)
    transitions = int(np.sum(np.diagonal(gram, 1) < join_threshold))

    user_turns = [p.user_text.strip() for p in window]
    qna = sum(u.endswith("?") for u in user_turns) / n >= QNA_FRACTION
    run = best_run = 0
    for u in user_turns:
        run = run + 1 if set(tokenize(u)) & set(CONDITIONAL_CUES) else 0
        best_run = max(best_run, run)

    page_hits = Counter(e for ents in entities for e in set(ents))
    centric = bool(page_hits) and max(page_hits.values()) / n >= ENTITY_CENTRIC_FRACTION

    stamps = [p.timestamp for p in window]
    span_hours = (max(stamps) - min(stamps)) / 3600.0
    upper = gram[np.triu_indices(n, 1)]
    complexity = float(np.mean(1 - upper)) if upper.size else 0.0

    return np.array([
        n,
        float(np.mean([len(t) for t in tokens])),
        float(np.mean([len(e) for e in entities])),
        float(np.mean(cue_counts)),
        count_topics(embs, join_threshold),
        transitions / max(1, n - 1),
        float(qna),
        float(best_run >= DECISION_RUN),
        float(centric),
        span_hours,
        n / max(span_hours, 1 / 60),
        complexity,
    ], dtype=float)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: dict[str, np.ndarray], X: np.ndarray) -> tuple[np.ndarray, dict]:
    """Probabilities for already-standardized inputs; second item caches activations."""
    z1 = X @ params["W1"].T + params["b1"]
    h = np.maximum(z1, 0.0)
    logits = h @ params["W2"].T + params["b2"]
    return _softmax(logits), {"X": X, "z1": z1, "h": h}


def loss_and_grad(params: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray
                  ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy and its gradient w.r.t. every parameter."""
    probs, cache = forward(params, X)
    n = X.shape[0]
    loss = -float(np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = {
        "W2": dlogits.T @ cache["h"],
        "b2": dlogits.sum(axis=0),
    }
    dh = dlogits @ params["W2"]
    dz1 = dh * (cache["z1"] > 0)
    grads["W1"] = dz1.T @ cache["X"]
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def _encode_labels(y) -> np.ndarray:
    out = []
    for v in y:
        if isinstance(v, (StructureKind, str)) and not str(v).isdigit():
            out.append(STRUCTURES.index(StructureKind(v)))
        else:
            out.append(int(v))
    arr = np.asarray(out, dtype=int)
    if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
        raise ValueError("labels must index one of the three structures")
    return arr


class StructureSelector(ClassifierMixin, BaseEstimator):
    """12 -> hidden -> 3 ReLU MLP with built-in feature standardization.

    Trained by mini-batch Adam on mean cross-entropy, with early stopping on a
    seeded held-out split. Labels are structure indices (0 linear, 1 graph,
    2 hierarchical) or :class:`StructureKind` values.
    """

    def __init__(self, hidden: int = 4, epochs: int = 200, learning_rate: float = 1e-2,
                 batch_size: int = 16, patience: int = 20, validation_fraction: float = 0.1,
                 random_state: int = 42):
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    @property
    def params_(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1_, "b1": self.b1_, "W2": self.W2_, "b2": self.b2_}

    def _set_params(self, p: dict[str, np.ndarray]) -> None:
        self.W1_, self.b1_, self.W2_, self.b2_ = (p[k].copy() for k in ("W1", "b1", "W2", "b2"))

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {
            "W1": rng.uniform(-0.5, 0.5, (self.hidden, N_FEATURES)),
            "b1": rng.uniform(-0.5, 0.5, self.hidden),
            "W2": rng.uniform(-0.5, 0.5, (N_CLASSES, self.hidden)),
            "b2": rng.uniform(-0.5, 0.5, N_CLASSES),
        }

    def fit(self, X, y) -> StructureSelector:
        X, y = check_X_y(X, _encode_labels(y), dtype=float)
        if X.shape[1] != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {X.shape[1]}")
        self.classes_ = np.arange(N_CLASSES)
        self.n_features_in_ = N_FEATURES
        rng = np.random.default_rng(self.random_state)

        self.scaler_mean_ = X.mean(axis=0)
        self.scaler_std_ = np.maximum(X.std(axis=0), 1e-8)
        Xs = (X - self.scaler_mean_) / self.scaler_std_

        n = X.shape[0]
        n_val = int(n * self.validation_fraction) if n >= 10 else 0
        perm = rng.permutation(n)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        Xt, yt = Xs[train_idx], y[train_idx]
        Xv, yv = (Xs[val_idx], y[val_idx]) if n_val else (Xt, yt)

        params = self.init_params(rng)
        m = {k: np.zeros_like(v) for k, v in params.items()}
        v = {k: np.zeros_like(v) for k, v in params.items()}
        b1, b2, eps = 0.9, 0.999, 1e-8
        step = 0
        best_loss, best_params, stale = math.inf, {k: p.copy() for k, p in params.items()}, 0
        self.loss_curve_: list[float] = []
        self.validation_curve_: list[float] = []

        for _ in range(self.epochs):
            order = rng.permutation(len(train_idx))
            for start in range(0, len(order), self.batch_size):
                batch = order[start:start + self.batch_size]
                _, grads = loss_and_grad(params, Xt[batch], yt[batch])
                step += 1
                for k in params:
                    m[k] = b1 * m[k] + (1 - b1) * grads[k]
                    v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
                    mhat = m[k] / (1 - b1 ** step)
                    vhat = v[k] / (1 - b2 ** step)
                    params[k] = params[k] - self.learning_rate * mhat / (np.sqrt(vhat) + eps)
            self.loss_curve_.append(loss_and_grad(params, Xt, yt)[0])
            val_loss = loss_and_grad(params, Xv, yv)[0]
            self.validation_curve_.append(val_loss)
            if val_loss < best_loss - 1e-12:
                best_loss, stale = val_loss, 0
                best_params = {k: p.copy() for k, p in params.items()}
            else:
                stale += 1
                if stale >= self.patience:
                    break
        self.n_epochs_ = len(self.loss_curve_)
        self._set_params(best_params)
        # final metrics at the restored parameters
        self.train_loss_ = loss_and_grad(best_params, Xt, yt)[0]
        self.validation_loss_ = loss_and_grad(best_params, Xv, yv)[0]
        self.train_accuracy_ = float(np.mean(forward(best_params, Xt)[0].argmax(1) == yt))
        self.validation_accuracy_ = float(np.mean(forward(best_params, Xv)[0].argmax(1) == yv))
        return self

    def _standardize(self, X) -> np.ndarray:
        check_is_fitted(self, "W1_")
        X = check_array(np.atleast_2d(np.asarray(X, dtype=float)))
        if X.shape[1] != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {X.shape[1]}")
        return (X - self.scaler_mean_) / self.scaler_std_

    def predict_proba(self, X) -> np.ndarray:
        return forward(self.params_, self._standardize(X))[0]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def select(self, features, allowed: Iterable[StructureKind] | None = None) -> StructureKind:
        return select_structure(self, features, allowed)

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "W1_")
        return {
            "format": MODEL_FORMAT,
            "input_dim": N_FEATURES,
            "hidden": int(self.W1_.shape[0]),
            "output_dim": N_CLASSES,
            "feature_names": list(FEATURE_NAMES),
            "classes": [s.value for s in STRUCTURES],
            "W1": [float(x) for x in self.W1_.ravel()],
            "b1": [float(x) for x in self.b1_],
            "W2": [float(x) for x in self.W2_.ravel()],
            "b2": [float(x) for x in self.b2_],
            "scaler_mean": [float(x) for x in self.scaler_mean_],
            "scaler_std": [float(x) for x in self.scaler_std_],
        }

    @classmethod
    def from_dict(cls, d: dict) -> StructureSelector:
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        h = int(d["hidden"])
        if d["input_dim"] != N_FEATURES or d["output_dim"] != N_CLASSES:
            raise ValueError("model dimensions do not match 12 inputs / 3 outputs")
        shapes = {"W1": (h, N_FEATURES), "b1": (h,), "W2": (N_CLASSES, h), "b2": (N_CLASSES,),
                  "scaler_mean": (N_FEATURES,), "scaler_std": (N_FEATURES,)}
        arrays = {}
        for key, shape in shapes.items():
            flat = np.asarray(d[key], dtype=float)
            if flat.size != int(np.prod(shape)):
                raise ValueError(f"{key}: expected {int(np.prod(shape))} values, got {flat.size}")
            arrays[key] = flat.reshape(shape)
        if np.any(arrays["scaler_std"] <= 0):
            raise ValueError("scaler_std must be strictly positive")
        model = cls(hidden=h)
        model._set_params(arrays)
        model.scaler_mean_ = arrays["scaler_mean"]
        model.scaler_std_ = arrays["scaler_std"]
        model.classes_ = np.arange(N_CLASSES)
        model.n_features_in_ = N_FEATURES
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> StructureSelector:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def select_structure(model: StructureSelector, features,
                     allowed: Iterable[StructureKind] | None = None) -> StructureKind:
    """Argmax structure; ties resolve linear < graph < hierarchical."""
    probs = model.predict_proba(features)[0]
    allowed_set = set(STRUCTURES if allowed is None else (StructureKind(a) for a in allowed))
    best = max((i for i, s in enumerate(STRUCTURES) if s in allowed_set),
               key=lambda i: (probs[i], -i))
    return STRUCTURES[best]


def compute_reward(judge_score: float, mem_score: float,
                   lambda_q: float = 0.7, lambda_m: float = 0.3) -> float:
    if lambda_q < 0 or lambda_m < 0:
        raise ValueError("reward weights must be non-negative")
    return lambda_q * judge_score + lambda_m * mem_score


def argmax_label(rewards: Sequence[float]) -> StructureKind:
    best = max(range(N_CLASSES), key=lambda i: (rewards[i], -i))
    return STRUCTURES[best]


@dataclass(frozen=True)
class LabeledExample:
    features: tuple[float, ...]
    label: StructureKind
    rewards: tuple[float, float, float]
    case_id: str = ""

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "features": list(self.features),
                "label": self.label.value, "rewards": list(self.rewards)}

    @classmethod
    def from_dict(cls, d: dict) -> LabeledExample:
        feats = tuple(float(x) for x in d["features"])
        if len(feats) != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {len(feats)}")
        return cls(feats, StructureKind(d["label"]), tuple(float(r) for r in d["rewards"]),
                   d.get("case_id", ""))


def label_dataset(
    conversations: Sequence,
    pipeline: Callable[[object, StructureKind], tuple[float, float]],
    featurize: Callable[[object], np.ndarray],
    lambda_q: float = 0.7,
    lambda_m: float = 0.3,
) -> list[LabeledExample]:
    """Label each conversation with its reward-optimal structure.

    ``pipeline(conv, kind)`` runs the agent with every session forced to
    ``kind`` and returns ``(judge_score, mem_score)``. ``featurize`` may
    return one feature vector or a 2-D array; every row becomes an example
    sharing the conversation's label.
    """
    out = []
    for conv in conversations:
        feats = np.atleast_2d(np.asarray(featurize(conv), dtype=float))
        rewards = tuple(compute_reward(*pipeline(conv, kind), lambda_q, lambda_m)
                        for kind in STRUCTURES)
        label = argmax_label(rewards)
        for row in feats:
            out.append(LabeledExample(tuple(float(f) for f in row), label, rewards,
                                      getattr(conv, "id", "")))
    return out


def train(dataset: Sequence[LabeledExample], epochs: int = 200, learning_rate: float = 1e-2,
          batch_size: int = 16, seed: int = 42, **kwargs) -> StructureSelector:
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    X = np.array([ex.features for ex in dataset], dtype=float)
    y = np.array([STRUCTURES.index(ex.label) for ex in dataset])
    model = StructureSelector(epochs=epochs, learning_rate=learning_rate,
                              batch_size=batch_size, random_state=seed, **kwargs)
    return model.fit(X, y)


def read_examples(path: str | Path) -> list[LabeledExample]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(LabeledExample.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_examples(path: str | Path, examples: Iterable[LabeledExample]) -> None:
    Path(path).write_text("".join(json.dumps(ex.to_dict()) + "\n" for ex in examples),
                          encoding="utf-8")
