"""Shared domain types, configuration, tokenization and embedding providers."""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import urllib.error
import urllib.request
import uuid
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Any, Callable, Protocol, Sequence

import numpy as np

HASH_SEED = 0x9E3779B97F4A7C15
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class FluxMemError(Exception):
    """Base class for library errors."""


class ProviderError(FluxMemError):
    """An external provider (embedding, LLM) could not be reached or failed."""


class StructureKind(str, Enum):
    LINEAR = "linear"
    GRAPH = "graph"
    HIERARCHICAL = "hierarchical"


# Canonical order; also the tie-break order everywhere a structure is argmax'd.
STRUCTURES: tuple[StructureKind, ...] = (
    StructureKind.LINEAR,
    StructureKind.GRAPH,
    StructureKind.HIERARCHICAL,
)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics, dropping empties."""
    return _TOKEN_RE.findall(text.lower())


class Embedder(Protocol):
    dim: int

    def __call__(self, text: str) -> np.ndarray: ...


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=HASH_SEED.to_bytes(8, "little")
    ).digest()
    return int.from_bytes(digest, "little") % dim


class HashEmbedder:
    """Deterministic bag-of-tokens embedder.

    Each token is hashed (keyed blake2b, fixed 64-bit seed) into one of
    ``dim`` buckets; counts are L2-normalized. Token order is irrelevant and
    outputs are bit-identical across processes and platforms.
    """

    def __init__(self, dim: int = 384):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._cache: dict[str, int] = {}

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in tokenize(text):
            b = self._cache.get(tok)
            if b is None:
                b = self._cache[tok] = _bucket(tok, self.dim)
            vec[b] += 1.0
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec


class HttpEmbedder:
    """Embeddings from an HTTP endpoint (OpenAI-compatible ``/embeddings`` shape).

    The endpoint is POSTed ``{"input": text}``; the response must carry either
    ``data[0].embedding`` or a top-level ``embedding`` list.
    """

    def __init__(self, url: str, key: str | None = None, dim: int = 384, timeout: float = 30.0):
        self.url = url
        self.key = key
        self.dim = dim
        self.timeout = timeout

    def __call__(self, text: str) -> np.ndarray:
        if not tokenize(text):
            return np.zeros(self.dim)
        body = json.dumps({"input": text}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST")
        req.add_header("Content-Type", "application/json")
        if self.key:
            req.add_header("Authorization", f"Bearer {self.key}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise ProviderError(f"embedding provider unreachable at {self.url}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ProviderError(f"embedding provider returned invalid JSON: {exc}") from exc
        if "data" in payload:
            raw = payload["data"][0]["embedding"]
        else:
            raw = payload.get("embedding")
        if raw is None:
            raise ProviderError("embedding response has no embedding field")
        vec = np.asarray(raw, dtype=float)
        if vec.shape != (self.dim,):
            raise ProviderError(f"expected embedding of dim {self.dim}, got {vec.shape}")
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


def embedder_from_env(dim: int = 384) -> Embedder:
    url = os.environ.get("FLUXMEM_EMBED_URL")
    if url:
        return HttpEmbedder(url, os.environ.get("FLUXMEM_EMBED_KEY"), dim=dim)
    return HashEmbedder(dim)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class Page:
    """One user/agent exchange."""

    id: str
    user_text: str
    agent_text: str
    timestamp: int
    embedding: np.ndarray = field(compare=False, repr=False)
    last_access: int = 0
    continuity_link: str | None = None

    @property
    def text(self) -> str:
        return f"{self.user_text} {self.agent_text}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "user_text": self.user_text,
            "agent_text": self.agent_text,
            "timestamp": self.timestamp,
            "last_access": self.last_access,
            "continuity_link": self.continuity_link,
            "embedding": [float(v) for v in self.embedding],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Page:
        return cls(
            id=d["id"],
            user_text=d["user_text"],
            agent_text=d["agent_text"],
            timestamp=int(d["timestamp"]),
            embedding=_frozen(np.asarray(d["embedding"], dtype=float)),
            last_access=int(d["last_access"]),
            continuity_link=d.get("continuity_link"),
        )


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def make_page(
    user_text: str,
    agent_text: str,
    timestamp: int,
    embedder: Callable[[str], np.ndarray],
    page_id: str | None = None,
    continuity_link: str | None = None,
) -> Page:
    if timestamp < 0:
        raise ValueError("timestamp must be non-negative")
    emb = np.array(embedder(f"{user_text} {agent_text}"), dtype=float)
    return Page(
        id=page_id if page_id is not None else uuid.uuid4().hex,
        user_text=user_text,
        agent_text=agent_text,
        timestamp=int(timestamp),
        embedding=_frozen(emb),
        last_access=int(timestamp),
        continuity_link=continuity_link,
    )


@dataclass(frozen=True)
class EngineConfig:
    """Every tunable of the engine. Defaults follow the reference setup."""

    stim_capacity: int = 4
    mtem_capacity: int = 2000
    ltsm_capacity: int = 100
    utility_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    ltsm_thresholds: tuple[float, float, float] = (0.2, 0.2, 0.0)
    bmm_threshold: float = 0.5
    bmm_min_keep: int = 1
    bmm_em_iters: int = 50
    bmm_epsilon: float = 1e-3
    bmm_tol: float = 1e-7
    new_session_floor: float = 0.15
    reward_weights: tuple[float, float] = (0.7, 0.3)
    rrf_k: int = 60
    embedding_dim: int = 384
    top_k: int = 5
    half_life: float = 7 * 86400.0
    candidate_cap: int = 64
    max_session_pages: int = 16
    hier_join_threshold: float = 0.5
    hier_top_topics: int = 2
    consolidation_threshold: float = 0.6
    summary_window: int = 8
    reselect_every: int = 8
    feature_window: int = 32
    ltsm_dedup_threshold: float = 0.9
    nobmm_threshold: float = 0.5
    seed: int = 42

    def __post_init__(self) -> None:
        for name in ("stim_capacity", "mtem_capacity", "ltsm_capacity", "bmm_min_keep",
                     "bmm_em_iters", "rrf_k", "embedding_dim", "top_k", "candidate_cap",
                     "max_session_pages", "hier_top_topics", "summary_window",
                     "reselect_every", "feature_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        w = self.utility_weights
        if len(w) != 3 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("utility_weights must be 3 non-negative reals summing to 1")
        if len(self.ltsm_thresholds) != 3 or not all(0 <= t <= 1 for t in self.ltsm_thresholds):
            raise ValueError("ltsm_thresholds must be 3 reals in [0, 1]")
        if not 0 < self.bmm_threshold < 1:
            raise ValueError("bmm_threshold must be in (0, 1)")
        if not 0 < self.bmm_epsilon < 0.1:
            raise ValueError("bmm_epsilon must be in (0, 0.1)")
        if len(self.reward_weights) != 2 or min(self.reward_weights) < 0:
            raise ValueError("reward_weights must be 2 non-negative reals")
        if self.half_life <= 0:
            raise ValueError("half_life must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EngineConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def with_overrides(self, overrides: dict[str, str]) -> EngineConfig:
        """Apply ``key=value`` string overrides (as given on a command line)."""
        current = self.to_dict()
        kw: dict[str, Any] = {}
        for key, raw in overrides.items():
            key = key.replace(".", "_")  # dotted paths map onto the flat keys
            if key not in current:
                raise ValueError(f"unknown config key: {key}")
            ref = current[key]
            if isinstance(ref, list):
                kw[key] = tuple(float(x) for x in raw.split(","))
            elif isinstance(ref, bool):
                kw[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(ref, int):
                kw[key] = int(raw)
            else:
                kw[key] = float(raw)
        return replace(self, **kw)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def decay(dt: float, half_life: float) -> float:
    """``exp(-dt / half_life)`` clipped to [0, 1] for non-negative ``dt``."""
    return math.exp(-max(dt, 0.0) / half_life)


def sorted_unique(items: Sequence[str]) -> list[str]:
    return sorted(set(items))
