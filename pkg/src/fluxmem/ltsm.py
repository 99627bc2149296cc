"""Long-term semantic memory: consolidated facts with eligibility-based pruning."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .core import Page, cosine, decay
from .extraction import Extractor
from .mtem import EpisodicSession


class EntryKind(str, Enum):
    USER_PROFILE = "user_profile"
    USER_FACT = "user_fact"
    GENERAL_KNOWLEDGE = "general_knowledge"
    STRATEGY = "strategy"


@dataclass
class LtsmEntry:
    id: str
    kind: EntryKind
    content: str
    embedding: np.ndarray
    usage: int = 0
    recency: float = 1.0
    confidence: float = 1.0
    source_session_id: str = ""
    last_used: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.id, "kind": self.kind.value, "content": self.content,
            "usage": self.usage, "recency": self.recency, "confidence": self.confidence,
            "source_session_id": self.source_session_id, "last_used": self.last_used,
            "embedding": [float(v) for v in self.embedding],
        }

    @classmethod
    def from_dict(cls, d: dict) -> LtsmEntry:
        return cls(
            id=d["id"], kind=EntryKind(d["kind"]), content=d["content"],
            embedding=np.asarray(d["embedding"], float), usage=d["usage"],
            recency=d["recency"], confidence=d["confidence"],
            source_session_id=d["source_session_id"], last_used=d["last_used"],
        )


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def usage_score(usage: int) -> float:
    return usage / (1 + usage)


def eligible(entry: LtsmEntry, tau_u: float = 0.2, tau_r: float = 0.2, tau_c: float = 0.0) -> bool:
    return (usage_score(entry.usage) >= tau_u
            and entry.recency >= tau_r
            and entry.confidence >= tau_c)


class LtsmStore:
    def __init__(self, embedder: Callable[[str], np.ndarray],
                 thresholds: Sequence[float] = (0.2, 0.2, 0.0),
                 half_life: float = 7 * 86400.0, dedup_threshold: float = 0.9):
        self.embedder = embedder
        self.thresholds = tuple(thresholds)
        self.half_life = half_life
        self.dedup_threshold = dedup_threshold
        self.entries: list[LtsmEntry] = []
        self.next_id = 0

    def __len__(self) -> int:
        return len(self.entries)

    def consolidate(self, session: EpisodicSession, extractor: Extractor, now: int = 0,
                    pages: Sequence[Page] | None = None) -> list[LtsmEntry]:
        """Turn a session's facts into entries; near-duplicates refresh existing ones.

        ``pages`` restricts extraction to part of the session (by default all
        of it). Returns the entries inserted or refreshed.
        """
        touched: list[LtsmEntry] = []
        facts = extractor.extract_facts(session.pages if pages is None else pages)
        if not facts:
            return touched
        unit = [_unit(e.embedding) for e in self.entries]
        mat = np.array(unit) if unit else None
        for fact in facts:
            emb = np.asarray(self.embedder(fact.content), float)
            dup = None
            if unit:
                if mat is None or len(mat) != len(unit):
                    mat = np.array(unit)
                sims = mat @ _unit(emb)
                hits = np.flatnonzero(sims >= self.dedup_threshold)
                dup = self.entries[hits[0]] if hits.size else None
            if dup is not None:
                dup.confidence = max(dup.confidence, fact.confidence)
                dup.recency = 1.0
                dup.last_used = max(dup.last_used, now)
                if dup not in touched:
                    touched.append(dup)
                continue
            entry = LtsmEntry(
                id=f"m{self.next_id:06d}", kind=EntryKind(fact.kind), content=fact.content,
                embedding=emb, confidence=fact.confidence, source_session_id=session.id,
                last_used=now,
            )
            self.next_id += 1
            self.entries.append(entry)
            unit.append(_unit(emb))
            touched.append(entry)
        return touched

    def refresh(self, now: int) -> None:
        for e in self.entries:
            e.recency = decay(now - e.last_used, self.half_life)

    def prune(self, capacity: int) -> list[LtsmEntry]:
        overflow = len(self.entries) - capacity
        if overflow <= 0:
            return []
        tu, tr, tc = self.thresholds
        ineligible = sorted((e for e in self.entries if not eligible(e, tu, tr, tc)),
                            key=lambda e: (e.recency, e.id))
        removed = ineligible[:overflow]
        if len(removed) < overflow:
            keep = [e for e in self.entries if e not in removed]
            keep.sort(key=lambda e: (usage_score(e.usage) + e.recency + e.confidence, e.id))
            removed += keep[:overflow - len(removed)]
        gone = {e.id for e in removed}
        self.entries = [e for e in self.entries if e.id not in gone]
        return removed

    def retrieve(self, query_embedding: np.ndarray, k: int, now: int = 0) -> list[tuple[LtsmEntry, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        scored = sorted(((e, cosine(query_embedding, e.embedding)) for e in self.entries),
                        key=lambda es: (-es[1], es[0].id))[:k]
        for e, _ in scored:
            e.usage += 1
            e.recency = 1.0
            e.last_used = max(e.last_used, now)
        return scored

    def to_dict(self) -> dict:
        return {"next_id": self.next_id, "entries": [e.to_dict() for e in self.entries]}

    def load_dict(self, d: dict) -> None:
        self.next_id = d["next_id"]
        self.entries = [LtsmEntry.from_dict(e) for e in d["entries"]]
