"""Mid-term episodic memory.

Sessions group related pages and carry one of three organizing structures
(chronological list, entity graph, topic hierarchy) which decides how their
pages are scored at retrieval time.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Callable, Sequence, Union

import numpy as np

from .bmm import GateDecision
from .core import EngineConfig, Page, StructureKind, cosine, decay
from .extraction import Extractor


@dataclass
class LinearIndex:
    page_ids: list[str] = field(default_factory=list)

    kind = StructureKind.LINEAR

    def add(self, page: Page, extractor: Extractor, lookup: dict[str, Page], cfg: EngineConfig) -> None:
        key = lambda pid: (lookup[pid].timestamp, pid)  # noqa: E731
        bisect.insort(self.page_ids, page.id, key=key)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "page_ids": list(self.page_ids)}


@dataclass
class Edge:
    count: int = 0
    labels: set[str] = field(default_factory=set)


@dataclass
class GraphIndex:
    """Entity nodes (entity -> page ids) and undirected co-occurrence edges."""

    nodes: dict[str, list[str]] = field(default_factory=dict)
    edges: dict[tuple[str, str], Edge] = field(default_factory=dict)
    page_entities: dict[str, list[str]] = field(default_factory=dict)

    kind = StructureKind.GRAPH

    def add(self, page: Page, extractor: Extractor, lookup: dict[str, Page], cfg: EngineConfig) -> None:
        ents = extractor.extract_entities(page.text)
        self.page_entities[page.id] = ents
        for e in ents:
            self.nodes.setdefault(e, []).append(page.id)
        for a, b in combinations(ents, 2):
            self.edges.setdefault((a, b), Edge()).count += 1
        for head, rel, tail in extractor.extract_relations(page.text):
            if head in self.nodes and tail in self.nodes and head != tail:
                key = (min(head, tail), max(head, tail))
                self.edges.setdefault(key, Edge()).labels.add(rel)

    def neighbors(self, entity: str) -> set[str]:
        out = set()
        for a, b in self.edges:
            if a == entity:
                out.add(b)
            elif b == entity:
                out.add(a)
        return out

    def expand(self, entities: Sequence[str]) -> set[str]:
        expanded = set(entities)
        for e in entities:
            if e in self.nodes:
                expanded |= self.neighbors(e)
        return expanded

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "nodes": {e: list(ids) for e, ids in sorted(self.nodes.items())},
            "edges": [[a, b, e.count, sorted(e.labels)] for (a, b), e in sorted(self.edges.items())],
        }


@dataclass
class Topic:
    label: str
    embedding: np.ndarray
    members: list[str]
    total: np.ndarray = field(repr=False)


@dataclass
class HierIndex:
    """Greedy topic clusters: a page joins the closest centroid above a threshold."""

    topics: list[Topic] = field(default_factory=list)

    kind = StructureKind.HIERARCHICAL

    def add(self, page: Page, extractor: Extractor, lookup: dict[str, Page], cfg: EngineConfig) -> None:
        best, best_sim = None, -math.inf
        for i, t in enumerate(self.topics):
            sim = cosine(page.embedding, t.embedding)
            if sim > best_sim:
                best, best_sim = i, sim
        if best is None or best_sim < cfg.hier_join_threshold:
            topic = Topic("", np.zeros_like(page.embedding), [], np.zeros_like(page.embedding))
            self.topics.append(topic)
        else:
            topic = self.topics[best]
        topic.members.append(page.id)
        topic.total = topic.total + page.embedding
        norm = np.linalg.norm(topic.total)
        topic.embedding = topic.total / norm if norm > 0 else topic.total.copy()
        topic.label = extractor.topic_label([lookup[m] for m in topic.members[-cfg.summary_window:]])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "topics": [{"label": t.label, "members": list(t.members),
                        "embedding": [float(v) for v in t.embedding]} for t in self.topics],
        }


StructureIndex = Union[LinearIndex, GraphIndex, HierIndex]
_INDEX_TYPES = {c.kind: c for c in (LinearIndex, GraphIndex, HierIndex)}


def build_structure_index(
    pages: Sequence[Page], kind: StructureKind, extractor: Extractor,
    config: EngineConfig | None = None,
) -> StructureIndex:
    if not pages:
        raise ValueError("cannot index an empty session")
    cfg = config or EngineConfig()
    lookup = {p.id: p for p in pages}
    index = _INDEX_TYPES[StructureKind(kind)]()
    for p in pages:
        index.add(p, extractor, lookup, cfg)
    return index


def index_from_dict(d: dict, pages: Sequence[Page]) -> StructureIndex:
    kind = StructureKind(d["kind"])
    if kind is StructureKind.LINEAR:
        return LinearIndex(list(d["page_ids"]))
    if kind is StructureKind.GRAPH:
        nodes = {e: list(ids) for e, ids in d["nodes"].items()}
        edges = {(a, b): Edge(c, set(labels)) for a, b, c, labels in d["edges"]}
        page_entities: dict[str, list[str]] = {}
        for e in sorted(nodes):
            for pid in nodes[e]:
                page_entities.setdefault(pid, []).append(e)
        return GraphIndex(nodes, edges, page_entities)
    lookup = {p.id: p for p in pages}
    topics = []
    for t in d["topics"]:
        total = np.zeros(len(t["embedding"]))
        for m in t["members"]:
            total = total + lookup[m].embedding
        topics.append(Topic(t["label"], np.asarray(t["embedding"], float), list(t["members"]), total))
    return HierIndex(topics)


@dataclass
class EpisodicSession:
    id: str
    pages: list[Page]
    summary: str
    summary_embedding: np.ndarray
    kind: StructureKind
    index: StructureIndex
    access_count: int = 0
    created_at: int = 0
    updated_at: int = 0
    since_selection: int = 0
    consolidated_size: int = 0
    by_id: dict[str, Page] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.by_id:
            self.by_id = {p.id: p for p in self.pages}

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "summary": self.summary,
            "summary_embedding": [float(v) for v in self.summary_embedding],
            "access_count": self.access_count,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "since_selection": self.since_selection,
            "consolidated_size": self.consolidated_size,
            "pages": [p.to_dict() for p in self.pages],
            "index": self.index.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> EpisodicSession:
        pages = [Page.from_dict(p) for p in d["pages"]]
        return cls(
            id=d["id"], pages=pages, summary=d["summary"],
            summary_embedding=np.asarray(d["summary_embedding"], float),
            kind=StructureKind(d["kind"]), index=index_from_dict(d["index"], pages),
            access_count=d["access_count"], created_at=d["created_at"],
            updated_at=d["updated_at"], since_selection=d["since_selection"],
            consolidated_size=d["consolidated_size"],
        )


def utility(
    session: EpisodicSession,
    weights: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
    now: float | None = None,
    half_life: float = 7 * 86400.0,
    max_session_pages: int = 16,
) -> float:
    """Weighted access frequency, interaction intensity and recency, in [0, 1]."""
    w1, w2, w3 = weights
    c = session.access_count
    c_hat = c / (1 + c)
    intensity = min(1.0, len(session.pages) / max_session_pages)
    now = session.updated_at if now is None else now
    recency = decay(now - session.updated_at, half_life)
    return w1 * c_hat + w2 * intensity + w3 * recency


class MtemStore:
    def __init__(self, config: EngineConfig, embedder: Callable[[str], np.ndarray], extractor: Extractor):
        self.config = config
        self.embedder = embedder
        self.extractor = extractor
        self.sessions: dict[str, EpisodicSession] = {}
        self.next_id = 0

    def __len__(self) -> int:
        return len(self.sessions)

    def page_count(self) -> int:
        return sum(len(s.pages) for s in self.sessions.values())

    def all_pages(self) -> list[Page]:
        return [p for s in self.sessions.values() for p in s.pages]

    def utility(self, session: EpisodicSession, now: float) -> float:
        c = self.config
        return utility(session, c.utility_weights, now, c.half_life, c.max_session_pages)

    def utilities(self, now: float) -> list[float]:
        """Utility of every session in insertion order, computed in one pass."""
        c = self.config
        w1, w2, w3 = c.utility_weights
        ss = list(self.sessions.values())
        acc = np.fromiter((s.access_count for s in ss), float, len(ss))
        size = np.fromiter((len(s.pages) for s in ss), float, len(ss))
        dt = np.maximum(now - np.fromiter((s.updated_at for s in ss), float, len(ss)), 0.0)
        u = (w1 * (acc / (1 + acc)) + w2 * np.minimum(1.0, size / c.max_session_pages)
             + w3 * np.exp(-dt / c.half_life))
        return u.tolist()

    def _summarize(self, session: EpisodicSession) -> None:
        window = session.pages[-self.config.summary_window:]
        session.summary = self.extractor.summarize(window)
        session.summary_embedding = np.asarray(self.embedder(session.summary), float)

    def candidates(self) -> list[EpisodicSession]:
        ranked = sorted(self.sessions.values(), key=lambda s: (-s.updated_at, s.id))
        return ranked[:self.config.candidate_cap]

    def integrate(
        self,
        incoming: Sequence[Page],
        choose_structure: Callable[[Sequence[Page]], StructureKind],
        decide: Callable[[Sequence[float]], GateDecision],
    ) -> list[tuple[GateDecision, StructureKind | None]]:
        """Gate each page into an existing session or open a new one.

        Returns one ``(decision, selected_structure)`` pair per page; the
        structure is ``None`` when no selection ran for that page.
        """
        results = []
        for page in incoming:
            cands = self.candidates()
            if cands:
                mat = np.stack([s.summary_embedding for s in cands])
                norms = np.linalg.norm(mat, axis=1) * np.linalg.norm(page.embedding)
                dots = mat @ page.embedding
                scores = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
            else:
                scores = np.zeros(0)
            decision = decide([float(v) for v in scores])
            if decision.merge and decision.target is not None:
                session = cands[decision.target]
                selected = self._append(session, page, choose_structure)
            else:
                session = self._open(page, choose_structure)
                selected = session.kind
            results.append((replace(decision, session_id=session.id), selected))
        return results

    def _open(self, page: Page, choose_structure) -> EpisodicSession:
        sid = f"s{self.next_id:06d}"
        self.next_id += 1
        page = replace(page, continuity_link=None)
        kind = StructureKind(choose_structure([page]))
        session = EpisodicSession(
            id=sid, pages=[page], summary="", summary_embedding=np.zeros_like(page.embedding),
            kind=kind, index=build_structure_index([page], kind, self.extractor, self.config),
            created_at=page.timestamp, updated_at=page.timestamp,
        )
        self._summarize(session)
        self.sessions[sid] = session
        return session

    def _append(self, session: EpisodicSession, page: Page, choose_structure) -> StructureKind | None:
        page = replace(page, continuity_link=session.pages[-1].id)
        session.pages.append(page)
        session.by_id[page.id] = page
        session.updated_at = max(session.updated_at, page.timestamp)
        session.since_selection += 1
        self._summarize(session)
        selected = None
        if session.since_selection >= self.config.reselect_every:
            session.since_selection = 0
            window = session.pages[-self.config.feature_window:]
            selected = StructureKind(choose_structure(window))
            if selected is not session.kind:
                session.kind = selected
                session.index = build_structure_index(session.pages, selected, self.extractor, self.config)
                return selected
        session.index.add(page, self.extractor, session.by_id, self.config)
        return selected

    def rebuild(self, session: EpisodicSession, kind: StructureKind | None = None) -> None:
        if kind is not None:
            session.kind = StructureKind(kind)
        session.index = build_structure_index(session.pages, session.kind, self.extractor, self.config)

    def retrieve(
        self,
        query_embedding: np.ndarray,
        query_entities: Sequence[str],
        k: int,
        now: float,
    ) -> list[tuple[Page, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        scored: list[tuple[Page, float]] = []
        for session in self.sessions.values():
            scored.extend(self._score_session(session, query_embedding, query_entities, now))
        scored.sort(key=lambda ps: (-ps[1], -ps[0].timestamp, ps[0].id))
        return scored[:k]

    def _score_session(self, session, q, query_entities, now) -> list[tuple[Page, float]]:
        cfg = self.config
        kind = session.kind
        if kind is StructureKind.LINEAR:
            return [(p, cosine(q, p.embedding) * decay(now - p.timestamp, cfg.half_life))
                    for p in session.pages]
        if kind is StructureKind.GRAPH:
            index: GraphIndex = session.index
            expanded = index.expand(sorted(set(query_entities)))
            out = []
            for p in session.pages:
                sim = cosine(q, p.embedding)
                touched = expanded.intersection(index.page_entities.get(p.id, ()))
                if touched:
                    sim = 0.5 * sim + 0.5 * len(touched) / max(1, len(expanded))
                out.append((p, sim))
            return out
        index: HierIndex = session.index
        ranked = sorted(range(len(index.topics)),
                        key=lambda i: (-cosine(q, index.topics[i].embedding), i))
        keep = {m for i in ranked[:cfg.hier_top_topics] for m in index.topics[i].members}
        return [(p, cosine(q, p.embedding)) for p in session.pages if p.id in keep]

    def mark_accessed(self, page_ids: Sequence[str]) -> None:
        wanted = set(page_ids)
        for s in self.sessions.values():
            if any(p.id in wanted for p in s.pages):
                s.access_count += 1

    def prune(self, capacity: int, now: float
              ) -> tuple[list[EpisodicSession], list[tuple[EpisodicSession, list[Page]]]]:
        """Drop lowest-utility sessions above capacity; report consolidation candidates.

        Candidates are ``(session, pages not yet consolidated)`` for sessions
        whose utility clears the consolidation threshold. A candidate is
        marked with its current size so only later pages are offered again.
        """
        util = dict(zip(self.sessions, self.utilities(now)))
        removed: list[EpisodicSession] = []
        overflow = len(self.sessions) - capacity
        if overflow > 0:
            order = sorted(self.sessions.values(), key=lambda s: (util[s.id], s.updated_at, s.id))
            removed = order[:overflow]
            for s in removed:
                del self.sessions[s.id]
        thr = self.config.consolidation_threshold
        candidates = [(s, s.pages[s.consolidated_size:]) for s in removed
                      if util[s.id] >= thr and s.consolidated_size < len(s.pages)]
        for s in self.sessions.values():
            if util[s.id] >= thr and s.consolidated_size < len(s.pages):
                candidates.append((s, s.pages[s.consolidated_size:]))
                s.consolidated_size = len(s.pages)
        return removed, candidates

    def to_dict(self) -> dict:
        return {"next_id": self.next_id, "sessions": [s.to_dict() for s in self.sessions.values()]}

    def load_dict(self, d: dict) -> None:
        self.next_id = d["next_id"]
        self.sessions = {}
        for sd in d["sessions"]:
            s = EpisodicSession.from_dict(sd)
            self.sessions[s.id] = s
