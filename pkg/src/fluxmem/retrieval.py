"""Hybrid retrieval across the three memory layers and answer generation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Hashable, Iterable, Protocol, Sequence

import numpy as np

from .core import EngineConfig, FluxMemError, Page, ProviderError, cosine, tokenize
from .extraction import ChatClient, Extractor, content_tokens, load_prompt, split_sentences
from .ltsm import LtsmEntry, LtsmStore
from .stim import StimBuffer

if TYPE_CHECKING:
    from .mtem import MtemStore

ABSTAIN = "I don't have enough information in memory to answer that."


class Bm25Index:
    """Okapi BM25 over pre-tokenized documents.

    The idf term uses add-half smoothing on the corpus size,
    ``ln(1 + (N - df + 1) / (df + 0.5))``, which stays positive for terms
    present in every document.
    """

    def __init__(self, documents: dict[str, Sequence[str]] | None = None,
                 k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.documents: dict[str, Counter] = {}
        self.lengths: dict[str, int] = {}
        self.document_frequencies: Counter = Counter()
        for doc_id, tokens in (documents or {}).items():
            self.add(doc_id, tokens)

    def add(self, doc_id: str, tokens: Sequence[str]) -> None:
        if doc_id in self.documents:
            raise ValueError(f"duplicate document id {doc_id!r}")
        tf = Counter(tokens)
        self.documents[doc_id] = tf
        self.lengths[doc_id] = len(tokens)
        self.document_frequencies.update(tf.keys())

    @property
    def N(self) -> int:  # noqa: N802
        return len(self.documents)

    @property
    def avg_doc_length(self) -> float:
        return sum(self.lengths.values()) / self.N if self.N else 0.0

    def idf(self, term: str) -> float:
        df = self.document_frequencies.get(term, 0)
        return math.log(1 + (self.N - df + 1) / (df + 0.5))

    def score(self, doc_id: str, query_tokens: Sequence[str]) -> float:
        tf = self.documents[doc_id]
        avg = self.avg_doc_length or 1.0
        norm = self.k1 * (1 - self.b + self.b * self.lengths[doc_id] / avg)
        total = 0.0
        for term in query_tokens:
            f = tf.get(term, 0)
            if f:
                total += self.idf(term) * f * (self.k1 + 1) / (f + norm)
        return total


def bm25_rank(index: Bm25Index, query_tokens: Sequence[str], k: int) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = [(d, index.score(d, query_tokens)) for d in index.documents]
    scored = [(d, s) for d, s in scored if s > 0]
    scored.sort(key=lambda ds: (-ds[1], ds[0]))
    return scored[:k]


def dense_rank(items: Iterable[tuple[str, np.ndarray]], query_embedding: np.ndarray,
               k: int) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = [(i, cosine(query_embedding, e)) for i, e in items]
    scored.sort(key=lambda s: (-s[1], s[0]))
    return scored[:k]


def rrf(rankings: Sequence[Sequence[Hashable]], k_rrf: int = 60) -> list[tuple[Hashable, float]]:
    """Reciprocal rank fusion: sum of 1 / (k_rrf + rank), ranks from 1."""
    if k_rrf < 1:
        raise ValueError("k_rrf must be >= 1")
    parts: dict = {}
    for ranking in rankings:
        for rank, doc in enumerate(ranking, start=1):
            parts.setdefault(doc, []).append(1.0 / (k_rrf + rank))
    # fsum is exactly rounded, so the result does not depend on ranking order
    scores = {doc: math.fsum(v) for doc, v in parts.items()}
    return sorted(scores.items(), key=lambda ds: (-ds[1], ds[0]))


def _clean(text: str) -> str:
    return " ".join(text.split())


def render_context(query: str, stim_pages: Sequence[Page],
                   mtem_hits: Sequence[tuple[Page, float]],
                   ltsm_hits: Sequence[tuple[LtsmEntry, float]]) -> str:
    lines: list[str] = []

    def page_line(p: Page) -> str:
        return f"{p.timestamp}\tUSER: {_clean(p.user_text)}\tAGENT: {_clean(p.agent_text)}"

    if stim_pages:
        lines.append("[RECENT]")
        lines.extend(page_line(p) for p in stim_pages)
    if mtem_hits:
        lines.append("[EPISODIC]")
        lines.extend(page_line(p) for p, _ in mtem_hits)
    if ltsm_hits:
        lines.append("[SEMANTIC]")
        lines.extend(f"{e.kind.value}: {_clean(e.content)}" for e, _ in ltsm_hits)
    lines.append(f"[QUERY] {_clean(query)}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FusedContext:
    query: str
    stim_pages: tuple[Page, ...]
    mtem_hits: tuple[tuple[Page, float], ...]
    ltsm_hits: tuple[tuple[LtsmEntry, float], ...]
    rendered: str = field(default="")

    def render(self) -> str:
        return render_context(self.query, self.stim_pages, self.mtem_hits, self.ltsm_hits)

    def page_ids(self) -> list[str]:
        return [p.id for p in self.stim_pages] + [p.id for p, _ in self.mtem_hits]

    def sentences(self) -> list[str]:
        """Candidate answer sentences in rendered order."""
        out: list[str] = []
        for p in list(self.stim_pages) + [p for p, _ in self.mtem_hits]:
            out.extend(split_sentences(p.user_text))
            out.extend(split_sentences(p.agent_text))
        for e, _ in self.ltsm_hits:
            out.extend(split_sentences(e.content))
        return out

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "stim": [p.id for p in self.stim_pages],
            "mtem": [{"page_id": p.id, "score": s} for p, s in self.mtem_hits],
            "ltsm": [{"entry_id": e.id, "kind": e.kind.value, "content": e.content, "score": s}
                     for e, s in self.ltsm_hits],
            "rendered": self.rendered,
        }


def fuse_context(
    query: str,
    stim: StimBuffer,
    mtem: MtemStore,
    ltsm: LtsmStore,
    extractor: Extractor,
    config: EngineConfig,
    query_embedding: np.ndarray,
    now: int,
) -> FusedContext:
    """Assemble recent pages, fused episodic hits and semantic entries for a query."""
    k = config.top_k
    stim_pages = tuple(stim.contents())

    pages = {p.id: p for p in mtem.all_pages()}
    mtem_hits: tuple[tuple[Page, float], ...] = ()
    if pages:
        index = Bm25Index({pid: tokenize(p.text) for pid, p in pages.items()})
        lexical = [d for d, _ in bm25_rank(index, tokenize(query), k)]
        entities = extractor.extract_entities(query)
        structural = [p.id for p, _ in mtem.retrieve(query_embedding, entities, k, now)]
        fused = rrf([lexical, structural], config.rrf_k)[:k]
        mtem_hits = tuple((pages[d], s) for d, s in fused)
        mtem.mark_accessed([p.id for p, _ in mtem_hits])

    ltsm.refresh(now)
    ltsm_hits = tuple(ltsm.retrieve(query_embedding, k, now)) if len(ltsm) else ()
    rendered = render_context(query, stim_pages, mtem_hits, ltsm_hits)
    return FusedContext(query, stim_pages, mtem_hits, ltsm_hits, rendered)


class Responder(Protocol):
    def __call__(self, query: str, context: FusedContext,
                 choices: Sequence[str] | None = None) -> str: ...


def _overlap(a: Iterable[str], b: set[str]) -> int:
    return len(set(a) & b)


class ExtractiveResponder:
    """Deterministic responder: returns the context sentence sharing most content tokens.

    With ``choices`` it returns the choice with the largest overlap against
    the whole fused context. Ties go to the earliest candidate.
    """

    def __call__(self, query: str, context: FusedContext,
                 choices: Sequence[str] | None = None) -> str:
        if choices:
            ctx = set(content_tokens(context.rendered or context.render()))
            best = max(range(len(choices)),
                       key=lambda i: (_overlap(content_tokens(choices[i]), ctx), -i))
            return choices[best]
        q = set(content_tokens(query))
        best_sentence, best_score = None, 0
        for sentence in context.sentences():
            score = _overlap(content_tokens(sentence), q)
            if score > best_score:
                best_sentence, best_score = sentence, score
        return best_sentence if best_sentence is not None else ABSTAIN


class ResponderError(ProviderError):
    def __init__(self, message: str, rendered_context: str):
        super().__init__(message)
        self.rendered_context = rendered_context


class LlmResponder:
    def __init__(self, client: ChatClient):
        self.client = client

    def __call__(self, query: str, context: FusedContext,
                 choices: Sequence[str] | None = None) -> str:
        options = ""
        if choices:
            options = "Options:\n" + "\n".join(f"({chr(97 + i)}) {c}" for i, c in enumerate(choices)) + "\n"
        prompt = load_prompt("response").format(context=context.rendered, query=query, choices=options)
        try:
            return self.client.complete(prompt).strip()
        except FluxMemError as exc:
            raise ResponderError(f"{exc}\n--- rendered context ---\n{context.rendered}",
                                 context.rendered) from exc


def answer(query: str, context: FusedContext, responder: Responder | Callable,
           choices: Sequence[str] | None = None) -> str:
    return responder(query, context, choices)
