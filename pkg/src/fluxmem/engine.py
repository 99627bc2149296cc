"""Engine facade: one conversation's memory state and its ingest/query pipeline."""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .bmm import GateDecision, decide_fusion, decide_threshold
from .core import STRUCTURES, EngineConfig, FluxMemError, HashEmbedder, Page, StructureKind, make_page
from .extraction import Extractor, RuleExtractor
from .ltsm import LtsmStore
from .mtem import MtemStore
from .retrieval import ExtractiveResponder, FusedContext, Responder, fuse_context
from .selector import StructureSelector, extract_features, select_structure
from .stim import StimBuffer

SNAPSHOT_FORMAT = "fluxmem.snapshot/v1"


class NonMonotoneTimestampError(FluxMemError, ValueError):
    pass


class SnapshotError(FluxMemError):
    pass


@lru_cache(maxsize=1)
def _shipped_selector_dict() -> dict | None:
    try:
        raw = resources.files("fluxmem.data").joinpath("selector_default.json").read_text("utf-8")
    except FileNotFoundError:
        return None
    return json.loads(raw)


def default_selector() -> StructureSelector | None:
    d = _shipped_selector_dict()
    return StructureSelector.from_dict(d) if d else None


@dataclass(frozen=True)
class Policy:
    """How sessions get their structure and how evicted pages are gated.

    ``forced`` pins every session to one structure; ``excluded`` removes
    structures from the selector's choices; ``gate`` is ``"bmm"`` or the
    fixed-cosine ``"threshold"`` gate.
    """

    forced: StructureKind | None = None
    excluded: tuple[StructureKind, ...] = ()
    gate: str = "bmm"

    def __post_init__(self):
        if self.gate not in ("bmm", "threshold"):
            raise ValueError(f"unknown gate {self.gate!r}")
        if len(set(self.excluded)) >= len(STRUCTURES):
            raise ValueError("cannot exclude every structure")

    @classmethod
    def from_mode(cls, mode: str) -> Policy:
        short = {"linear": StructureKind.LINEAR, "graph": StructureKind.GRAPH,
                 "hier": StructureKind.HIERARCHICAL}
        if mode == "full":
            return cls()
        if mode == "no-bmm":
            return cls(gate="threshold")
        kind, _, name = mode.partition("-")
        if name in short and kind == "fixed":
            return cls(forced=short[name])
        if name in short and kind == "ablate":
            return cls(excluded=(short[name],))
        raise ValueError(f"unknown mode {mode!r}")

    def to_dict(self) -> dict:
        return {"forced": self.forced.value if self.forced else None,
                "excluded": [k.value for k in self.excluded], "gate": self.gate}

    @classmethod
    def from_dict(cls, d: dict) -> Policy:
        return cls(StructureKind(d["forced"]) if d["forced"] else None,
                   tuple(StructureKind(k) for k in d["excluded"]), d["gate"])


@dataclass
class IngestionTrace:
    page_id: str
    evicted: list[str] = field(default_factory=list)
    decisions: list[GateDecision] = field(default_factory=list)
    selections: list[tuple[str, StructureKind]] = field(default_factory=list)
    consolidated: list[str] = field(default_factory=list)
    pruned_sessions: list[str] = field(default_factory=list)
    pruned_pages: int = 0
    ltsm_pruned: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "page_id": self.page_id,
            "evicted": self.evicted,
            "decisions": [d.to_dict() for d in self.decisions],
            "selections": [[sid, k.value] for sid, k in self.selections],
            "consolidated": self.consolidated,
            "pruned_sessions": self.pruned_sessions,
            "pruned_pages": self.pruned_pages,
            "ltsm_pruned": self.ltsm_pruned,
        }


@dataclass
class AskTrace:
    query_entities: list[str]
    mtem_page_ids: list[str]
    ltsm_entry_ids: list[str]
    now: int


class Engine:
    """Single-conversation memory engine.

    Pages enter the short-term buffer; evicted pages are gated into episodic
    sessions; sessions that prove useful are consolidated into long-term
    entries. ``ask`` fuses all three layers into one context and answers.
    """

    def __init__(
        self,
        config: EngineConfig | None = None,
        embedder=None,
        extractor: Extractor | None = None,
        responder: Responder | None = None,
        selector: StructureSelector | None = None,
        policy: Policy | None = None,
        use_default_selector: bool = True,
    ):
        self.config = config or EngineConfig()
        cfg = self.config
        self.embedder = embedder or HashEmbedder(cfg.embedding_dim)
        self.extractor = extractor or RuleExtractor()
        self.responder = responder or ExtractiveResponder()
        if selector is None and use_default_selector:
            selector = default_selector()
        self.selector = selector
        self.policy = policy or Policy()
        self.stim = StimBuffer(cfg.stim_capacity)
        self.mtem = MtemStore(cfg, self.embedder, self.extractor)
        self.ltsm = LtsmStore(self.embedder, cfg.ltsm_thresholds, cfg.half_life,
                              cfg.ltsm_dedup_threshold)
        self.clock = 0
        self.observed = 0
        self.pruned_pages = 0

    # -- ingestion ---------------------------------------------------------

    def choose_structure(self, window: Sequence[Page]) -> StructureKind:
        if self.policy.forced is not None:
            return self.policy.forced
        allowed = [k for k in STRUCTURES if k not in self.policy.excluded]
        if self.selector is None:
            return allowed[0]
        feats = extract_features(window, self.extractor, self.config.hier_join_threshold)
        return select_structure(self.selector, feats, allowed)

    def _decide(self, scores: Sequence[float]) -> GateDecision:
        cfg = self.config
        if self.policy.gate == "threshold":
            return decide_threshold(scores, cfg.nobmm_threshold)
        return decide_fusion(scores, cfg.bmm_threshold, cfg.bmm_min_keep, cfg.bmm_em_iters,
                             cfg.bmm_epsilon, cfg.new_session_floor, cfg.bmm_tol)

    def observe(self, user_text: str, agent_text: str, timestamp: int,
                page_id: str | None = None) -> IngestionTrace:
        if self.observed and timestamp < self.clock:
            raise NonMonotoneTimestampError(
                f"timestamp {timestamp} precedes previous timestamp {self.clock}")
        cfg = self.config
        pid = page_id if page_id is not None else f"p{self.observed:06d}"
        page = make_page(user_text, agent_text, timestamp, self.embedder, page_id=pid)
        evicted = self.stim.push(page)
        self.observed += 1
        self.clock = int(timestamp)
        trace = IngestionTrace(page_id=pid, evicted=[p.id for p in evicted])
        if not evicted:
            return trace

        for decision, selected in self.mtem.integrate(evicted, self.choose_structure, self._decide):
            trace.decisions.append(decision)
            if selected is not None:
                trace.selections.append((decision.session_id, selected))

        removed, candidates = self.mtem.prune(cfg.mtem_capacity, self.clock)
        trace.pruned_sessions = [s.id for s in removed]
        trace.pruned_pages = sum(len(s.pages) for s in removed)
        self.pruned_pages += trace.pruned_pages
        for session, fresh in candidates:
            trace.consolidated.extend(
                e.id for e in self.ltsm.consolidate(session, self.extractor, self.clock, fresh))
        if candidates:
            self.ltsm.refresh(self.clock)
            trace.ltsm_pruned = [e.id for e in self.ltsm.prune(cfg.ltsm_capacity)]
        return trace

    def check_invariants(self) -> None:
        cfg = self.config
        assert len(self.stim) <= cfg.stim_capacity
        assert len(self.mtem) <= cfg.mtem_capacity
        assert len(self.ltsm) <= cfg.ltsm_capacity
        held = len(self.stim) + self.mtem.page_count()
        assert self.observed == held + self.pruned_pages, "page conservation violated"

    # -- querying ----------------------------------------------------------

    def ask(self, query: str, choices: Sequence[str] | None = None
            ) -> tuple[str, FusedContext, AskTrace]:
        q = np.asarray(self.embedder(query), float)
        context = fuse_context(query, self.stim, self.mtem, self.ltsm, self.extractor,
                               self.config, q, self.clock)
        answer = self.responder(query, context, choices)
        trace = AskTrace(
            query_entities=self.extractor.extract_entities(query),
            mtem_page_ids=[p.id for p, _ in context.mtem_hits],
            ltsm_entry_ids=[e.id for e, _ in context.ltsm_hits],
            now=self.clock,
        )
        return answer, context, trace

    # -- inspection and persistence -----------------------------------------

    def stats(self) -> dict:
        kinds = {k.value: 0 for k in STRUCTURES}
        for s in self.mtem.sessions.values():
            kinds[s.kind.value] += 1
        return {
            "observed": self.observed,
            "stim_pages": len(self.stim),
            "mtem_sessions": len(self.mtem),
            "mtem_pages": self.mtem.page_count(),
            "pruned_pages": self.pruned_pages,
            "ltsm_entries": len(self.ltsm),
            "structures": kinds,
            "sessions": [{"id": s.id, "kind": s.kind.value, "pages": len(s.pages),
                          "access_count": s.access_count, "summary": s.summary}
                         for s in self.mtem.sessions.values()],
        }

    def to_dict(self) -> dict:
        return {
            "format_version": SNAPSHOT_FORMAT,
            # logical clock rather than wall time, so identical runs give identical files
            "created_at": self.clock,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "policy": self.policy.to_dict(),
            "clock": self.clock,
            "observed": self.observed,
            "pruned_pages": self.pruned_pages,
            "stim": self.stim.to_dict(),
            "mtem": self.mtem.to_dict(),
            "ltsm": self.ltsm.to_dict(),
            "selector": self.selector.to_dict() if self.selector is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict, embedder=None, extractor: Extractor | None = None,
                  responder: Responder | None = None) -> Engine:
        if d.get("format_version") != SNAPSHOT_FORMAT:
            raise SnapshotError(f"unsupported snapshot format {d.get('format_version')!r}")
        try:
            selector = StructureSelector.from_dict(d["selector"]) if d["selector"] else None
            engine = cls(EngineConfig.from_dict(d["config"]), embedder, extractor, responder,
                         selector=selector, policy=Policy.from_dict(d["policy"]),
                         use_default_selector=False)
            engine.clock = d["clock"]
            engine.observed = d["observed"]
            engine.pruned_pages = d["pruned_pages"]
            engine.stim = StimBuffer.from_dict(d["stim"])
            engine.mtem.load_dict(d["mtem"])
            engine.ltsm.load_dict(d["ltsm"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotError(f"corrupt snapshot: {exc}") from exc
        return engine

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path: str | Path, compress: bool | None = None) -> None:
        """Write the snapshot; gzip when ``compress`` is set or the path ends in ``.gz``."""
        path = Path(path)
        data = self.dumps().encode("utf-8")
        if compress or (compress is None and path.suffix == ".gz"):
            data = gzip.compress(data, mtime=0)
        path.write_bytes(data)

    @classmethod
    def load(cls, path: str | Path, **providers) -> Engine:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"snapshot not found: {path}")
        data = path.read_bytes()
        if data[:2] == b"\x1f\x8b":
            try:
                data = gzip.decompress(data)
            except (OSError, EOFError) as exc:
                raise SnapshotError(f"corrupt gzip snapshot: {exc}") from exc
        try:
            d = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SnapshotError(f"snapshot is not valid JSON: {exc}") from exc
        return cls.from_dict(d, **providers)
