"""Evaluation metrics, benchmark ingestion and the replay / ablation harness."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import EngineConfig, FluxMemError, StructureKind, tokenize

REPORT_SCHEMA = "fluxmem.eval-report/v1"
CASE_SCHEMA = "fluxmem.case/v1"
MODES = ("full", "fixed-linear", "fixed-graph", "fixed-hier", "no-bmm",
         "ablate-linear", "ablate-graph", "ablate-hier")
METRICS = ("f1", "bleu1", "rouge1_f1", "rouge2_f1", "rougel_f1", "accuracy", "mem_reward")


def _prf(overlap: int, n_cand: int, n_ref: int) -> tuple[float, float, float]:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0, 0.0, 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return p, r, 2 * p * r / (p + r)


def token_f1(prediction: str, gold: str) -> float:
    pred, ref = tokenize(prediction), tokenize(gold)
    if not pred and not ref:
        return 1.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    return _prf(overlap, len(pred), len(ref))[2]


def bleu1(candidate: str, reference: str) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand:
        return 0.0
    clipped = sum((Counter(cand) & Counter(ref)).values())
    p1 = clipped / len(cand)
    c, r = len(cand), len(ref)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * p1


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int = 1) -> tuple[float, float, float]:
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    c, r = _ngrams(tokenize(candidate), n), _ngrams(tokenize(reference), n)
    overlap = sum((c & r).values())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> tuple[float, float, float]:
    c, r = tokenize(candidate), tokenize(reference)
    return _prf(lcs_length(c, r), len(c), len(r))


def _norm(s: str) -> str:
    return s.strip().lower()


def accuracy(predictions: Sequence[str], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds")
    if not predictions:
        raise ValueError("accuracy needs at least one prediction")
    return sum(_norm(p) == _norm(g) for p, g in zip(predictions, golds)) / len(golds)


def mem_reward(retrieved_page_ids: Iterable[str], gold_evidence_ids: Iterable[str]) -> float:
    gold = set(gold_evidence_ids)
    if not gold:
        return 0.0
    return len(gold & set(retrieved_page_ids)) / len(gold)


# -- benchmark cases -------------------------------------------------------

class CaseFormatError(FluxMemError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str
    timestamp: int


@dataclass(frozen=True)
class BenchmarkCase:
    """One conversation plus one question about it.

    Pages are formed by pairing consecutive turns inside each session and
    are numbered ``p000000, p000001, ...`` across the whole conversation;
    ``gold_evidence_ids`` refer to those ids.
    """

    id: str
    conversation: tuple[tuple[Turn, ...], ...]
    question: str
    gold_answer: str
    gold_evidence_ids: tuple[str, ...] = ()
    category: str = "default"
    choices: tuple[str, ...] | None = None

    def pages(self) -> list[tuple[str, str, str, int]]:
        """``(page_id, user_text, agent_text, timestamp)`` in ingestion order."""
        out = []
        for session in self.conversation:
            for i in range(0, len(session), 2):
                first = session[i]
                second = session[i + 1].text if i + 1 < len(session) else ""
                out.append((f"p{len(out):06d}", first.text, second, first.timestamp))
        return out

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "conversation": [[[t.speaker, t.text, t.timestamp] for t in s] for s in self.conversation],
            "question": self.question,
            "gold_answer": self.gold_answer,
            "gold_evidence_ids": list(self.gold_evidence_ids),
            "category": self.category,
        }
        if self.choices is not None:
            d["choices"] = list(self.choices)
        return d

    @classmethod
    def from_dict(cls, d: dict, line: int | None = None) -> BenchmarkCase:
        def need(key, typ):
            if key not in d:
                raise CaseFormatError(f"missing field {key!r}", line)
            if not isinstance(d[key], typ):
                raise CaseFormatError(f"field {key!r} must be {typ.__name__}", line)
            return d[key]

        if not isinstance(d, dict):
            raise CaseFormatError("case must be a JSON object", line)
        sessions = []
        for si, session in enumerate(need("conversation", list)):
            if not isinstance(session, list):
                raise CaseFormatError(f"conversation[{si}] must be a list of turns", line)
            turns = []
            for ti, turn in enumerate(session):
                where = f"conversation[{si}][{ti}]"
                if not (isinstance(turn, list) and len(turn) == 3):
                    raise CaseFormatError(f"{where} must be [speaker, text, timestamp]", line)
                speaker, text, ts = turn
                if not isinstance(text, str) or not isinstance(ts, int) or isinstance(ts, bool):
                    raise CaseFormatError(f"{where} needs string text and integer timestamp", line)
                if turns and ts < turns[-1].timestamp:
                    raise CaseFormatError(f"{where}: timestamps decrease within a session", line)
                turns.append(Turn(str(speaker), text, ts))
            sessions.append(tuple(turns))
        choices = d.get("choices")
        if choices is not None and not (isinstance(choices, list) and all(isinstance(c, str) for c in choices)):
            raise CaseFormatError("field 'choices' must be a list of strings", line)
        evidence = d.get("gold_evidence_ids", [])
        if not isinstance(evidence, list):
            raise CaseFormatError("field 'gold_evidence_ids' must be list", line)
        return cls(
            id=str(need("id", str)),
            conversation=tuple(sessions),
            question=need("question", str),
            gold_answer=need("gold_answer", str),
            gold_evidence_ids=tuple(str(e) for e in evidence),
            category=str(d.get("category", "default")),
            choices=tuple(choices) if choices is not None else None,
        )


def load_cases(path: str | Path) -> list[BenchmarkCase]:
    cases = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CaseFormatError(f"invalid JSON ({exc.msg}, column {exc.colno})", lineno) from exc
        cases.append(BenchmarkCase.from_dict(d, lineno))
    return cases


def write_cases(path: str | Path, cases: Iterable[BenchmarkCase]) -> None:
    Path(path).write_text("".join(json.dumps(c.to_dict(), sort_keys=True) + "\n" for c in cases),
                          encoding="utf-8")


# -- reports ---------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    seed: int
    config_fingerprint: str
    rows: list[dict] = field(default_factory=list)

    @staticmethod
    def _mean(rows: list[dict], metric: str) -> float | None:
        vals = [r[metric] for r in rows if r.get(metric) is not None]
        return sum(vals) / len(vals) if vals else None

    def categories(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for cat in sorted({r["category"] for r in self.rows}):
            rows = [r for r in self.rows if r["category"] == cat]
            out[cat] = {"n": len(rows), **{m: self._mean(rows, m) for m in METRICS},
                        "bertscore": None}
        return out

    def overall(self) -> dict:
        return {"n": len(self.rows), **{m: self._mean(self.rows, m) for m in METRICS},
                "bertscore": None}

    def mean(self, metric: str) -> float | None:
        return self._mean(self.rows, metric)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "mode": self.mode,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "overall": self.overall(),
            "categories": self.categories(),
            "cases": sorted(self.rows, key=lambda r: r["case_id"]),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def table(self) -> str:
        cols = ("n", "f1", "bleu1", "rougel_f1", "accuracy", "mem_reward")
        head = f"{'category':<16}" + "".join(f"{c:>12}" for c in cols)
        lines = [head, "-" * len(head)]

        def fmt(v):
            if v is None:
                return f"{'-':>12}"
            return f"{v:>12d}" if isinstance(v, int) else f"{v:>12.4f}"

        for cat, stats in list(self.categories().items()) + [("overall", self.overall())]:
            lines.append(f"{cat:<16}" + "".join(fmt(stats[c]) for c in cols))
        return "\n".join(lines)


def score_case(case: BenchmarkCase, answer: str, retrieved: Sequence[str]) -> dict:
    row = {
        "case_id": case.id,
        "category": case.category,
        "answer": answer,
        "f1": token_f1(answer, case.gold_answer),
        "bleu1": bleu1(answer, case.gold_answer),
        "rouge1_f1": rouge_n(answer, case.gold_answer, 1)[2],
        "rouge2_f1": rouge_n(answer, case.gold_answer, 2)[2],
        "rougel_f1": rouge_l(answer, case.gold_answer)[2],
        "accuracy": accuracy([answer], [case.gold_answer]) if case.choices else None,
        "mem_reward": mem_reward(retrieved, case.gold_evidence_ids) if case.gold_evidence_ids else None,
        "error": None,
    }
    return row


def run_case(case: BenchmarkCase, engine) -> tuple[str, list[str]]:
    """Ingest ``case`` into a fresh ``engine`` and answer its question."""
    for pid, user, agent, ts in case.pages():
        engine.observe(user, agent, ts, page_id=pid)
    answer, context, _ = engine.ask(case.question, case.choices)
    return answer, context.page_ids()


def engine_factory(mode: str = "full", config: EngineConfig | None = None, selector=None,
                   responder=None, embedder=None, extractor=None) -> Callable[[], object]:
    from .engine import Engine, Policy

    policy = Policy.from_mode(mode)

    def make():
        return Engine(config, embedder, extractor, responder, selector=selector, policy=policy)

    return make


def replay(cases: Sequence[BenchmarkCase], mode: str = "full", config: EngineConfig | None = None,
           factory: Callable[[], object] | None = None, selector=None, responder=None) -> EvalReport:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    config = config or EngineConfig()
    make = factory or engine_factory(mode, config, selector, responder)
    report = EvalReport(mode=mode, seed=config.seed, config_fingerprint=config.fingerprint())
    for case in cases:
        try:
            answer, retrieved = run_case(case, make())
            report.rows.append(score_case(case, answer, retrieved))
        except FluxMemError as exc:
            report.rows.append({"case_id": case.id, "category": case.category, "answer": None,
                                **{m: None for m in METRICS}, "rouge1_f1": None,
                                "error": f"{type(exc).__name__}: {exc}"})
    return report


def sweep(cases: Sequence[BenchmarkCase], grid: dict[str, Sequence], mode: str = "full",
          config: EngineConfig | None = None, selector=None, metric: str = "mem_reward"
          ) -> list[tuple[dict, float | None]]:
    """Replay once per grid point (one config key varied at a time)."""
    base = config or EngineConfig()
    out = []
    for key, values in grid.items():
        for v in values:
            cfg = base.with_overrides({key: str(v)})
            out.append(({key: v}, replay(cases, mode, cfg, selector=selector).mean(metric)))
    return out


def structure_pipeline(config: EngineConfig | None = None):
    """``(case, kind) -> (judge_score, mem_score)`` with every session forced to ``kind``."""
    from .engine import Engine, Policy

    def run(case: BenchmarkCase, kind) -> tuple[float, float]:
        engine = Engine(config, policy=Policy(forced=kind), use_default_selector=False)
        answer, retrieved = run_case(case, engine)
        return token_f1(answer, case.gold_answer), mem_reward(retrieved, case.gold_evidence_ids)

    return run


def case_features(case: BenchmarkCase, config: EngineConfig | None = None):
    """Selector features over the last feature-window pages of a case."""
    from .core import HashEmbedder, make_page
    from .extraction import RuleExtractor
    from .selector import extract_features

    cfg = config or EngineConfig()
    emb = HashEmbedder(cfg.embedding_dim)
    pages = [make_page(u, a, ts, emb, page_id=pid) for pid, u, a, ts in case.pages()]
    return extract_features(pages[-cfg.feature_window:], RuleExtractor(), cfg.hier_join_threshold)


def session_features(case: BenchmarkCase, config: EngineConfig | None = None) -> np.ndarray:
    """Features of every window the engine hands the selector while replaying ``case``.

    These are the windows seen at inference time (one page at session
    creation, then the session's recent pages at each reselection), so a
    selector trained on them matches what it is asked in deployment.
    """
    from .engine import Engine, Policy
    from .selector import extract_features

    engine = Engine(config, policy=Policy(forced=StructureKind.LINEAR), use_default_selector=False)
    rows = []

    def record(window):
        rows.append(extract_features(window, engine.extractor, engine.config.hier_join_threshold))
        return StructureKind.LINEAR

    engine.choose_structure = record
    for pid, user, agent, ts in case.pages():
        engine.observe(user, agent, ts, page_id=pid)
    return np.array(rows) if rows else np.atleast_2d(case_features(case, config))


def label_cases(cases: Sequence[BenchmarkCase], config: EngineConfig | None = None,
                windows: str = "session"):
    """Label cases by their reward-optimal structure.

    ``windows="session"`` emits one example per selector window seen during
    replay; ``"case"`` emits one example per case over its last pages.
    """
    from .selector import label_dataset

    cfg = config or EngineConfig()
    lq, lm = cfg.reward_weights
    featurize = {"session": session_features, "case": case_features}[windows]
    return label_dataset(cases, structure_pipeline(cfg), lambda c: featurize(c, cfg), lq, lm)
