"""Entity, relation, topic and summary extraction.

Two providers share one interface: a deterministic rule-based extractor used
by default (and by every test), and an LLM extractor that fills the shipped
prompt templates and parses JSON replies from an OpenAI-compatible endpoint.
"""

from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Protocol, Sequence

from .core import FluxMemError, Page, ProviderError, tokenize

# Fixed 50-word list; part of the deterministic contract.
STOPWORDS = frozenset("""
a about all an and are as at be been but by do did does for from had has have
he her his i if in is it me my no not of on or our she that the their they this
to was we were what with you your
""".split())
assert len(STOPWORDS) == 50

RELATION_CUES = ("because", "than", "compared", "refers", "depends", "before", "after", "between")
CONDITIONAL_CUES = ("if", "else", "option", "choose")
PREFERENCE_WORDS = frozenset(("like", "love", "prefer", "enjoy", "hate", "favorite", "favourite"))

_WORD_RE = re.compile(r"[A-Za-z0-9]+")
_SENT_RE = re.compile(r"(?<=[.!?])\s+")


class MalformedResponseError(FluxMemError):
    def __init__(self, message: str, raw: str):
        super().__init__(f"{message}: {raw[:200]!r}")
        self.raw = raw


@dataclass(frozen=True)
class Extraction:
    entities: tuple[str, ...]
    relations: tuple[tuple[str, str, str], ...]
    topic_label: str
    summary: str


@dataclass(frozen=True)
class Fact:
    kind: str  # user_profile | user_fact | general_knowledge | strategy
    content: str
    confidence: float


class Extractor(Protocol):
    def extract_entities(self, text: str) -> list[str]: ...
    def extract_relations(self, text: str) -> list[tuple[str, str, str]]: ...
    def summarize(self, pages: Sequence[Page]) -> str: ...
    def topic_label(self, pages: Sequence[Page]) -> str: ...
    def extract_facts(self, pages: Sequence[Page]) -> list[Fact]: ...


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENT_RE.split(text.strip()) if s.strip()]


def content_tokens(text: str) -> list[str]:
    return [t for t in tokenize(text) if t not in STOPWORDS]


def _ranked_terms(pages: Sequence[Page]) -> list[tuple[str, int]]:
    counts = Counter(t for p in pages for t in content_tokens(p.text))
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


class RuleExtractor:
    """Capitalization-based entities, same-sentence relations, frequency topics."""

    def __init__(self) -> None:
        self._entity_cache: dict[str, list[str]] = {}

    def _sentence_entities(self, sentence: str) -> list[str]:
        found: list[str] = []
        run: list[str] = []
        prev_end = None
        for m in _WORD_RE.finditer(sentence):
            word = m.group()
            adjacent = prev_end is not None and sentence[prev_end:m.start()].strip() == ""
            is_cap = word[0].isupper() and word.lower() not in STOPWORDS
            if is_cap and (adjacent or not run):
                run.append(word.lower())
            else:
                if run:
                    found.append(" ".join(run))
                run = [word.lower()] if is_cap else []
            prev_end = m.end()
        if run:
            found.append(" ".join(run))
        return found

    def extract_entities(self, text: str) -> list[str]:
        cached = self._entity_cache.get(text)
        if cached is None:
            ents = {e for s in split_sentences(text) for e in self._sentence_entities(s)}
            cached = self._entity_cache[text] = sorted(ents)
        return list(cached)

    def extract_relations(self, text: str) -> list[tuple[str, str, str]]:
        triples: list[tuple[str, str, str]] = []
        for sentence in split_sentences(text):
            ents = list(dict.fromkeys(self._sentence_entities(sentence)))
            if len(ents) < 2:
                continue
            head = ents[0]
            triples.extend((head, "related_to", tail) for tail in ents[1:])
        return triples

    def summarize(self, pages: Sequence[Page]) -> str:
        if not pages:
            raise ValueError("summarize needs at least one page")
        sentences = split_sentences(pages[0].user_text)
        lead = sentences[0] if sentences else ""
        top = [t for t, _ in _ranked_terms(pages)[:3]]
        if not top:
            return lead
        keywords = "Keywords: " + ", ".join(top)
        return f"{lead} {keywords}" if lead else keywords

    def topic_label(self, pages: Sequence[Page]) -> str:
        if not pages:
            raise ValueError("topic_label needs at least one page")
        ranked = _ranked_terms(pages)
        return ranked[0][0] if ranked else "general"

    def extract_facts(self, pages: Sequence[Page]) -> list[Fact]:
        """User first-person statements (confidence 1.0) and agent restatements (0.5)."""
        facts: list[Fact] = []
        seen: set[str] = set()
        for p in pages:
            for sentence in split_sentences(p.user_text):
                toks = tokenize(sentence)
                if not toks or toks[0] not in ("i", "my", "im"):
                    continue
                kind = "user_profile" if PREFERENCE_WORDS & set(toks) else "user_fact"
                if sentence not in seen:
                    seen.add(sentence)
                    facts.append(Fact(kind, sentence, 1.0))
            for sentence in split_sentences(p.agent_text):
                toks = tokenize(sentence)
                if toks[:1] == ["you"] and len(toks) > 2 and sentence not in seen:
                    seen.add(sentence)
                    facts.append(Fact("user_fact", sentence, 0.5))
        return facts

    def extract(self, text: str, pages: Sequence[Page] = ()) -> Extraction:
        return Extraction(
            entities=tuple(self.extract_entities(text)),
            relations=tuple(self.extract_relations(text)),
            topic_label=self.topic_label(pages) if pages else "general",
            summary=self.summarize(pages) if pages else "",
        )


def load_prompt(name: str) -> str:
    """Return a shipped template body (the ``# template:`` header line stripped)."""
    raw = resources.files("fluxmem.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    lines = raw.splitlines(keepends=True)
    if lines and lines[0].startswith("# template:"):
        lines = lines[1:]
    return "".join(lines)


def prompt_version(name: str) -> str:
    raw = resources.files("fluxmem.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    first = raw.splitlines()[0]
    return first.split("template:", 1)[1].strip()


def render_pages(pages: Sequence[Page]) -> str:
    return "\n".join(f"[{p.timestamp}] USER: {p.user_text}\nAGENT: {p.agent_text}" for p in pages)


class ChatClient:
    """Minimal OpenAI-compatible chat-completions client (temperature 0)."""

    def __init__(self, base_url: str, key: str | None, model: str, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.key = key
        self.model = model
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        body = json.dumps({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        }).encode("utf-8")
        req = urllib.request.Request(f"{self.base_url}/chat/completions", data=body, method="POST")
        req.add_header("Content-Type", "application/json")
        if self.key:
            req.add_header("Authorization", f"Bearer {self.key}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise ProviderError(f"LLM provider unreachable at {self.base_url}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ProviderError(f"LLM provider returned invalid JSON: {exc}") from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected chat-completions payload: {payload!r}") from exc


def chat_client_from_env() -> ChatClient | None:
    url = os.environ.get("FLUXMEM_LLM_BASE_URL")
    if not url:
        return None
    return ChatClient(url, os.environ.get("FLUXMEM_LLM_KEY"),
                      os.environ.get("FLUXMEM_LLM_MODEL", "gpt-4.1"))


def parse_json_reply(raw: str, key: str):
    text = raw.strip()
    if text.startswith("```"):
        text = text.strip("`")
        text = text[text.find("{"):]
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise MalformedResponseError("no JSON object in reply", raw)
    try:
        obj = json.loads(text[start:end + 1])
    except json.JSONDecodeError as exc:
        raise MalformedResponseError(f"invalid JSON ({exc.msg})", raw) from exc
    if key not in obj:
        raise MalformedResponseError(f"reply lacks key {key!r}", raw)
    return obj[key]


class LlmExtractor:
    """Extractor backed by an LLM and the shipped prompt templates."""

    def __init__(self, client: ChatClient):
        self.client = client

    def _call(self, template: str, key: str, **fields):
        return parse_json_reply(self.client.complete(load_prompt(template).format(**fields)), key)

    def extract_entities(self, text: str) -> list[str]:
        ents = self._call("entity_relation", "entities", text=text)
        if not isinstance(ents, list):
            raise MalformedResponseError("entities must be a list", json.dumps(ents))
        return sorted({str(e).lower().strip() for e in ents if str(e).strip()})

    def extract_relations(self, text: str) -> list[tuple[str, str, str]]:
        raw = self.client.complete(load_prompt("entity_relation").format(text=text))
        ents = {str(e).lower().strip() for e in parse_json_reply(raw, "entities")}
        out = []
        for triple in parse_json_reply(raw, "relations"):
            if not isinstance(triple, list) or len(triple) != 3:
                raise MalformedResponseError("relation must be a 3-item list", raw)
            h, r, t = (str(v).lower().strip() for v in triple)
            if h in ents and t in ents:
                out.append((h, r, t))
        return out

    def summarize(self, pages: Sequence[Page]) -> str:
        if not pages:
            raise ValueError("summarize needs at least one page")
        return str(self._call("meta_info", "summary", pages=render_pages(pages)))

    def topic_label(self, pages: Sequence[Page]) -> str:
        if not pages:
            raise ValueError("topic_label needs at least one page")
        label = str(self._call("hierarchy", "topic", pages=render_pages(pages))).strip()
        return label or "general"

    def extract_facts(self, pages: Sequence[Page]) -> list[Fact]:
        rendered = render_pages(pages)
        facts = []
        for item in self._call("facts", "facts", pages=rendered):
            try:
                facts.append(Fact(str(item["kind"]), str(item["content"]),
                                  float(min(1.0, max(0.0, item.get("confidence", 0.5))))))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedResponseError("bad fact item", json.dumps(item)) from exc
        for s in self._call("procedural", "strategies", pages=rendered):
            facts.append(Fact("strategy", str(s), 0.5))
        return [f for f in facts if f.content.strip()]


def extractor_from_env() -> Extractor:
    client = chat_client_from_env()
    return LlmExtractor(client) if client else RuleExtractor()
