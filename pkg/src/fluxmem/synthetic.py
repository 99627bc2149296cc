"""Seeded synthetic conversations and feature datasets.

Three conversation patterns, each planting one evidence page that a
different memory structure is suited to surface:

* temporal: a value updated over several weeks; older statements match the
  question better lexically, only recency reveals the latest value.
* relational: the evidence names a person reachable from the questioned
  person only through an earlier page linking the two.
* topical: lexical distractors are spread over unrelated topics; the
  evidence sits in the topic closest to the question.
"""

from __future__ import annotations

import random
from typing import Callable

import numpy as np

from .core import STRUCTURES
from .evalkit import BenchmarkCase, Turn
from .selector import N_FEATURES, LabeledExample

DAY = 86400
HOUR = 3600

NAMES = ("Alice", "Bruno", "Chen", "Dana", "Emil", "Farah", "Gita", "Hugo", "Ines", "Jonas",
         "Kira", "Luca", "Mara", "Nils", "Omar", "Priya", "Quinn", "Rosa", "Sven", "Tara")
CITIES = ("Lisbon", "Oslo", "Kyoto", "Lima", "Cairo", "Quito", "Dublin", "Hanoi", "Perth", "Turin")
RELATIONS = ("sister", "brother", "cousin", "colleague", "neighbor", "mentor")
NUMBERS = ("twelve", "fifteen", "eighteen", "twenty", "thirty", "forty", "fifty", "sixty",
           "seventy", "eighty", "ninety", "hundred")
ATTRIBUTES = (("savings", "goal"), ("running", "distance"), ("reading", "target"),
              ("sleep", "budget"), ("coffee", "limit"), ("practice", "hours"))

# topical pattern: (two-word place, object pool, verb, vocabulary pool)
TOPICS = (
    ("garden shed", ("tomatoes", "basil", "roses", "mint", "lettuce"), "planted",
     ("compost", "seeds", "fence", "soil", "trowel", "mulch")),
    ("kitchen stove", ("risotto", "curry", "pancakes", "dumplings", "soup"), "cooked",
     ("garlic", "butter", "skillet", "onions", "simmer", "pepper")),
    ("garage bench", ("bicycle", "scooter", "van", "trailer", "kayak"), "repaired",
     ("wrench", "grease", "bolts", "tyres", "chain", "pliers")),
    ("studio easel", ("portrait", "sketch", "mural", "collage", "print"), "painted",
     ("oils", "charcoal", "canvas", "brushes", "palette", "varnish")),
    ("office desk", ("report", "slides", "roadmap", "memo", "spreadsheet"), "drafted",
     ("standup", "deadline", "manager", "figures", "agenda", "invoice")),
    ("library shelf", ("novel", "atlas", "poems", "biography", "essays"), "borrowed",
     ("lamps", "quiet", "catalogue", "librarian", "chapters", "bookmark")),
)
NOTE = "note"

CHATTER = (
    ("The weather was mild and quiet today.", "That sounds like a calm day."),
    ("We watched a long film last night.", "A film is a nice way to unwind."),
    ("The train was late again this morning.", "That delay is frustrating."),
    ("At lunch I had a simple sandwich at the desk.", "It happens to everyone."),
    ("The new phone battery lasts much longer.", "That is helpful."),
    ("A friend recommended a podcast about history.", "That can be fun."),
)


def _turns(pages: list[tuple[str, str, int]]) -> tuple[Turn, ...]:
    out: list[Turn] = []
    for user, agent, ts in pages:
        out.append(Turn("user", user, ts))
        out.append(Turn("agent", agent, ts))
    return tuple(out)


def _chatter(rng: random.Random, ts: int, n: int, step: int) -> list[tuple[str, str, int]]:
    out = []
    for _ in range(n):
        ts += step + rng.randrange(step // 4 + 1)
        u, a = rng.choice(CHATTER)
        out.append((u, a, ts))
    return out


def temporal_case(rng: random.Random, case_id: str, start: int = 0) -> BenchmarkCase:
    a, b = rng.choice(ATTRIBUTES)
    values = rng.sample(NUMBERS, 8)
    pages: list[tuple[str, str, int]] = []
    ts = start
    n_old = rng.randint(6, 7)
    for i in range(n_old):
        ts += 7 * DAY + rng.randrange(DAY)
        pages.append((f"My {a} {b} for this month is {values[i]}.",
                      f"You set the {a} {b} for this month to {values[i]}.", ts))
        pages.extend(_chatter(rng, ts, 1, HOUR))
        ts = pages[-1][2]
    ts += 14 * DAY + rng.randrange(DAY)
    latest = values[n_old]
    evidence_index = len(pages)
    pages.append((f"I changed the {a} {b} to {latest} today.", "It is changed.", ts))
    pages.extend(_chatter(rng, ts, rng.randint(5, 7), 2 * HOUR))
    question = f"What is my {a} {b} for this month?"
    return _case(case_id, pages, question, latest, [evidence_index], "temporal")


def relational_case(rng: random.Random, case_id: str, start: int = 0) -> BenchmarkCase:
    names = rng.sample(NAMES, 8)
    x, y = names[0], names[1]
    rel = rng.choice(RELATIONS)
    city = rng.choice(CITIES)
    others = names[2:]
    ts = start
    pages: list[tuple[str, str, int]] = []

    def add(u, a_text, gap=HOUR):
        nonlocal ts
        ts += gap + rng.randrange(gap // 4 + 1)
        pages.append((u, a_text, ts))

    for o1, o2 in zip(others[::2], others[1::2]):
        add(f"I heard that {o1} and {o2} had lunch because a project ended.",
            f"It sounds productive to meet {o1} and {o2}.")
    add(f"I heard that {y} is the {rel} of {x} because they share a surname.",
        f"It seems {y} and {x} are related.")
    add(f"I heard that {y} moved to {city} after the spring.", "That is a big move.")
    for _ in range(rng.randint(5, 6)):
        o = rng.choice(others)
        add(f"I heard that {o} wonders which city is nice to live.",
            f"It is a common question for {o}.")
    pages.extend(_chatter(rng, ts, rng.randint(4, 5), HOUR))
    question = f"In which city does the {rel} of {x} live now?"
    evidence_index = next(i for i, p in enumerate(pages) if f"{y} moved" in p[0])
    return _case(case_id, pages, question, city, [evidence_index], "relational")


def topical_case(rng: random.Random, case_id: str, start: int = 0) -> BenchmarkCase:
    topics = rng.sample(TOPICS, 6)
    place, objects, _, _ = topics[0]
    obj = rng.choice(objects)
    n_days = rng.choice(NUMBERS[:4])
    ts = start
    pages: list[tuple[str, str, int]] = []

    def note(topic, o, k=3):
        t_place, _, t_verb, vocab = topic
        return f"{NOTE}: {t_verb} {o}, {t_place}, " + " ".join(rng.sample(vocab, k))

    blocks = []
    for topic in topics:
        picks = rng.sample([o for o in topic[1] if o != obj], 3)
        blocks.append([(note(topic, o) + ".", "noted.") for o in picks])
    evidence = (note(topics[0], obj, 2) + f", rinse every {n_days} days.", "noted.")
    blocks[0].insert(1, evidence)
    for topic, block in zip(topics[1:], blocks[1:]):
        block.insert(1, (note(topic, rng.choice(topic[1]), 4) + ", how often should i clean?",
                         "noted."))
    for block in blocks:
        for u, a_text in block:
            ts += 2 * HOUR + rng.randrange(HOUR)
            pages.append((u, a_text, ts))
    pages.extend(_chatter(rng, ts, 4, HOUR))
    question = f"How often should I clean the {obj} at the {place}?"
    evidence_index = next(i for i, p in enumerate(pages) if p[0] == evidence[0])
    return _case(case_id, pages, question, f"every {n_days} days", [evidence_index], "topical")


def _case(case_id, pages, question, answer, evidence, category) -> BenchmarkCase:
    return BenchmarkCase(
        id=case_id,
        conversation=(_turns(pages),),
        question=question,
        gold_answer=answer,
        gold_evidence_ids=tuple(f"p{i:06d}" for i in evidence),
        category=category,
    )


PATTERNS: dict[str, Callable[[random.Random, str, int], BenchmarkCase]] = {
    "temporal": temporal_case,
    "relational": relational_case,
    "topical": topical_case,
}


def make_suite(n: int = 30, seed: int = 42, prefix: str = "c") -> list[BenchmarkCase]:
    """``n`` conversations cycling through the three patterns."""
    rng = random.Random(seed)
    kinds = list(PATTERNS)
    start = 1_700_000_000
    return [PATTERNS[kinds[i % 3]](rng, f"{prefix}{i:03d}", start) for i in range(n)]


def separable_dataset(n: int = 300, seed: int = 42, spread: float = 0.5) -> list[LabeledExample]:
    """Three well-separated Gaussian clusters in feature space, one per structure."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-5, 5, size=(len(STRUCTURES), N_FEATURES))
    out = []
    for i in range(n):
        k = i % len(STRUCTURES)
        x = centers[k] + rng.normal(0, spread, N_FEATURES)
        out.append(LabeledExample(tuple(float(v) for v in x), STRUCTURES[k],
                                  tuple(1.0 if j == k else 0.0 for j in range(len(STRUCTURES))),
                                  f"g{i:03d}"))
    return out
