import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluxmem.core import HashEmbedder, ProviderError, make_page
from fluxmem.extraction import (
    STOPWORDS, ChatClient, LlmExtractor, MalformedResponseError, RuleExtractor, load_prompt,
    parse_json_reply, prompt_version,
)

EMB = HashEmbedder(64)
RX = RuleExtractor()


def pages(*texts):
    return [make_page(t, "", i, EMB, page_id=f"p{i}") for i, t in enumerate(texts)]


def test_entity_examples():
    assert RX.extract_entities("I met Alice in Paris") == ["alice", "paris"]
    assert RX.extract_entities("") == []
    assert RX.extract_entities("the cat sat") == []


def test_multiword_entities_and_sentence_initial_stopwords():
    assert RX.extract_entities("The New York office hired Maria Lopez.") == ["maria lopez", "new york"]


def test_relation_examples():
    assert RX.extract_relations("Alice visited Bob") == [("alice", "related_to", "bob")]
    assert RX.extract_relations("Alice slept.") == []
    assert RX.extract_relations("Alice slept. Bob ran.") == []


@given(st.lists(st.sampled_from(["Alice", "Bob", "met", "the", "Paris", "and", ".", "Kyoto"]),
                max_size=12))
def test_relation_endpoints_are_entities(words):
    text = " ".join(words)
    ents = set(RX.extract_entities(text))
    for h, _, t in RX.extract_relations(text):
        assert h in ents and t in ents
    assert RX.extract_entities(text) == sorted(ents)


def test_summarize_examples():
    s = RX.summarize(pages("I love hiking."))
    assert s.startswith("I love hiking.")
    assert RX.summarize(pages("I love hiking.")) == s
    with pytest.raises(ValueError):
        RX.summarize([])


def test_topic_label_examples():
    assert RX.topic_label(pages("hiking is great", "more hiking today")) == "hiking"
    assert RX.topic_label(pages("it is what it is")) == "general"
    assert RX.topic_label(pages("dog cat")) == "cat"
    with pytest.raises(ValueError):
        RX.topic_label([])


def test_rule_facts():
    facts = RX.extract_facts([make_page("I like green tea. The sky is blue.",
                                        "You like green tea a lot.", 0, EMB)])
    assert [(f.kind, f.content, f.confidence) for f in facts] == [
        ("user_profile", "I like green tea.", 1.0), ("user_fact", "You like green tea a lot.", 0.5)]


def test_stopword_list_fixed():
    assert len(STOPWORDS) == 50 and {"the", "my", "you"} <= STOPWORDS


def test_prompts_load():
    for name in ("entity_relation", "facts", "hierarchy", "meta_info", "procedural", "response"):
        assert load_prompt(name).strip()
        assert prompt_version(name)
    assert "{text}" in load_prompt("entity_relation")


class FakeClient:
    def __init__(self, *replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        return self.replies.pop(0)


def test_llm_extractor_parses_replies():
    reply = json.dumps({"entities": ["Alice", "Bob"],
                        "relations": [["Alice", "knows", "Bob"], ["Alice", "likes", "Zed"]]})
    ex = LlmExtractor(FakeClient(reply, "```json\n" + reply + "\n```"))
    assert ex.extract_entities("Alice and Bob") == ["alice", "bob"]
    assert ex.extract_relations("Alice and Bob") == [("alice", "knows", "bob")]


def test_llm_extractor_topic_and_facts():
    client = FakeClient('{"topic": ""}', '{"facts": [{"kind": "user_fact", "content": "x", '
                        '"confidence": 3}]}', '{"strategies": ["ask first"]}')
    ex = LlmExtractor(client)
    assert ex.topic_label(pages("a")) == "general"
    facts = ex.extract_facts(pages("a"))
    assert [(f.kind, f.confidence) for f in facts] == [("user_fact", 1.0), ("strategy", 0.5)]


def test_malformed_reply_carries_payload():
    with pytest.raises(MalformedResponseError) as info:
        LlmExtractor(FakeClient("no json here")).extract_entities("x")
    assert info.value.raw == "no json here"
    with pytest.raises(MalformedResponseError):
        parse_json_reply('{"other": 1}', "entities")


def test_unreachable_endpoint():
    with pytest.raises(ProviderError):
        ChatClient("http://127.0.0.1:9", None, "m", timeout=2).complete("hi")
