import numpy as np
import pytest
from hypothesis import settings

from fluxmem.core import EngineConfig, HashEmbedder, make_page
from fluxmem.extraction import RuleExtractor

settings.register_profile("repo", derandomize=True, deadline=None, max_examples=60)
settings.load_profile("repo")


@pytest.fixture
def embedder():
    return HashEmbedder(384)


@pytest.fixture
def extractor():
    return RuleExtractor()


@pytest.fixture
def config():
    return EngineConfig()


@pytest.fixture
def page_factory(embedder):
    counter = iter(range(10**6))

    def make(user="hello there", agent="hi", ts=None, pid=None, emb=None):
        i = next(counter)
        p = make_page(user, agent, i if ts is None else ts, embedder,
                      page_id=pid or f"p{i:06d}")
        if emb is not None:
            object.__setattr__(p, "embedding", np.asarray(emb, float))
        return p

    return make
