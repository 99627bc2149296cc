import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluxmem.core import HashEmbedder, make_page
from fluxmem.stim import DuplicatePageError, StimBuffer, UnknownPageError

EMB = HashEmbedder(32)


def page(ts, pid=None):
    return make_page(f"text {ts}", "ok", ts, EMB, page_id=pid or f"p{ts:03d}")


def test_fifth_push_evicts_oldest():
    buf = StimBuffer(4)
    out = [buf.push(page(t)) for t in range(1, 6)]
    assert out[:4] == [[], [], [], []]
    assert [p.id for p in out[4]] == ["p001"]
    assert [p.timestamp for p in buf.contents()] == [2, 3, 4, 5]


def test_touch_protects_page_from_eviction():
    buf = StimBuffer(2)
    buf.push(page(10))
    buf.push(page(20))
    buf.touch("p010", 30)
    evicted = buf.push(page(40))
    assert [p.id for p in evicted] == ["p020"]
    assert "p010" in buf


def test_touch_without_timestamp_uses_logical_clock():
    buf = StimBuffer(3)
    buf.push(page(5))
    buf.push(page(9))
    before = buf._pages["p005"].last_access
    buf.touch("p005")
    after = buf._pages["p005"].last_access
    assert after > before and after == 10


def test_touch_unknown_and_duplicate_push_raise():
    buf = StimBuffer(2)
    buf.push(page(1))
    with pytest.raises(UnknownPageError):
        buf.touch("nope")
    with pytest.raises(DuplicatePageError):
        buf.push(page(1))


def test_contents_sorted_by_timestamp():
    buf = StimBuffer(4)
    for t in (30, 10, 20):
        buf.push(page(t))
    assert [p.timestamp for p in buf.contents()] == [10, 20, 30]
    assert StimBuffer(4).contents() == []


def test_eviction_ties_broken_by_id():
    buf = StimBuffer(1)
    buf.push(page(7, "b"))
    evicted = buf.push(page(7, "a"))
    assert [p.id for p in evicted] == ["a"]


def test_round_trip():
    buf = StimBuffer(3)
    for t in (1, 2):
        buf.push(page(t))
    again = StimBuffer.from_dict(buf.to_dict())
    assert again.to_dict() == buf.to_dict()


def test_capacity_must_be_positive():
    with pytest.raises(ValueError):
        StimBuffer(0)


ops = st.lists(st.tuples(st.sampled_from(["push", "touch"]), st.integers(0, 30)), max_size=60)


@given(st.integers(1, 5), ops)
def test_random_sequences_keep_capacity_and_conserve_pages(cap, sequence):
    buf = StimBuffer(cap)
    pushed, evicted, n = [], [], 0
    for op, arg in sequence:
        if op == "push":
            p = page(n, f"q{n:04d}")
            n += 1
            pushed.append(p.id)
            out = buf.push(p)
            keys = [(e.last_access, e.id) for e in out]
            assert keys == sorted(keys)
            evicted.extend(e.id for e in out)
        elif len(buf):
            target = sorted(p.id for p in buf.contents())[arg % len(buf)]
            buf.touch(target)
        assert len(buf) <= cap
    survivors = [p.id for p in buf.contents()]
    assert sorted(survivors + evicted) == sorted(pushed)
