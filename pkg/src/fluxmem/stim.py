"""Short-term interaction memory: a strict-capacity LRU page buffer."""

from __future__ import annotations

from dataclasses import replace

from .core import FluxMemError, Page


class DuplicatePageError(FluxMemError):
    pass


class UnknownPageError(FluxMemError, KeyError):
    pass


class StimBuffer:
    def __init__(self, capacity: int = 4):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._pages: dict[str, Page] = {}

    def __len__(self) -> int:
        return len(self._pages)

    def __contains__(self, page_id: str) -> bool:
        return page_id in self._pages

    def push(self, page: Page) -> list[Page]:
        """Insert ``page``; return the evicted least-recently-accessed pages.

        Evicted pages come back in ascending ``(last_access, id)`` order.
        """
        if page.id in self._pages:
            raise DuplicatePageError(page.id)
        self._pages[page.id] = replace(page, last_access=page.timestamp)
        overflow = len(self._pages) - self.capacity
        if overflow <= 0:
            return []
        order = sorted(self._pages.values(), key=lambda p: (p.last_access, p.id))
        evicted = order[:overflow]
        for p in evicted:
            del self._pages[p.id]
        return evicted

    def touch(self, page_id: str, timestamp: int | None = None) -> None:
        if page_id not in self._pages:
            raise UnknownPageError(page_id)
        clock = max(p.last_access for p in self._pages.values()) + 1
        if timestamp is not None:
            clock = max(int(timestamp), clock)
        self._pages[page_id] = replace(self._pages[page_id], last_access=clock)

    def contents(self) -> list[Page]:
        return sorted(self._pages.values(), key=lambda p: (p.timestamp, p.id))

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "pages": [p.to_dict() for p in self.contents()]}

    @classmethod
    def from_dict(cls, d: dict) -> StimBuffer:
        buf = cls(d["capacity"])
        for pd in d["pages"]:
            p = Page.from_dict(pd)
            buf._pages[p.id] = p
        return buf
