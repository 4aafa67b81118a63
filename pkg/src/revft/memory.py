from __future__ import annotations

from dataclasses import dataclass, field

CATEGORIES = ("reversible_boundary", "vanilla_caches", "head", "other")


@dataclass
class MemoryLedger:
    """Bytes retained between forward and backward, plus the recompute high-water mark."""

    persistent_bytes: dict[str, int] = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    peak_transient_bytes: int = 0

    def add(self, category: str, nbytes: int) -> None:
        if category not in self.persistent_bytes:
            raise KeyError(f"unknown memory category {category!r}")
        self.persistent_bytes[category] += int(nbytes)

    def note_transient(self, nbytes: int) -> None:
        self.peak_transient_bytes = max(self.peak_transient_bytes, int(nbytes))

    @property
    def total_persistent(self) -> int:
        return sum(self.persistent_bytes.values())

    def to_dict(self) -> dict:
        return {
            "persistent_bytes": dict(self.persistent_bytes),
            "total_persistent_bytes": self.total_persistent,
            "peak_transient_bytes": self.peak_transient_bytes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MemoryLedger":
        return cls(dict(data["persistent_bytes"]), int(data["peak_transient_bytes"]))
