"""Domain vocabulary: behaviors, events, behavior sequences and samples.

Sequences are stored column-wise (one numpy array per field) so that graph
compilation and batching over thousands of long sequences stay cheap.  The
per-event view (`Event`) is materialised on demand.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

DEFAULT_MAX_SEQ_LEN = 256


class BehaviorType(enum.IntEnum):
    CLICK = 0
    CART = 1
    FAVORITE = 2
    PURCHASE = 3

    @classmethod
    def parse(cls, name: str) -> "BehaviorType":
        try:
            return _BEHAVIOR_NAMES[name]
        except KeyError:
            raise ValueError(f"unknown behavior {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


_BEHAVIOR_NAMES = {b.name.lower(): b for b in BehaviorType}
NUM_BEHAVIORS = len(BehaviorType)


@dataclass(frozen=True)
class Event:
    item_id: int
    category_id: int
    behavior: BehaviorType
    timestamp: int
    position: int


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BehaviorSequence:
    """Time-ordered multi-behavior interactions of one user.

    Positions are implicit: event ``n`` sits at position ``n``.
    """

    item_ids: np.ndarray
    category_ids: np.ndarray
    behaviors: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        cols = {
            "item_ids": _frozen(self.item_ids, np.int64),
            "category_ids": _frozen(self.category_ids, np.int64),
            "behaviors": _frozen(self.behaviors, np.int64),
            "timestamps": _frozen(self.timestamps, np.int64),
        }
        lengths = {len(v) for v in cols.values()}
        if len(lengths) > 1:
            raise ValueError(f"column lengths differ: { {k: len(v) for k, v in cols.items()} }")
        for name, arr in cols.items():
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls) -> "BehaviorSequence":
        return cls([], [], [], [])

    @classmethod
    def from_events(cls, events: Iterable[Event | tuple]) -> "BehaviorSequence":
        """Build from `Event`s or ``(item, category, behavior, timestamp)`` tuples.

        Positions carried by `Event` objects are ignored; they are reassigned
        from list order.
        """
        rows = []
        for ev in events:
            if isinstance(ev, Event):
                rows.append((ev.item_id, ev.category_id, int(ev.behavior), ev.timestamp))
            else:
                item, cat, beh, ts = ev
                if isinstance(beh, str):
                    beh = BehaviorType.parse(beh)
                rows.append((item, cat, int(beh), ts))
        if not rows:
            return cls.empty()
        item, cat, beh, ts = zip(*rows)
        return cls(item, cat, beh, ts)

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    @property
    def events(self) -> list[Event]:
        return [self[i] for i in range(len(self))]

    def __getitem__(self, i: int) -> Event:
        return Event(
            int(self.item_ids[i]),
            int(self.category_ids[i]),
            BehaviorType(int(self.behaviors[i])),
            int(self.timestamps[i]),
            int(i) if i >= 0 else len(self) + i,
        )

    def __eq__(self, other):
        if not isinstance(other, BehaviorSequence):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("item_ids", "category_ids", "behaviors", "timestamps")
        )

    def slice(self, start: int, stop: int | None = None) -> "BehaviorSequence":
        return BehaviorSequence(
            self.item_ids[start:stop],
            self.category_ids[start:stop],
            self.behaviors[start:stop],
            self.timestamps[start:stop],
        )


@dataclass(frozen=True)
class Candidate:
    item_id: int
    category_id: int


@dataclass(frozen=True, eq=False)
class Sample:
    user_profile: np.ndarray
    sequence: BehaviorSequence
    candidate: Candidate
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "user_profile", _frozen(self.user_profile, np.float64))

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.label == other.label
            and self.candidate == other.candidate
            and self.sequence == other.sequence
            and np.array_equal(self.user_profile, other.user_profile)
        )


@dataclass(frozen=True)
class Violation:
    index: int
    reason: str

    def __bool__(self) -> bool:
        # a violation report is falsy so `if validate_sequence(s):` reads as "is ok"
        return False


@dataclass(frozen=True)
class Ok:
    def __bool__(self) -> bool:
        return True


OK = Ok()


def validate_sequence(seq: BehaviorSequence, max_seq_len: int | None = None) -> Ok | Violation:
    """Check the sequence invariants; return `OK` or the first `Violation`."""
    n = len(seq)
    if max_seq_len is not None and n > max_seq_len:
        return Violation(max_seq_len, f"length {n} exceeds max_seq_len {max_seq_len}")
    checks = (
        (seq.item_ids < 0, "negative item_id"),
        (seq.category_ids < 0, "negative category_id"),
        ((seq.behaviors < 0) | (seq.behaviors >= NUM_BEHAVIORS), "unknown behavior code"),
        (seq.timestamps < 0, "negative timestamp"),
    )
    first: Violation | None = None
    for bad, reason in checks:
        idx = np.flatnonzero(bad)
        if idx.size and (first is None or idx[0] < first.index):
            first = Violation(int(idx[0]), reason)
    if n > 1:
        idx = np.flatnonzero(np.diff(seq.timestamps) < 0)
        if idx.size and (first is None or idx[0] + 1 < first.index):
            first = Violation(int(idx[0]) + 1, "timestamp decreases")
    return OK if first is None else first


def truncate_to_recent(seq: BehaviorSequence, k: int) -> BehaviorSequence:
    """Keep the last ``min(k, len(seq))`` events; positions restart at 0."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k >= len(seq):
        return seq
    return seq.slice(len(seq) - k)
