"""Synthetic planted-pattern samples, JSONL ingestion and batching.

Two planted rules are available:

``click_cart``
    label ~ Bernoulli(p_pattern) if the sequence contains an item-level
    click -> cart transition (consecutive occurrences of the same item) on an
    item of the candidate's category, else Bernoulli(p_base).
``two_hop``
    label ~ Bernoulli(p_pattern) if some cart at position a has a purchase at
    position a - gap (default 3), else Bernoulli(p_base).  With gap 3 no node
    has both events within one hop: the node at a - 1 reaches the cart in one
    edge and the purchase in two, so one encoder layer cannot relate them and
    two can.  (With gap 2 the node in between sees both ends directly and a
    single layer suffices.)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from itertools import islice
from typing import Iterable, Iterator, Sequence

import numpy as np

from .events import (
    DEFAULT_MAX_SEQ_LEN,
    BehaviorSequence,
    BehaviorType,
    Candidate,
    Sample,
    truncate_to_recent,
)

PATTERNS = ("click_cart", "two_hop")


class DataFormatError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    n_users: int = 1000
    seq_len_min: int = 64
    seq_len_max: int = 256
    n_items: int = 1000
    n_categories: int = 20
    categories_per_user: int = 3
    rate_click: float = 0.80
    rate_cart: float = 0.06
    rate_favorite: float = 0.08
    rate_purchase: float = 0.06
    p_convert_when_pattern: float = 0.7
    p_convert_base: float = 0.1
    candidate_in_mix: float = 0.8
    two_hop_gap: int = 3
    profile_dim: int = 16
    pattern: str = "click_cart"
    start_time: int = 1_600_000_000
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_convert_base <= self.p_convert_when_pattern <= 1:
            raise ValueError("need 0 <= p_convert_base <= p_convert_when_pattern <= 1")
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if not 1 <= self.seq_len_min <= self.seq_len_max:
            raise ValueError("need 1 <= seq_len_min <= seq_len_max")
        if self.n_items < self.n_categories:
            raise ValueError("need at least one item per category")
        if self.two_hop_gap < 1:
            raise ValueError("two_hop_gap must be positive")
        if not 1 <= self.categories_per_user <= self.n_categories:
            raise ValueError("categories_per_user must be within [1, n_categories]")

    @property
    def behavior_rates(self) -> np.ndarray:
        r = np.array([self.rate_click, self.rate_cart, self.rate_favorite, self.rate_purchase])
        return r / r.sum()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**data)


def item_category(item, n_categories: int):
    return item % n_categories


# --------------------------------------------------------------------------
# planted rules (computed directly from the events, independent of the graph code)

def has_click_cart(seq: BehaviorSequence, category: int) -> bool:
    last_beh: dict[int, int] = {}
    for item, cat, beh in zip(seq.item_ids.tolist(), seq.category_ids.tolist(), seq.behaviors.tolist()):
        prev = last_beh.get(item)
        if cat == category and prev == BehaviorType.CLICK and beh == BehaviorType.CART:
            return True
        last_beh[item] = beh
    return False


def has_two_hop(seq: BehaviorSequence, gap: int = 3) -> bool:
    b = seq.behaviors
    if len(b) <= gap:
        return False
    return bool(np.any((b[gap:] == BehaviorType.CART) & (b[:-gap] == BehaviorType.PURCHASE)))


def pattern_present(sample: Sample, pattern: str = "click_cart", gap: int = 3) -> bool:
    if pattern == "click_cart":
        return has_click_cart(sample.sequence, sample.candidate.category_id)
    return has_two_hop(sample.sequence, gap)


# --------------------------------------------------------------------------
# generation

def _sample_sequence(cfg: GeneratorConfig, rng: np.random.Generator) -> BehaviorSequence:
    n = int(rng.integers(cfg.seq_len_min, cfg.seq_len_max + 1))
    mix = rng.choice(cfg.n_categories, size=cfg.categories_per_user, replace=False)
    weights = rng.dirichlet(np.ones(cfg.categories_per_user))
    cats = mix[rng.choice(cfg.categories_per_user, size=n, p=weights)]
    per_cat = cfg.n_items // cfg.n_categories
    items = cats + cfg.n_categories * rng.integers(0, per_cat, size=n)
    behaviors = rng.choice(4, size=n, p=cfg.behavior_rates)
    gaps = np.floor(np.exp(rng.uniform(0.0, math.log(86400.0), size=n))).astype(np.int64)
    gaps[0] = 0
    timestamps = cfg.start_time + int(rng.integers(0, 86400 * 30)) + np.cumsum(gaps)
    return BehaviorSequence(items, item_category(items, cfg.n_categories), behaviors, timestamps)


def _sample_candidate(cfg: GeneratorConfig, seq: BehaviorSequence, rng) -> Candidate:
    if cfg.pattern == "two_hop":
        item = int(seq.item_ids[rng.integers(len(seq))])
        if rng.random() >= cfg.candidate_in_mix:
            item = int(rng.integers(cfg.n_items // cfg.n_categories * cfg.n_categories))
        return Candidate(item, int(item_category(item, cfg.n_categories)))
    if rng.random() < cfg.candidate_in_mix:
        cat = int(seq.category_ids[rng.integers(len(seq))])
    else:
        cat = int(rng.integers(cfg.n_categories))
    item = cat + cfg.n_categories * int(rng.integers(cfg.n_items // cfg.n_categories))
    return Candidate(item, cat)


def generate(cfg: GeneratorConfig) -> Iterator[Sample]:
    """Deterministic stream of ``cfg.n_users`` samples (one per user)."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.n_users):
        seq = _sample_sequence(cfg, rng)
        cand = _sample_candidate(cfg, seq, rng)
        profile = rng.normal(size=cfg.profile_dim)
        sample = Sample(profile, seq, cand, 0)
        p = cfg.p_convert_when_pattern if pattern_present(sample, cfg.pattern, cfg.two_hop_gap) else cfg.p_convert_base
        label = int(rng.random() < p)
        yield Sample(profile, seq, cand, label)


def binary_score_auc(prevalence: float, p_pattern: float, p_base: float) -> float:
    """AUC of the 0/1 pattern indicator as a score, in closed form.

    With a = P(pattern | y=1) and b = P(pattern | y=0), ties between the two
    score levels count one half: AUC = a(1-b) + (ab + (1-a)(1-b))/2
    = (1 + a - b) / 2.
    """
    pi = prevalence
    pos = p_pattern * pi + p_base * (1 - pi)
    neg = (1 - p_pattern) * pi + (1 - p_base) * (1 - pi)
    if pos == 0 or neg == 0:
        return float("nan")
    a = p_pattern * pi / pos
    b = (1 - p_pattern) * pi / neg
    return 0.5 * (1 + a - b)


def bayes_optimal_auc(samples: Sequence[Sample], cfg: GeneratorConfig) -> tuple[float, float]:
    """(ceiling AUC, pattern prevalence) for ``samples`` drawn from ``cfg``.

    The pattern indicator is a sufficient statistic for the label, so its
    AUC is the best achievable.
    """
    present = np.array([pattern_present(s, cfg.pattern, cfg.two_hop_gap) for s in samples], dtype=float)
    prevalence = float(present.mean()) if len(present) else 0.0
    return binary_score_auc(prevalence, cfg.p_convert_when_pattern, cfg.p_convert_base), prevalence


# --------------------------------------------------------------------------
# JSONL

def sample_to_json(sample: Sample) -> dict:
    seq = sample.sequence
    return {
        "profile": [float(x) for x in sample.user_profile],
        "events": [
            {"item": int(i), "cat": int(c), "beh": BehaviorType(int(b)).label, "ts": int(t)}
            for i, c, b, t in zip(seq.item_ids, seq.category_ids, seq.behaviors, seq.timestamps)
        ],
        "candidate": {"item": sample.candidate.item_id, "cat": sample.candidate.category_id},
        "label": sample.label,
    }


def sample_from_json(obj: dict) -> Sample:
    events = obj["events"]
    rows = [(int(e["item"]), int(e["cat"]), BehaviorType.parse(e["beh"]), int(e["ts"])) for e in events]
    cand = obj["candidate"]
    return Sample(
        np.asarray(obj["profile"], dtype=np.float64),
        BehaviorSequence.from_events(rows),
        Candidate(int(cand["item"]), int(cand["cat"])),
        int(obj["label"]),
    )


def write_jsonl(samples: Iterable[Sample], path) -> int:
    n = 0
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), separators=(",", ":")) + "\n")
            n += 1
    return n


def load_jsonl(path, max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> Iterator[Sample]:
    """Parse samples; positions come from array order and sequences are
    truncated to the most recent ``max_seq_len`` events."""
    from .events import validate_sequence

    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sample = sample_from_json(json.loads(line))
            except ValueError as exc:
                if "unknown behavior" in str(exc):
                    raise DataFormatError(f"line {lineno}: {exc}") from None
                raise DataFormatError(f"line {lineno}: malformed sample ({exc})") from None
            except (KeyError, TypeError) as exc:
                raise DataFormatError(f"line {lineno}: malformed sample ({exc!r})") from None
            report = validate_sequence(sample.sequence)
            if not report:
                raise DataFormatError(f"line {lineno}: invalid sequence at event {report.index}: {report.reason}")
            seq = truncate_to_recent(sample.sequence, max_seq_len)
            yield Sample(sample.user_profile, seq, sample.candidate, sample.label)


def batch(stream: Iterable, size: int) -> Iterator[list]:
    """Consecutive chunks of ``size`` (the last may be shorter); order kept."""
    if size <= 0:
        raise ValueError("batch size must be positive")
    it = iter(stream)
    while chunk := list(islice(it, size)):
        yield chunk
