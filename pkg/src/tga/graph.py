"""Compile a behavior sequence into the three-view sparse transition graph.

Every event is a node.  Within each view a node keeps at most one
predecessor and one successor:

* item view: consecutive occurrences of the same item;
* category view: consecutive events of the same category whose items differ;
* neighbor view: consecutive positions.

An edge therefore exists only when each endpoint is the other's nearest
qualifying event, which keeps in/out degree <= 1 per view by construction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .events import BehaviorSequence, BehaviorType


class TransitionView(enum.IntEnum):
    ITEM = 0
    CATEGORY = 1
    NEIGHBOR = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "TransitionView":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown view {name!r}") from None


class Direction(enum.IntEnum):
    IN = 0
    OUT = 1


ALL_VIEWS = frozenset(TransitionView)
NUM_VIEWS = len(TransitionView)
NUM_SLOTS = 2 * NUM_VIEWS


def slot_index(view: TransitionView, direction: Direction) -> int:
    """Stable slot order: item-in, item-out, category-in, ..., neighbor-out."""
    return 2 * int(view) + int(direction)


class TransitionEdge(NamedTuple):
    src: int
    dst: int
    view: TransitionView
    src_behavior: BehaviorType
    dst_behavior: BehaviorType


class Slot(NamedTuple):
    view: TransitionView
    direction: Direction
    peer: int
    src_behavior: BehaviorType
    dst_behavior: BehaviorType


@dataclass(frozen=True, eq=False)
class TransitionGraph:
    """Edge list (column arrays sorted by ``(src, view, dst)``) plus slot table.

    ``slots[c, slot_index(view, dir)]`` is the peer node index or -1.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    view: np.ndarray
    src_beh: np.ndarray
    dst_beh: np.ndarray
    slots: np.ndarray
    behaviors: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> list[TransitionEdge]:
        return [
            TransitionEdge(int(s), int(d), TransitionView(int(v)), BehaviorType(int(a)), BehaviorType(int(b)))
            for s, d, v, a, b in zip(self.src, self.dst, self.view, self.src_beh, self.dst_beh)
        ]

    def edge_set(self, view: TransitionView | None = None) -> set[tuple[int, int]]:
        keep = np.ones(self.num_edges, bool) if view is None else self.view == int(view)
        return set(zip(self.src[keep].tolist(), self.dst[keep].tolist()))

    def dump(self) -> str:
        """Text lines ``src dst view src_beh dst_beh`` sorted by (src, view, dst)."""
        lines = [
            f"{e.src} {e.dst} {e.view.label} {e.src_behavior.label} {e.dst_behavior.label}"
            for e in self.edges
        ]
        return "".join(line + "\n" for line in lines)


def _pair_edges(order: np.ndarray, keys: np.ndarray, extra_ok=None):
    # consecutive entries of a stable sort by key are the nearest same-key events
    if len(order) < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    a, b = order[:-1], order[1:]
    same = keys[a] == keys[b]
    if extra_ok is not None:
        same &= extra_ok(a, b)
    return a[same], b[same]


def _assemble(n: int, parts, behaviors: np.ndarray) -> TransitionGraph:
    src = np.concatenate([p[0] for p in parts]).astype(np.int64)
    dst = np.concatenate([p[1] for p in parts]).astype(np.int64)
    view = np.concatenate([np.broadcast_to(np.asarray(p[2], np.int64), len(p[0])) for p in parts])
    order = np.lexsort((dst, view, src))
    src, dst, view = src[order], dst[order], view[order]
    slots = np.full((n, NUM_SLOTS), -1, np.int64)
    slots[dst, 2 * view + Direction.IN] = src
    slots[src, 2 * view + Direction.OUT] = dst
    behaviors = np.array(behaviors, np.int64)
    g = TransitionGraph(n, src, dst, view, behaviors[src], behaviors[dst], slots, behaviors)
    for arr in (g.src, g.dst, g.view, g.src_beh, g.dst_beh, g.slots, g.behaviors):
        arr.setflags(write=False)
    return g


def build_graph(
    seq: BehaviorSequence,
    views: Iterable[TransitionView] = ALL_VIEWS,
    max_gap: int | None = None,
) -> TransitionGraph:
    """Compile ``seq`` into its transition graph.

    ``views`` restricts which relations are materialised (ablation);
    ``max_gap`` drops item/category edges spanning more than that many
    positions.
    """
    views = frozenset(TransitionView(v) for v in views)
    n = len(seq)
    items, cats = seq.item_ids, seq.category_ids
    parts = []
    if TransitionView.ITEM in views:
        order = np.argsort(items, kind="stable")
        parts.append((*_pair_edges(order, items), TransitionView.ITEM))
    if TransitionView.CATEGORY in views:
        order = np.argsort(cats, kind="stable")
        parts.append((*_pair_edges(order, cats, lambda a, b: items[a] != items[b]), TransitionView.CATEGORY))
    if TransitionView.NEIGHBOR in views:
        idx = np.arange(max(n - 1, 0), dtype=np.int64)
        parts.append((idx, idx + 1, TransitionView.NEIGHBOR))
    if max_gap is not None:
        parts = [
            (s, d, v) if v is TransitionView.NEIGHBOR else (s[d - s <= max_gap], d[d - s <= max_gap], v)
            for s, d, v in parts
        ]
    if not parts:
        parts = [(np.empty(0, np.int64), np.empty(0, np.int64), 0)]
    return _assemble(n, parts, seq.behaviors)


def build_graph_reference(seq: BehaviorSequence) -> TransitionGraph:
    """Single-pass construction with last-seen maps; O(n) and loop-based.

    Kept as an independent route for cross-checking `build_graph`.
    """
    n = len(seq)
    items = seq.item_ids.tolist()
    cats = seq.category_ids.tolist()
    last_item: dict[int, int] = {}
    last_cat: dict[int, int] = {}
    item_edges: tuple[list, list] = ([], [])
    cat_edges: tuple[list, list] = ([], [])
    for c in range(n):
        p = last_item.get(items[c])
        if p is not None:
            item_edges[0].append(p)
            item_edges[1].append(c)
        p = last_cat.get(cats[c])
        if p is not None and items[p] != items[c]:
            cat_edges[0].append(p)
            cat_edges[1].append(c)
        last_item[items[c]] = c
        last_cat[cats[c]] = c
    nb = list(range(max(n - 1, 0)))
    parts = [
        (np.array(item_edges[0], np.int64), np.array(item_edges[1], np.int64), TransitionView.ITEM),
        (np.array(cat_edges[0], np.int64), np.array(cat_edges[1], np.int64), TransitionView.CATEGORY),
        (np.array(nb, np.int64), np.array(nb, np.int64) + 1, TransitionView.NEIGHBOR),
    ]
    return _assemble(n, parts, seq.behaviors)


def filter_views(g: TransitionGraph, views: Iterable[TransitionView]) -> TransitionGraph:
    """The same graph restricted to the given views."""
    keep = np.isin(g.view, [int(v) for v in views])
    return _assemble(g.num_nodes, [(g.src[keep], g.dst[keep], g.view[keep])], g.behaviors)


def edge_stats(g: TransitionGraph) -> dict[TransitionView, float]:
    """Average incident edges per node for each view (0.0 on an empty graph)."""
    counts = np.bincount(g.view, minlength=NUM_VIEWS)
    return {
        v: (2.0 * float(counts[v]) / g.num_nodes if g.num_nodes else 0.0)
        for v in TransitionView
    }


def neighbor_slots(g: TransitionGraph, node: int) -> list[Slot]:
    if not 0 <= node < g.num_nodes:
        raise IndexError(f"node {node} out of range for graph with {g.num_nodes} nodes")
    out = []
    beh = g.behaviors
    for view in TransitionView:
        for direction in Direction:
            peer = int(g.slots[node, slot_index(view, direction)])
            if peer < 0:
                continue
            s, d = (peer, node) if direction is Direction.IN else (node, peer)
            out.append(Slot(view, direction, peer, BehaviorType(beh[s]), BehaviorType(beh[d])))
    return out
