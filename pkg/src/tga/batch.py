"""Flatten a list of samples into index arrays the model consumes.

All sequences of a batch share one node axis (sequence ``b`` owns rows
``offsets[b]:offsets[b+1]``), and all their graphs are merged into one
edge list with globally offset node indices.  Edges are sorted by
``(view, src_behavior, dst_behavior)`` so every transition type is a
contiguous block for the grouped edge transforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .embedding import hash_ids, time_buckets
from .events import NUM_BEHAVIORS, BehaviorSequence, Candidate, Sample
from .graph import NUM_SLOTS, NUM_VIEWS, Direction, TransitionGraph, build_graph

NUM_TRANSITION_GROUPS = NUM_VIEWS * NUM_BEHAVIORS * NUM_BEHAVIORS


@dataclass
class Batch:
    size: int
    offsets: np.ndarray        # (B+1,)
    items: np.ndarray          # (N,) hashed item index
    behaviors: np.ndarray      # (N,)
    time_idx: np.ndarray       # (N,)
    positions: np.ndarray      # (N,)
    # merged graph, sorted by transition group
    src: np.ndarray            # (E,)
    dst: np.ndarray            # (E,)
    edge_view: np.ndarray      # (E,)
    group_bounds: np.ndarray   # (3*16 + 1,)
    slots: np.ndarray          # (N, 6) global peer index or -1
    pad_index: np.ndarray      # (B, T) node row or -1
    cand_items: np.ndarray     # (B,) hashed
    cand_cats: np.ndarray      # (B,) hashed
    profiles: np.ndarray       # (B, P)
    labels: np.ndarray         # (B,)

    @property
    def num_nodes(self) -> int:
        return len(self.items)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def slot_mask(self) -> np.ndarray:
        return self.slots >= 0

    @property
    def pad_mask(self) -> np.ndarray:
        return self.pad_index >= 0

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)


def make_batch(
    samples: Sequence[Sample],
    cfg: ModelConfig,
    graphs: Sequence[TransitionGraph] | None = None,
) -> Batch:
    seqs = [s.sequence for s in samples]
    if graphs is None:
        graphs = [build_graph(q, cfg.enabled_views, cfg.max_gap) for q in seqs]
    lengths = np.array([len(q) for q in seqs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    n = int(offsets[-1])

    def cat(arrs, dtype=np.int64):
        return np.concatenate(arrs).astype(dtype) if arrs else np.zeros(0, dtype)

    items = hash_ids(cat([q.item_ids for q in seqs]), cfg.v_item)
    behaviors = cat([q.behaviors for q in seqs])
    time_idx = cat([time_buckets(q.timestamps, cfg) for q in seqs])
    positions = cat([q.positions for q in seqs])

    src = cat([g.src + o for g, o in zip(graphs, offsets)])
    dst = cat([g.dst + o for g, o in zip(graphs, offsets)])
    view = cat([g.view for g in graphs])
    group = (view * NUM_BEHAVIORS + behaviors[src]) * NUM_BEHAVIORS + behaviors[dst]
    order = np.argsort(group, kind="stable")
    src, dst, view, group = src[order], dst[order], view[order], group[order]
    bounds = np.searchsorted(group, np.arange(NUM_TRANSITION_GROUPS + 1)).astype(np.int64)

    slots = np.full((n, NUM_SLOTS), -1, np.int64)
    slots[dst, 2 * view + Direction.IN] = src
    slots[src, 2 * view + Direction.OUT] = dst

    t_max = int(lengths.max()) if len(lengths) else 0
    pad_index = np.full((len(samples), t_max), -1, np.int64)
    for b, (o, ln) in enumerate(zip(offsets[:-1], lengths)):
        pad_index[b, :ln] = np.arange(o, o + ln)

    profiles = (
        np.stack([s.user_profile for s in samples])
        if samples else np.zeros((0, cfg.profile_dim))
    )
    if profiles.shape[1] != cfg.profile_dim:
        raise ValueError(f"profile dimension {profiles.shape[1]} != config profile_dim {cfg.profile_dim}")
    return Batch(
        size=len(samples),
        offsets=offsets,
        items=items,
        behaviors=behaviors,
        time_idx=time_idx,
        positions=positions,
        src=src,
        dst=dst,
        edge_view=view,
        group_bounds=bounds,
        slots=slots,
        pad_index=pad_index,
        cand_items=hash_ids([s.candidate.item_id for s in samples], cfg.v_item),
        cand_cats=hash_ids([s.candidate.category_id for s in samples], cfg.v_cat),
        profiles=profiles,
        labels=np.array([s.label for s in samples], dtype=np.int64),
    )


def sequence_batch(seq: BehaviorSequence, cfg: ModelConfig, graph: TransitionGraph | None = None) -> Batch:
    """A one-sample batch around a bare sequence (neutral profile and candidate)."""
    sample = Sample(np.zeros(cfg.profile_dim), seq, Candidate(0, 0), 0)
    return make_batch([sample], cfg, None if graph is None else [graph])
