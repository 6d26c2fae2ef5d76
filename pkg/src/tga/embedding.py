"""Node representation: item, behavior, time and position tables concatenated."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .events import NUM_BEHAVIORS

log = logging.getLogger(__name__)

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def hash_ids(ids, vocab: int) -> np.ndarray:
    """splitmix64 finaliser of each id, reduced modulo ``vocab``."""
    z = np.asarray(ids, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z % np.uint64(vocab)).astype(np.int64)


def bucket(timestamp, reference_time, num_buckets: int = 32) -> np.ndarray:
    """Log-recency bucket ``floor(log2(1 + gap))`` clamped to the table size.

    Negative gaps (timestamp after the reference) clamp to bucket 0.
    """
    gap = np.asarray(reference_time, dtype=np.int64) - np.asarray(timestamp, dtype=np.int64)
    if np.any(gap < 0):
        log.debug("negative recency gap clamped to 0")
        gap = np.maximum(gap, 0)
    # frexp is exact for integers below 2**53: x = m * 2**e with m in [0.5, 1)
    _, e = np.frexp((gap + 1).astype(np.float64))
    return np.minimum(e.astype(np.int64) - 1, num_buckets - 1)


def time_buckets(timestamps: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Bucket indices for one sequence, referenced to its latest event."""
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if cfg.time_encoding == "absolute_bucket":
        # hour-of-day slot of the absolute timestamp
        return (timestamps // 3600) % 24 % cfg.v_time
    if timestamps.size == 0:
        return np.zeros(0, np.int64)
    return bucket(timestamps, timestamps.max(), cfg.v_time)


@dataclass
class NodeStates:
    """Current node matrix plus the immutable raw time/position embeddings."""

    h: nx.Tensor          # (N, 4d)
    time_emb: nx.Tensor   # (N, d)
    pos_emb: nx.Tensor    # (N, d)

    @property
    def num_nodes(self) -> int:
        return self.h.shape[0]

    def with_h(self, h: nx.Tensor) -> "NodeStates":
        return NodeStates(h, self.time_emb, self.pos_emb)


TABLES = ("emb.item", "emb.behavior", "emb.time", "emb.position")


class EmbeddingLayer:
    def __init__(self, cfg: ModelConfig, params: nx.ParameterStore):
        self.cfg = cfg
        self.params = params
        d = cfg.d
        params.embedding("emb.item", (cfg.v_item, d))
        params.embedding("emb.behavior", (NUM_BEHAVIORS, d))
        params.embedding("emb.time", (cfg.v_time, d))
        params.embedding("emb.position", (cfg.max_positions, d))

    def __call__(self, items, behaviors, time_idx, positions) -> NodeStates:
        """Look up and concatenate; inputs are per-node index arrays
        (items already hashed into the vocabulary)."""
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and positions.max() >= self.cfg.max_positions:
            raise ValueError(
                f"position {positions.max()} >= max_positions {self.cfg.max_positions}; "
                "truncate the sequence or raise max_positions"
            )
        p = self.params
        e_item = nx.take(p.tensor("emb.item"), items)
        e_beh = nx.take(p.tensor("emb.behavior"), behaviors)
        e_time = nx.take(p.tensor("emb.time"), time_idx)
        e_pos = nx.take(p.tensor("emb.position"), positions)
        h = nx.concat([e_item, e_beh, e_time, e_pos], axis=-1)
        return NodeStates(h, e_time, e_pos)


def embed_sequence(seq, params: nx.ParameterStore, cfg: ModelConfig) -> NodeStates:
    """Embed a single `BehaviorSequence` with the registered tables."""
    layer = EmbeddingLayer.__new__(EmbeddingLayer)
    layer.cfg, layer.params = cfg, params
    return layer(
        hash_ids(seq.item_ids, cfg.v_item),
        seq.behaviors,
        time_buckets(seq.timestamps, cfg),
        seq.positions,
    )
