"""Candidate target attention, the scoring MLP, the loss and AUC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .batch import Batch
from .config import ModelConfig
from .embedding import NodeStates


class PredictionHead:
    def __init__(self, cfg: ModelConfig, params: nx.ParameterStore):
        self.cfg = cfg
        self.params = params
        D, d = cfg.node_dim, cfg.d
        params.embedding("head.emb.category", (cfg.v_cat, d))
        params.glorot("head.query.W", (D, 2 * d))
        params.zeros("head.query.b", (D,))
        params.glorot("head.key.W", (D, D))
        params.glorot("head.value.W", (D, D))
        widths = [cfg.profile_dim + 2 * d + D, *cfg.mlp_hidden, 1]
        self.mlp_names = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            params.glorot(f"head.mlp.{i}.W", (b, a))
            params.zeros(f"head.mlp.{i}.b", (b,))
            self.mlp_names.append(f"head.mlp.{i}")
        self.last_attention: np.ndarray | None = None

    def candidate(self, batch: Batch) -> nx.Tensor:
        p = self.params
        return nx.concat([
            nx.take(p.tensor("emb.item"), batch.cand_items),
            nx.take(p.tensor("head.emb.category"), batch.cand_cats),
        ], axis=-1)

    def __call__(self, encoded: NodeStates, batch: Batch) -> nx.Tensor:
        """Logits of shape (B,)."""
        p = self.params
        cand = self.candidate(batch)
        # the raw embeddings start tiny; normalising keeps the query on the
        # same scale as the layer-normed node states it is compared with
        query = nx.linear(nx.layer_norm(cand, self.cfg.ln_eps), p.tensor("head.query.W"), p.tensor("head.query.b"))
        context, self.last_attention = target_attention(
            encoded.h, batch.pad_index, query, p.tensor("head.key.W"), p.tensor("head.value.W"),
            self.cfg.target_heads,
        )
        profile = nx.Tensor(batch.profiles.astype(p.dtype))
        x = nx.concat([profile, cand, context], axis=-1)
        for i, name in enumerate(self.mlp_names):
            x = nx.linear(x, p.tensor(f"{name}.W"), p.tensor(f"{name}.b"))
            if i < len(self.mlp_names) - 1:
                x = nx.relu(x)
        return nx.reshape(x, (batch.size,))


def target_attention(
    encoded: nx.Tensor,
    pad_index: np.ndarray,
    query: nx.Tensor,
    w_key: nx.Tensor,
    w_value: nx.Tensor,
    heads: int = 1,
) -> tuple[nx.Tensor, np.ndarray]:
    """Dot-product attention of one query per sequence over all its nodes.

    Returns the (B, D) context and the weights, (B, T) for one head and
    (B, heads, T) otherwise.  With several heads the D-wide query, keys and
    values are split into equal slices, each slice attends on its own with
    logits scaled by 1/sqrt(D / heads), and the slice contexts are
    concatenated.  Sequences without events get a zero context.
    """
    B, T = pad_index.shape
    D = query.shape[-1]
    if D % heads:
        raise nx.ShapeError(f"target attention: width {D} not divisible by {heads} heads")
    if T == 0:
        return nx.Tensor(np.zeros((B, D), dtype=query.dtype)), np.zeros((B, 0) if heads == 1 else (B, heads, 0))
    nodes = nx.take(encoded, pad_index, unique=True)
    keys = nx.linear(nodes, w_key)
    values = nx.linear(nodes, w_value)
    if heads == 1:
        logits = nx.scale(nx.einsum("btd,bd->bt", keys, query), 1.0 / math.sqrt(D))
        alpha = nx.masked_softmax(logits, pad_index >= 0)
        return nx.einsum("bt,btd->bd", alpha, values), alpha.data
    dh = D // heads
    keys = nx.reshape(keys, (B, T, heads, dh))
    values = nx.reshape(values, (B, T, heads, dh))
    q = nx.reshape(query, (B, heads, dh))
    logits = nx.scale(nx.einsum("bthd,bhd->bht", keys, q), 1.0 / math.sqrt(dh))
    alpha = nx.masked_softmax(logits, (pad_index >= 0)[:, None, :])
    context = nx.einsum("bht,bthd->bhd", alpha, values)
    return nx.reshape(context, (B, D)), alpha.data


def bce_loss(prob, label) -> float:
    """Binary cross-entropy of a probability; evaluated through its logit."""
    prob = np.clip(np.asarray(prob, dtype=np.float64), 1e-300, 1 - 1e-16)
    z = np.log(prob) - np.log1p(-prob)
    y = np.asarray(label, dtype=np.float64)
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


@dataclass(frozen=True)
class Degenerate:
    """AUC is undefined when only one class is present."""

    reason: str

    def __float__(self):
        return float("nan")


def auc(scores, labels) -> float | Degenerate:
    """Rank-based AUC with average ranks for tied scores."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return Degenerate(f"single-class input ({n_pos} positives, {n_neg} negatives)")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
