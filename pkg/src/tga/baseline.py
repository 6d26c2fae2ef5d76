"""Full self-attention encoder used as the quadratic-cost comparator.

Blocks mirror the TGA layer (residual + LayerNorm + FFN) but every node
attends to every node of its own sequence.  No causal mask.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .batch import Batch
from .config import ModelConfig
from .embedding import NodeStates
from .encoder import affine_norm, ffn


class TransformerEncoder:
    def __init__(self, cfg: ModelConfig, params: nx.ParameterStore):
        self.cfg = cfg
        self.params = params
        D = cfg.node_dim
        self.head_dim = D // cfg.heads
        for l in range(1, cfg.layers + 1):
            pre = f"base.layer{l}"
            for name in ("q", "k", "v", "out"):
                params.glorot(f"{pre}.attn.{name}", (D, D))
            params.glorot(f"{pre}.ffn.1.W", (cfg.ffn_dim, D))
            params.zeros(f"{pre}.ffn.1.b", (cfg.ffn_dim,))
            params.glorot(f"{pre}.ffn.2.W", (D, cfg.ffn_dim))
            params.zeros(f"{pre}.ffn.2.b", (D,))
            for ln in ("ln1", "ln2"):
                params.ones(f"{pre}.{ln}.gamma", (D,))
                params.zeros(f"{pre}.{ln}.beta", (D,))
        self.attention_weights: list[np.ndarray] = []

    def layer(self, x: nx.Tensor, key_mask: np.ndarray, l: int) -> nx.Tensor:
        cfg, p, pre = self.cfg, self.params, f"base.layer{l}"
        B, T, D = x.shape
        K, hd = cfg.heads, self.head_dim

        def split(name):
            return nx.reshape(nx.linear(x, p.tensor(f"{pre}.attn.{name}")), (B, T, K, hd))

        q, k, v = split("q"), split("k"), split("v")
        logits = nx.scale(nx.einsum("bqkh,bskh->bkqs", q, k), 1.0 / math.sqrt(hd))
        alpha = nx.masked_softmax(logits, key_mask[:, None, None, :])
        self.attention_weights.append(alpha.data)
        mixed = nx.reshape(nx.einsum("bkqs,bskh->bqkh", alpha, v), (B, T, D))
        attn = nx.linear(mixed, p.tensor(f"{pre}.attn.out"))
        e1 = affine_norm(nx.add(x, attn), p, f"{pre}.ln1", cfg.ln_eps)
        return affine_norm(nx.add(e1, ffn(e1, p, f"{pre}.ffn")), p, f"{pre}.ln2", cfg.ln_eps)

    def __call__(self, states: NodeStates, batch: Batch) -> NodeStates:
        self.attention_weights = []
        B, T = batch.pad_index.shape
        x = nx.take(states.h, batch.pad_index, unique=True)
        mask = batch.pad_mask
        for l in range(1, self.cfg.layers + 1):
            x = self.layer(x, mask, l)
        flat = nx.reshape(x, (B * T, self.cfg.node_dim))
        rows = np.flatnonzero(mask.reshape(-1))
        return states.with_h(nx.take(flat, rows, unique=True))
