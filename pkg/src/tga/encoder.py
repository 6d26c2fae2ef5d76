"""Transition-aware graph attention encoder.

One layer, for every node c with current state h_c:

1. every edge src -> dst of view v yields the input
   ``x = [h_src, h_dst, t_dst - t_src, p_dst - p_src]`` (width 2*4d + 2d = 10d),
   where t/p are the raw time/position embeddings;
2. the receiver's incoming representation is ``W_in[v, b_src->b_dst] x + b``
   and the sender's outgoing representation is ``W_out[v, b_src->b_dst] x + b``
   (both width d);
3. a node attends over its (at most six) transformed representations with
   K heads: queries from h_c (width 4d), keys/values from the transformed
   vectors (width d); heads are concatenated and projected back to 4d;
   a node with no edges gets a zero attention output;
4. ``e' = LN(h_c + attn)``, ``out = LN(e' + FFN(e'))``.

The same graph and the same raw time/position embeddings feed every layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .batch import NUM_TRANSITION_GROUPS, Batch
from .config import ModelConfig
from .embedding import NodeStates
from .events import NUM_BEHAVIORS, BehaviorType
from .graph import NUM_SLOTS, Direction, TransitionEdge, TransitionGraph, TransitionView, neighbor_slots


def transition_name(layer: int, view: TransitionView | str, direction: Direction,
                    b_src: int, b_dst: int) -> str:
    v = view if isinstance(view, str) else view.label
    return (f"layer{layer}.trans.{v}.{direction.name.lower()}."
            f"{BehaviorType(b_src).label}->{BehaviorType(b_dst).label}")


def _group_key(group: int) -> tuple[TransitionView, int, int]:
    view, rest = divmod(group, NUM_BEHAVIORS * NUM_BEHAVIORS)
    b_src, b_dst = divmod(rest, NUM_BEHAVIORS)
    return TransitionView(view), b_src, b_dst


@dataclass
class LayerTrace:
    edge_input_width: int
    state_width_in: int
    state_width_out: int
    attention: np.ndarray     # (N, K, 6) weights, zero on empty slots


class TGALayer:
    def __init__(self, cfg: ModelConfig, params: nx.ParameterStore, index: int):
        self.cfg = cfg
        self.params = params
        self.index = index
        D, d, K = cfg.node_dim, cfg.d, cfg.heads
        pre = f"layer{index}"
        views = ["shared"] if cfg.share_across_views else [v.label for v in TransitionView]
        for v in views:
            for direction in Direction:
                for bs in range(NUM_BEHAVIORS):
                    for bd in range(NUM_BEHAVIORS):
                        name = transition_name(index, v, direction, bs, bd)
                        params.glorot(f"{name}.W", (d, cfg.edge_input_dim))
                        params.zeros(f"{name}.b", (d,))
        for h in range(K):
            params.glorot(f"{pre}.attn.q{h}", (cfg.d_k, D))
            params.glorot(f"{pre}.attn.k{h}", (cfg.d_k, d))
            params.glorot(f"{pre}.attn.v{h}", (cfg.d_v, d))
        params.glorot(f"{pre}.attn.out", (D, K * cfg.d_v))
        params.glorot(f"{pre}.ffn.1.W", (cfg.ffn_dim, D))
        params.zeros(f"{pre}.ffn.1.b", (cfg.ffn_dim,))
        params.glorot(f"{pre}.ffn.2.W", (D, cfg.ffn_dim))
        params.zeros(f"{pre}.ffn.2.b", (D,))
        for ln in ("ln1", "ln2"):
            params.ones(f"{pre}.{ln}.gamma", (D,))
            params.zeros(f"{pre}.{ln}.beta", (D,))

    def transition_params(self, direction: Direction) -> tuple[list[nx.Tensor], list[nx.Tensor]]:
        """Weights/biases for every (view, b_src, b_dst) group, in batch group order."""
        ws, bs = [], []
        for g in range(NUM_TRANSITION_GROUPS):
            view, b_src, b_dst = _group_key(g)
            v = "shared" if self.cfg.share_across_views else view
            name = transition_name(self.index, v, direction, b_src, b_dst)
            ws.append(self.params.tensor(f"{name}.W"))
            bs.append(self.params.tensor(f"{name}.b"))
        return ws, bs

    def edge_inputs(self, states: NodeStates, batch: Batch, deltas: nx.Tensor | None = None) -> nx.Tensor:
        parts = [nx.take(states.h, batch.src), nx.take(states.h, batch.dst)]
        if deltas is None:
            deltas = edge_deltas(states, batch)
        x = nx.concat(parts + [deltas], axis=-1)
        if x.shape[-1] != self.cfg.edge_input_dim:
            raise nx.ShapeError(f"edge input width {x.shape[-1]} != {self.cfg.edge_input_dim}")
        return x

    def neighbor_vectors(self, states: NodeStates, batch: Batch, deltas=None) -> nx.Tensor:
        """(N, 6, d) transformed neighbor representations; zero rows on empty slots."""
        n, d = states.num_nodes, self.cfg.d
        if batch.num_edges == 0:
            return nx.Tensor(np.zeros((n, NUM_SLOTS, d), dtype=states.h.dtype))
        x = self.edge_inputs(states, batch, deltas)
        w_in, b_in = self.transition_params(Direction.IN)
        w_out, b_out = self.transition_params(Direction.OUT)
        y_in = nx.grouped_linear(x, w_in, b_in, batch.group_bounds)
        y_out = nx.grouped_linear(x, w_out, b_out, batch.group_bounds)
        target = np.concatenate([
            batch.dst * NUM_SLOTS + 2 * batch.edge_view + Direction.IN,
            batch.src * NUM_SLOTS + 2 * batch.edge_view + Direction.OUT,
        ])
        u = nx.scatter(nx.concat([y_in, y_out], axis=0), target, n * NUM_SLOTS)
        return nx.reshape(u, (n, NUM_SLOTS, d))

    def attention(self, h: nx.Tensor, u: nx.Tensor, mask: np.ndarray) -> tuple[nx.Tensor, np.ndarray]:
        cfg, p, pre = self.cfg, self.params, f"layer{self.index}"
        n, K = h.shape[0], cfg.heads
        wq = nx.concat([p.tensor(f"{pre}.attn.q{k}") for k in range(K)], axis=0)
        wk = nx.concat([p.tensor(f"{pre}.attn.k{k}") for k in range(K)], axis=0)
        wv = nx.concat([p.tensor(f"{pre}.attn.v{k}") for k in range(K)], axis=0)
        q = nx.reshape(nx.linear(h, wq), (n, K, cfg.d_k))
        k = nx.reshape(nx.linear(u, wk), (n, NUM_SLOTS, K, cfg.d_k))
        v = nx.reshape(nx.linear(u, wv), (n, NUM_SLOTS, K, cfg.d_v))
        # batched matmul over (node, head) is several times faster than einsum here
        kt = nx.transpose(k, (0, 2, 1, 3))
        logits = nx.reshape(nx.matmul(kt, nx.reshape(q, (n, K, cfg.d_k, 1))), (n, K, NUM_SLOTS))
        if cfg.scale_logits:
            logits = nx.scale(logits, 1.0 / math.sqrt(cfg.d_k))
        alpha = nx.masked_softmax(logits, mask[:, None, :])
        vt = nx.transpose(v, (0, 2, 1, 3))
        heads = nx.reshape(nx.matmul(nx.reshape(alpha, (n, K, 1, NUM_SLOTS)), vt), (n, K, cfg.d_v))
        out = nx.linear(nx.reshape(heads, (n, K * cfg.d_v)), p.tensor(f"{pre}.attn.out"))
        return out, alpha.data

    def __call__(self, states: NodeStates, batch: Batch, deltas=None) -> tuple[NodeStates, LayerTrace]:
        cfg, p, pre = self.cfg, self.params, f"layer{self.index}"
        h = states.h
        if h.shape[-1] != cfg.node_dim:
            raise nx.ShapeError(f"layer{self.index}: node width {h.shape[-1]} != {cfg.node_dim}")
        u = self.neighbor_vectors(states, batch, deltas)
        attn, alpha = self.attention(h, u, batch.slot_mask)
        e1 = affine_norm(nx.add(h, attn), p, f"{pre}.ln1", cfg.ln_eps)
        out = affine_norm(nx.add(e1, ffn(e1, p, f"{pre}.ffn")), p, f"{pre}.ln2", cfg.ln_eps)
        if out.shape != h.shape:
            raise nx.ShapeError(f"layer{self.index}: output {out.shape} != input {h.shape}")
        trace = LayerTrace(cfg.edge_input_dim if batch.num_edges else 0, h.shape[-1], out.shape[-1], alpha)
        return states.with_h(out), trace


def affine_norm(x: nx.Tensor, params: nx.ParameterStore, prefix: str, eps: float) -> nx.Tensor:
    y = nx.layer_norm(x, eps)
    return nx.add(nx.mul(y, params.tensor(f"{prefix}.gamma")), params.tensor(f"{prefix}.beta"))


def ffn(x: nx.Tensor, params: nx.ParameterStore, prefix: str) -> nx.Tensor:
    hidden = nx.relu(nx.linear(x, params.tensor(f"{prefix}.1.W"), params.tensor(f"{prefix}.1.b")))
    return nx.linear(hidden, params.tensor(f"{prefix}.2.W"), params.tensor(f"{prefix}.2.b"))


def edge_deltas(states: NodeStates, batch: Batch) -> nx.Tensor:
    """``[t_dst - t_src, p_dst - p_src]`` per edge; identical for every layer."""
    dt = nx.sub(nx.take(states.time_emb, batch.dst), nx.take(states.time_emb, batch.src))
    dp = nx.sub(nx.take(states.pos_emb, batch.dst), nx.take(states.pos_emb, batch.src))
    return nx.concat([dt, dp], axis=-1)


class TGAEncoder:
    def __init__(self, cfg: ModelConfig, params: nx.ParameterStore):
        if cfg.layers < 1:
            raise ValueError("the encoder needs at least one layer")
        self.cfg = cfg
        self.layers = [TGALayer(cfg, params, l) for l in range(1, cfg.layers + 1)]
        self.traces: list[LayerTrace] = []

    def __call__(self, states: NodeStates, batch: Batch) -> NodeStates:
        self.traces = []
        deltas = edge_deltas(states, batch) if batch.num_edges else None
        for layer in self.layers:
            states, trace = layer(states, batch, deltas)
            self.traces.append(trace)
        return states


# --------------------------------------------------------------------------
# single-edge / single-node forms, useful for inspection and tests

def edge_transform(
    states: NodeStates,
    edge: TransitionEdge,
    direction: Direction,
    params: nx.ParameterStore,
    layer: int = 1,
    shared: bool = False,
) -> np.ndarray:
    """Transformed representation of ``edge`` for its receiver (IN) or sender (OUT)."""
    h, t, p = states.h.data, states.time_emb.data, states.pos_emb.data
    s, d = edge.src, edge.dst
    x = np.concatenate([h[s], h[d], t[d] - t[s], p[d] - p[s]])
    name = transition_name(layer, "shared" if shared else edge.view, direction,
                           edge.src_behavior, edge.dst_behavior)
    return params[f"{name}.W"] @ x + params[f"{name}.b"]


def neighbor_set(
    states: NodeStates,
    graph: TransitionGraph,
    node: int,
    params: nx.ParameterStore,
    layer: int = 1,
    shared: bool = False,
) -> list[np.ndarray]:
    """The node's transformed neighbor vectors in slot order (at most six)."""
    out = []
    for slot in neighbor_slots(graph, node):
        s, d = (slot.peer, node) if slot.direction is Direction.IN else (node, slot.peer)
        edge = TransitionEdge(s, d, slot.view, slot.src_behavior, slot.dst_behavior)
        out.append(edge_transform(states, edge, slot.direction, params, layer, shared))
    return out


def count_flops(
    seq_len: int,
    d: int,
    heads: int,
    layers: int,
    d_k: int | None = None,
    d_v: int | None = None,
    ffn_mult: int = 4,
    slots_per_node: float = 6.0,
) -> int:
    """Closed-form multiply-add count of the encoder stack.

    Assumes ``slots_per_node`` filled neighbor slots per node (at most 6).
    Every term is linear in ``seq_len``.
    """
    d_k = d_k or d // heads
    d_v = d_v or d // heads
    D = 4 * d
    S = slots_per_node * seq_len
    transforms = S * (10 * d) * d
    attention = (
        seq_len * D * heads * d_k          # queries
        + S * d * heads * (d_k + d_v)      # keys and values
        + S * heads * (d_k + d_v)          # logits and weighted sum
        + seq_len * heads * d_v * D        # output projection
    )
    feed_forward = seq_len * 2 * D * (ffn_mult * D)
    return int(round(layers * (transforms + attention + feed_forward)))
