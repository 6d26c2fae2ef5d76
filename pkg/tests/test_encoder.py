import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import four_event_sequence, random_sequence, tiny_config
from tga import numerics as nx
from tga.batch import sequence_batch
from tga.config import ModelConfig
from tga.embedding import EmbeddingLayer
from tga.encoder import (
    TGAEncoder,
    count_flops,
    edge_transform,
    neighbor_set,
    transition_name,
)
from tga.events import BehaviorSequence
from tga.graph import Direction, TransitionEdge, TransitionView, build_graph, neighbor_slots


def build(cfg, seed=0, scale=0.5):
    """Embedding + encoder over one store with every tensor randomised, so
    zero biases and unit gains do not hide mistakes."""
    params = nx.ParameterStore(seed, cfg.precision)
    emb = EmbeddingLayer(cfg, params)
    enc = TGAEncoder(cfg, params)
    rng = np.random.default_rng(seed + 100)
    for name in params:
        params[name][...] = rng.normal(scale=scale, size=params[name].shape)
    return params, emb, enc


def embed(emb, batch):
    return emb(batch.items, batch.behaviors, batch.time_idx, batch.positions)


def run(cfg, seq, seed=0, params_emb_enc=None):
    params, emb, enc = params_emb_enc or build(cfg, seed)
    batch = sequence_batch(seq, cfg)
    return enc(embed(emb, batch), batch).h.data


# --------------------------------------------------------------------------
# straight-line oracles, written from the layer equations with plain loops

def oracle_edge(params, h, t, p, src, dst, view, direction, b_src, b_dst, layer=1):
    name = transition_name(layer, view, direction, b_src, b_dst)
    W, b = params[f"{name}.W"], params[f"{name}.b"]
    x = list(h[src]) + list(h[dst]) + list(t[dst] - t[src]) + list(p[dst] - p[src])
    return np.array([sum(W[i, j] * x[j] for j in range(len(x))) + b[i] for i in range(W.shape[0])])


def oracle_layer(params, cfg, graph, h, t, p, layer=1):
    """Per-node graph attention block."""
    pre = f"layer{layer}"
    beh = graph.behaviors
    out = np.zeros_like(h)

    def ln(x, gamma, beta):
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        return (x - mu) / math.sqrt(var + cfg.ln_eps) * gamma + beta

    for c in range(graph.num_nodes):
        vectors = []
        for s in neighbor_slots(graph, c):
            src, dst = (s.peer, c) if s.direction is Direction.IN else (c, s.peer)
            vectors.append(oracle_edge(params, h, t, p, src, dst, s.view.label, s.direction,
                                       beh[src], beh[dst], layer))
        heads = []
        for k in range(cfg.heads):
            if not vectors:
                heads.append(np.zeros(cfg.d_v))
                continue
            q = params[f"{pre}.attn.q{k}"] @ h[c]
            scores = np.array([(params[f"{pre}.attn.k{k}"] @ u) @ q / math.sqrt(cfg.d_k) for u in vectors])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            heads.append(sum(wi * (params[f"{pre}.attn.v{k}"] @ u) for wi, u in zip(w, vectors)))
        att = params[f"{pre}.attn.out"] @ np.concatenate(heads) if vectors else np.zeros(h.shape[1])
        e1 = ln(h[c] + att, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
        hidden = np.maximum(0, params[f"{pre}.ffn.1.W"] @ e1 + params[f"{pre}.ffn.1.b"])
        f = params[f"{pre}.ffn.2.W"] @ hidden + params[f"{pre}.ffn.2.b"]
        out[c] = ln(e1 + f, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"])
    return out


# --------------------------------------------------------------------------
# edge transform and neighbor sets

def test_edge_transform_zero_weights_give_zero():
    cfg = tiny_config()
    params, emb, _ = build(cfg)
    states = embed(emb, sequence_batch(four_event_sequence(), cfg))
    edge = TransitionEdge(0, 2, TransitionView.ITEM, 0, 1)
    name = transition_name(1, "item", Direction.IN, 0, 1)
    params[f"{name}.W"][...] = 0
    params[f"{name}.b"][...] = 0
    assert np.array_equal(edge_transform(states, edge, Direction.IN, params), np.zeros(cfg.d))


def test_edge_transform_matches_oracle(rng):
    cfg = tiny_config(d=5)
    params, emb, _ = build(cfg)
    seq = random_sequence(rng, 30)
    g = build_graph(seq)
    states = embed(emb, sequence_batch(seq, cfg))
    h, t, p = states.h.data, states.time_emb.data, states.pos_emb.data
    for e in g.edges:
        for direction in Direction:
            got = edge_transform(states, e, direction, params)
            want = oracle_edge(params, h, t, p, e.src, e.dst, e.view.label, direction,
                               e.src_behavior, e.dst_behavior)
            assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_edge_transform_self_pair_drops_deltas():
    cfg = tiny_config()
    params, emb, _ = build(cfg)
    states = embed(emb, sequence_batch(four_event_sequence(), cfg))
    edge = TransitionEdge(1, 1, TransitionView.NEIGHBOR, 0, 0)
    name = transition_name(1, "neighbor", Direction.OUT, 0, 0)
    hc = states.h.data[1]
    expected = params[f"{name}.W"] @ np.concatenate([hc, hc, np.zeros(2 * cfg.d)]) + params[f"{name}.b"]
    assert np.allclose(edge_transform(states, edge, Direction.OUT, params), expected, atol=1e-12)


def test_neighbor_set_examples():
    cfg = tiny_config()
    params, emb, _ = build(cfg)
    seq = four_event_sequence()
    states = embed(emb, sequence_batch(seq, cfg))
    g = build_graph(seq)
    assert len(neighbor_set(states, g, 0, params)) == 3
    single = BehaviorSequence.from_events([(1, 1, "click", 0)])
    s1 = embed(emb, sequence_batch(single, cfg))
    assert neighbor_set(s1, build_graph(single), 0, params) == []


def test_interior_node_of_saturated_sequence_has_six():
    cfg = tiny_config()
    params, emb, _ = build(cfg)
    seq = saturated_sequence(10)
    g = build_graph(seq)
    states = embed(emb, sequence_batch(seq, cfg))
    assert [len(neighbor_set(states, g, i, params)) for i in range(10)] == [3, 5, 6, 6, 6, 6, 6, 6, 5, 3]


def test_batched_vectors_match_neighbor_set(rng):
    cfg = tiny_config(d=3)
    params, emb, enc = build(cfg)
    seq = random_sequence(rng, 25)
    g = build_graph(seq)
    batch = sequence_batch(seq, cfg)
    states = embed(emb, batch)
    u = enc.layers[0].neighbor_vectors(states, batch).data
    for node in range(len(seq)):
        filled = [u[node, s] for s in range(6) if g.slots[node, s] >= 0]
        expected = neighbor_set(states, g, node, params)
        assert len(filled) == len(expected)
        for a, b in zip(filled, expected):
            assert np.allclose(a, b, atol=1e-12)
        empty = [u[node, s] for s in range(6) if g.slots[node, s] < 0]
        assert all(np.array_equal(e, np.zeros(cfg.d)) for e in empty)


# --------------------------------------------------------------------------
# attention block

def test_layer_matches_per_node_oracle(rng):
    cfg = tiny_config(d=3, heads=2, d_k=2, d_v=3)
    params, emb, enc = build(cfg)
    seq = random_sequence(rng, 20)
    batch = sequence_batch(seq, cfg)
    states = embed(emb, batch)
    out = enc(states, batch).h.data
    expected = oracle_layer(params, cfg, build_graph(seq), states.h.data,
                            states.time_emb.data, states.pos_emb.data)
    assert np.allclose(out, expected, atol=1e-10)


def test_singleton_neighbor_gets_full_weight():
    cfg = tiny_config()
    params, emb, enc = build(cfg)
    batch = sequence_batch(four_event_sequence(), cfg)
    enc(embed(emb, batch), batch)
    alpha = enc.traces[0].attention
    # node 3 only has the incoming neighbor edge from node 2
    assert np.all(alpha[3, :, 2 * TransitionView.NEIGHBOR + Direction.IN] == 1.0)
    assert np.count_nonzero(alpha[3]) == cfg.heads


def test_identical_neighbors_get_uniform_weights(rng):
    cfg = tiny_config()
    params, _, enc = build(cfg)
    layer = enc.layers[0]
    h = nx.Tensor(rng.normal(size=(2, cfg.node_dim)))
    u = nx.Tensor(np.broadcast_to(rng.normal(size=cfg.d), (2, 6, cfg.d)).copy())
    _, alpha = layer.attention(h, u, np.ones((2, 6), bool))
    assert np.allclose(alpha, 1 / 6, atol=1e-15)


def test_isolated_node_reduces_to_ffn_path():
    cfg = tiny_config()
    params, emb, enc = build(cfg)
    seq = BehaviorSequence.from_events([(3, 1, "purchase", 9)])
    batch = sequence_batch(seq, cfg)
    states = embed(emb, batch)
    out = enc(states, batch).h.data[0]

    def ln(x, pre):
        y = (x - x.mean()) / np.sqrt(x.var() + cfg.ln_eps)
        return y * params[f"{pre}.gamma"] + params[f"{pre}.beta"]

    e1 = ln(states.h.data[0], "layer1.ln1")
    f = params["layer1.ffn.2.W"] @ np.maximum(0, params["layer1.ffn.1.W"] @ e1 + params["layer1.ffn.1.b"])
    f = f + params["layer1.ffn.2.b"]
    assert np.allclose(out, ln(e1 + f, "layer1.ln2"), atol=1e-12)


@given(st.integers(0, 60), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_attention_weights_are_distributions(n, seed):
    cfg = tiny_config(max_positions=64)
    params, emb, enc = build(cfg)
    seq = random_sequence(np.random.default_rng(seed), n)
    batch = sequence_batch(seq, cfg)
    enc(embed(emb, batch), batch)
    alpha = enc.traces[0].attention
    filled = batch.slot_mask
    assert np.all(alpha >= 0)
    sums = alpha.sum(axis=-1)
    assert np.allclose(sums[filled.any(axis=1)], 1.0, atol=1e-12)
    assert np.all(sums[~filled.any(axis=1)] == 0)
    assert np.all(alpha[np.broadcast_to(~filled[:, None, :], alpha.shape)] == 0)


# --------------------------------------------------------------------------
# stack

def test_empty_sequence_encodes_to_empty():
    cfg = tiny_config(layers=2)
    assert run(cfg, BehaviorSequence.empty()).shape == (0, cfg.node_dim)


def test_dimensional_closure_at_d64():
    cfg = ModelConfig(d=64, layers=3, v_item=64, v_cat=8, max_positions=64, precision="float64")
    params, emb, enc = build(cfg, scale=0.05)
    batch = sequence_batch(random_sequence(np.random.default_rng(0), 40), cfg)
    out = enc(embed(emb, batch), batch)
    assert out.h.shape == (40, 256)
    assert [(t.edge_input_width, t.state_width_in, t.state_width_out) for t in enc.traces] == [(640, 256, 256)] * 3
    for l in (1, 2, 3):
        assert params[transition_name(l, "category", Direction.IN, 0, 3) + ".W"].shape == (64, 640)
    assert sum(1 for n in params if n.startswith("layer1.trans.") and n.endswith(".W")) == 96


def perturb_first_item(seq):
    items = seq.item_ids.copy()
    items[0] = 999
    return BehaviorSequence(items, seq.category_ids, seq.behaviors, seq.timestamps)


def perturb_first_behavior(seq):
    """Changes node 0 and the types of its edges but never the graph shape."""
    behaviors = seq.behaviors.copy()
    behaviors[0] = (behaviors[0] + 1) % 4
    return BehaviorSequence(seq.item_ids, seq.category_ids, behaviors, seq.timestamps)


def test_receptive_field_example():
    seq = four_event_sequence()
    other = perturb_first_item(seq)
    # node 0 loses its item edge; node 3 stays more than one hop away
    assert hop_distances(build_graph(seq), 0)[3] == 2
    assert hop_distances(build_graph(other), 0)[3] == 3
    for layers, changes in ((1, False), (3, True)):
        cfg = tiny_config(layers=layers, v_item=1024)
        models = build(cfg)
        a, b = run(cfg, seq, params_emb_enc=models), run(cfg, other, params_emb_enc=models)
        assert (not np.allclose(a[3], b[3], atol=1e-12, rtol=0)) == changes


def hop_distances(graph, source):
    adj = {i: set() for i in range(graph.num_nodes)}
    for s, d in zip(graph.src.tolist(), graph.dst.tolist()):
        adj[s].add(d)
        adj[d].add(s)
    dist, frontier = {source: 0}, [source]
    while frontier:
        nxt = []
        for a in frontier:
            for b in adj[a]:
                if b not in dist:
                    dist[b] = dist[a] + 1
                    nxt.append(b)
        frontier = nxt
    return dist


@given(st.integers(2, 30), st.integers(1, 3), st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_receptive_field_is_l_hops(n, layers, seed):
    rng = np.random.default_rng(seed)
    seq = random_sequence(rng, n, n_items=8, n_cats=3)
    # drop neighbor edges so distances are not just |i - j|
    cfg = tiny_config(layers=layers, v_item=1024, views=("item", "category"))
    g = build_graph(seq, cfg.enabled_views)
    models = build(cfg, seed)
    changed = perturb_first_behavior(seq)
    g2 = build_graph(changed, cfg.enabled_views)
    assert np.array_equal(g.src, g2.src) and np.array_equal(g.dst, g2.dst)
    a = run(cfg, seq, params_emb_enc=models)
    b = run(cfg, changed, params_emb_enc=models)
    dist = hop_distances(g, 0)
    for node in range(n):
        if dist.get(node, math.inf) > layers:
            assert np.array_equal(a[node], b[node])
    assert not np.array_equal(a[0], b[0])


def test_permutation_sensitivity():
    seq = BehaviorSequence.from_events([(1, 1, "click", 10), (2, 1, "purchase", 20), (3, 2, "click", 30)])
    swapped = BehaviorSequence.from_events([(2, 1, "purchase", 10), (1, 1, "click", 20), (3, 2, "click", 30)])
    cfg = tiny_config(layers=2)
    models = build(cfg)
    a, b = run(cfg, seq, params_emb_enc=models), run(cfg, swapped, params_emb_enc=models)
    # the bag of events is identical, the encoded multiset is not
    assert not np.allclose(np.sort(a.sum(axis=1)), np.sort(b.sum(axis=1)))


def test_removing_all_views_reduces_to_per_node_blocks(rng):
    seq = random_sequence(rng, 12)
    cfg = tiny_config(layers=2, views=())
    models = build(cfg)
    together = run(cfg, seq, params_emb_enc=models)
    alone = np.stack([run(cfg, seq.slice(i, i + 1), params_emb_enc=models)[0] for i in range(12)])
    # positions and recency buckets differ when a node stands alone; compare
    # against blocks fed with the same embedding rows instead
    params, emb, enc = models
    batch = sequence_batch(seq, cfg)
    assert batch.num_edges == 0
    states = embed(emb, batch)
    h = states.h
    for layer in enc.layers:
        pre = f"layer{layer.index}"
        from tga.encoder import affine_norm, ffn
        e1 = affine_norm(h, params, f"{pre}.ln1", cfg.ln_eps)
        h = affine_norm(nx.add(e1, ffn(e1, params, f"{pre}.ffn")), params, f"{pre}.ln2", cfg.ln_eps)
    assert np.allclose(together, h.data, atol=1e-12)
    assert alone.shape == together.shape


@pytest.mark.parametrize("dropped", list(TransitionView))
def test_disabled_view_parameters_do_not_matter(rng, dropped):
    seq = random_sequence(rng, 40)
    keep = tuple(v.label for v in TransitionView if v != dropped)
    cfg = tiny_config(layers=2, views=keep, max_positions=64)
    params, emb, enc = build(cfg)
    before = run(cfg, seq, params_emb_enc=(params, emb, enc))
    for name in params:
        if f".trans.{dropped.label}." in name:
            params[name][...] += 1.0
    assert np.array_equal(before, run(cfg, seq, params_emb_enc=(params, emb, enc)))


# --------------------------------------------------------------------------
# cost

def saturated_sequence(n):
    """Alternating items A, B in one category: interior nodes fill all six slots."""
    return BehaviorSequence(np.arange(n) % 2, np.zeros(n), np.arange(n) % 4, np.arange(n))


def encoder_ops(cfg, seq, params_emb_enc):
    params, emb, enc = params_emb_enc
    batch = sequence_batch(seq, cfg)
    states = embed(emb, batch)
    with nx.count_ops() as ops:
        enc(states, batch)
    return ops.total


def test_count_flops_is_linear_and_additive():
    assert count_flops(512, 64, 4, 3) == 2 * count_flops(256, 64, 4, 3)
    assert count_flops(256, 64, 4, 3) == 3 * count_flops(256, 64, 4, 1)


def test_count_flops_matches_instrumented_run():
    cfg = ModelConfig(d=64, heads=4, d_k=16, d_v=16, layers=3, v_item=64, v_cat=8,
                      max_positions=512, precision="float64")
    models = build(cfg, scale=0.05)
    measured = encoder_ops(cfg, saturated_sequence(256), models)
    predicted = count_flops(256, 64, 4, 3, d_k=16, d_v=16)
    assert abs(measured - predicted) / measured < 0.05


def test_instrumented_ops_grow_linearly():
    cfg = tiny_config(d=8, heads=2, d_k=4, d_v=4, layers=2, max_positions=1024)
    models = build(cfg)
    rng = np.random.default_rng(5)
    counts = {n: encoder_ops(cfg, random_sequence(rng, n, 40, 5), models) for n in (64, 128, 256, 512)}
    for n in (64, 128, 256):
        assert 1.9 <= counts[2 * n] / counts[n] <= 2.1
