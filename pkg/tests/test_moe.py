from __future__ import annotations

import json

import numpy as np
import pytest

from moeforge.fusion import MergeRecipe, build_backbone
from moeforge.model import (
    FfnWeights,
    TransformerConfig,
    forward,
    forward_with_trace,
    random_checkpoint,
)
from moeforge.moe import (
    MoECheckpoint,
    RoutingConfig,
    assemble_moe,
    expert_hidden_states,
    merge_traces,
    moe_ffn_forward,
    moe_forward,
    router_probs,
    top_k_dispatch,
    wrap_moe,
    write_trace_ndjson,
)
from moeforge.tensorops import ShapeError

CFG = TransformerConfig(
    d_model=8, n_layers=2, n_heads=2, d_ffn=12, vocab_size=17, max_seq_len=16
)


def _models(n=3):
    return [random_checkpoint(CFG, seed=20 + i, model_id=f"m{i}") for i in range(n)]


def _moe(n=3, k=2, seed=9):
    models = _models(n)
    bb = build_backbone(models, MergeRecipe.default(n))
    experts = [[lw.ffn for lw in m.layers] for m in models]
    return assemble_moe(
        bb, experts, seed=seed, routing=RoutingConfig(k=k),
        model_ids=[m.model_id for m in models],
    ), models


def _tokens(n=10, seed=0):
    return np.random.default_rng(seed).integers(0, CFG.vocab_size, size=n)


def test_routing_config():
    assert RoutingConfig.from_dict(RoutingConfig(k=2).to_dict()) == RoutingConfig(k=2)
    with pytest.raises(ValueError):
        RoutingConfig(k=0)


def test_router_probs_normalized():
    r = np.random.default_rng(1)
    x = r.normal(size=(7, 8))
    w = r.normal(size=(8, 4))
    p = router_probs(x, w)
    assert p.shape == (7, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(ShapeError):
        router_probs(x, r.normal(size=(5, 4)))


def test_top_k_dispatch_selection_and_gates():
    probs = np.array([[0.1, 0.5, 0.2, 0.2], [0.4, 0.4, 0.1, 0.1]])
    idx, gates = top_k_dispatch(probs, RoutingConfig(k=2, renormalize=True))
    # descending probability, ties to the lower index
    np.testing.assert_array_equal(idx, [[1, 2], [0, 1]])
    np.testing.assert_allclose(gates.sum(axis=1), 1.0)
    np.testing.assert_allclose(gates[0], [0.5 / 0.7, 0.2 / 0.7])

    idx2, raw = top_k_dispatch(probs, RoutingConfig(k=2, renormalize=False))
    np.testing.assert_array_equal(idx2, idx)
    np.testing.assert_allclose(raw[0], [0.5, 0.2])


def test_assemble_moe_deterministic():
    a, _ = _moe(seed=42)
    b, _ = _moe(seed=42)
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.router, lb.router)
    c, _ = _moe(seed=43)
    assert not np.array_equal(a.layers[0].router, c.layers[0].router)


def test_assemble_moe_installs_experts_in_source_order():
    moe, models = _moe()
    assert moe.n_experts == 3
    for i, ml in enumerate(moe.layers):
        for e, m in enumerate(models):
            np.testing.assert_array_equal(ml.experts[e].w_up, m.layers[i].ffn.w_up)
            np.testing.assert_array_equal(ml.experts[e].w_down, m.layers[i].ffn.w_down)
        assert ml.router.shape == (CFG.d_model, 3)
    assert moe.provenance["source_models"] == ["m0", "m1", "m2"]
    assert moe.provenance["router_seed"] == 9


def test_assemble_moe_router_scale():
    moe, _ = _moe(seed=7)
    flat = np.concatenate([ml.router.ravel() for ml in moe.layers])
    assert abs(flat.std() - 0.02) < 0.01
    assert abs(flat.mean()) < 0.01


def test_assemble_moe_extra_provenance():
    models = _models(2)
    bb = build_backbone(models, MergeRecipe.default(2))
    experts = [[lw.ffn for lw in m.layers] for m in models]
    moe = assemble_moe(bb, experts, seed=1, model_ids=["a", "b"],
                       extra_provenance={"note": "x"})
    assert moe.provenance["note"] == "x"


def test_assemble_moe_validation():
    models = _models(2)
    bb = build_backbone(models, MergeRecipe.default(2))
    experts = [[lw.ffn for lw in m.layers] for m in models]
    with pytest.raises(ShapeError):
        assemble_moe(bb, [], seed=0)
    with pytest.raises(ShapeError):
        assemble_moe(bb, [experts[0][:1]], seed=0)
    with pytest.raises(ShapeError):
        assemble_moe(bb, experts, seed=0, model_ids=["a"])
    with pytest.raises(ValueError):
        assemble_moe(bb, experts, seed=0, model_ids=["a", "a"])
    with pytest.raises(ShapeError):
        assemble_moe(bb, experts, seed=0, routing=RoutingConfig(k=5))


def test_single_expert_moe_equals_dense_model():
    # one source model, k=1: routing must be a bit-exact no-op
    (m,) = _models(1)
    bb = build_backbone([m], MergeRecipe.default(1))
    moe = assemble_moe(bb, [[lw.ffn for lw in m.layers]], seed=3,
                       routing=RoutingConfig(k=1), model_ids=["m0"])
    tokens = _tokens()
    np.testing.assert_array_equal(moe_forward(moe, tokens), forward(m, tokens))


def test_identical_experts_collapse_to_dense():
    # all experts equal: the gate mixture of equal outputs is that output
    (m,) = _models(1)
    bb = build_backbone([m], MergeRecipe.default(1))
    ffns = [lw.ffn for lw in m.layers]
    moe = assemble_moe(bb, [ffns, ffns, ffns], seed=4,
                       routing=RoutingConfig(k=2), model_ids=["a", "b", "c"])
    tokens = _tokens()
    np.testing.assert_allclose(moe_forward(moe, tokens), forward(m, tokens),
                               rtol=0, atol=1e-5)


def test_moe_ffn_graph_matches_numpy_reference():
    moe, _ = _moe()
    r = np.random.default_rng(2)
    xn = r.normal(size=(9, CFG.d_model)).astype(np.float64)
    ml = moe.layers[0]
    want = moe_ffn_forward(xn, ml.experts, ml.router, moe.routing)
    from moeforge import autodiff as ad
    from moeforge.moe import moe_ffn_graph

    params = wrap_moe(moe.astype(np.float64))
    out, _, _, _ = moe_ffn_graph(ad.leaf(xn), params, 0, moe.n_experts, moe.routing)
    np.testing.assert_allclose(out.value, want, rtol=1e-10)


def test_trace_is_passive_and_well_formed():
    moe, _ = _moe()
    tokens = _tokens(8)
    plain = moe_forward(moe, tokens)
    logits, trace = moe_forward(moe, tokens, with_trace=True)
    np.testing.assert_array_equal(plain, logits)
    assert len(trace.layers) == CFG.n_layers
    assert trace.n_tokens == 8
    assert trace.n_rows == 8 * CFG.n_layers
    for lr in trace.layers:
        assert lr.indices.shape == (8, 2)
        assert lr.gates.shape == (8, 2)
        assert lr.probs.shape == (8, 3)
        assert ((lr.indices >= 0) & (lr.indices < 3)).all()
        np.testing.assert_allclose(lr.gates.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(lr.probs.sum(axis=1), 1.0, atol=1e-6)
        # per-row indices are distinct
        for row in lr.indices:
            assert len(set(row.tolist())) == 2


def test_merge_traces():
    moe, _ = _moe()
    _, t1 = moe_forward(moe, _tokens(5, seed=1), with_trace=True)
    _, t2 = moe_forward(moe, _tokens(7, seed=2), with_trace=True)
    merged = merge_traces([t1, t2])
    assert merged.n_tokens == 12
    np.testing.assert_array_equal(merged.layers[0].indices[:5], t1.layers[0].indices)
    np.testing.assert_array_equal(merged.layers[1].probs[5:], t2.layers[1].probs)


def test_write_trace_ndjson(tmp_path):
    moe, _ = _moe()
    _, trace = moe_forward(moe, _tokens(6), with_trace=True)
    path = tmp_path / "trace.ndjson"
    write_trace_ndjson(trace, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 6 * CFG.n_layers
    first = json.loads(lines[0])
    assert first["token_pos"] == 0 and first["layer"] == 0
    assert first["indices"] == trace.layers[0].indices[0].tolist()
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"token_pos", "layer", "indices", "gates"}


def test_wrap_moe_trainability_modes():
    moe, _ = _moe()
    frozen = wrap_moe(moe)
    assert not any(v.requires_grad for v in frozen.values())
    router_only = wrap_moe(moe, trainable="router_only")
    for name, v in router_only.items():
        assert v.requires_grad == name.endswith(".router"), name
    assert sum(v.requires_grad for v in router_only.values()) == CFG.n_layers
    everything = wrap_moe(moe, trainable="all")
    assert all(v.requires_grad for v in everything.values())
    with pytest.raises(ValueError):
        wrap_moe(moe, trainable="bias_only")


def test_expert_hidden_states():
    moe, models = _moe()
    tokens = _tokens(7)
    states = expert_hidden_states(moe, tokens, layer=1)
    assert len(states) == 3
    for s in states:
        assert s.shape == (7, CFG.d_ffn)
    with pytest.raises(ValueError):
        expert_hidden_states(moe, tokens, layer=5)


def test_expert_hidden_states_single_expert_matches_dense_trace():
    # with one source the routed stream equals the dense model's, so the
    # probe must reproduce the dense activation trace bit for bit
    (m,) = _models(1)
    bb = build_backbone([m], MergeRecipe.default(1))
    moe = assemble_moe(bb, [[lw.ffn for lw in m.layers]], seed=3,
                       routing=RoutingConfig(k=1), model_ids=["m0"])
    tokens = _tokens(9)
    (probe,) = expert_hidden_states(moe, tokens, layer=0)
    _, dense_trace = forward_with_trace(m, tokens, layers=(0,))
    np.testing.assert_array_equal(probe, dense_trace[0])


def test_moe_copy_is_deep():
    moe, _ = _moe()
    dup = moe.copy()
    dup.layers[0].router[0, 0] = 99.0
    assert moe.layers[0].router[0, 0] != 99.0
    dup2 = moe.copy()
    dup2.backbone.embedding[0, 0] = 99.0
    assert moe.backbone.embedding[0, 0] != 99.0
