from __future__ import annotations

import numpy as np
import pytest

from moeforge import autodiff as ad
from moeforge.fusion import MergeRecipe, build_backbone
from moeforge.model import TransformerConfig, random_checkpoint
from moeforge.moe import (
    LayerRouting,
    RoutingConfig,
    RoutingTrace,
    assemble_moe,
    moe_forward_graph,
    wrap_moe,
)
from moeforge.tensorops import F32, F64, softmax_rows, top_k_rows
from moeforge.training import (
    AdamW,
    MetricsLog,
    MetricsRow,
    TrainConfig,
    _bal_loss_graph,
    _lm_loss_graph,
    clip_global_norm,
    collect_gradients,
    finetune_dense,
    global_grad_norm,
    lm_loss,
    load_balance_loss,
    pretrain_dense,
    shift_targets,
    train_router,
    write_metrics_csv,
)

CFG = TransformerConfig(
    d_model=8, n_layers=2, n_heads=2, d_ffn=12, vocab_size=17, max_seq_len=16
)


def _corpus(n=4, length=12, seed=0):
    r = np.random.default_rng(seed)
    # short cycles give the loops something learnable
    return [np.tile(r.integers(0, CFG.vocab_size, size=3), length // 3 + 1)[:length]
            for _ in range(n)]


def _moe(k=2):
    models = [random_checkpoint(CFG, seed=30 + i, model_id=f"m{i}") for i in range(3)]
    bb = build_backbone(models, MergeRecipe.default(3))
    experts = [[lw.ffn for lw in m.layers] for m in models]
    return assemble_moe(bb, experts, seed=6, routing=RoutingConfig(k=k),
                        model_ids=["m0", "m1", "m2"])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_bal=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(max_grad_norm=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(max_seq_len=1)
    with pytest.raises(ValueError):
        TrainConfig(trainable="attention_only")
    assert TrainConfig().to_dict()["trainable"] == "router_only"


def test_shift_targets():
    np.testing.assert_array_equal(shift_targets(np.array([3, 1, 4, 1])), [1, 4, 1])
    with pytest.raises(ValueError):
        shift_targets(np.array([3]))


def test_lm_loss_uniform_logits():
    v = CFG.vocab_size
    logits = np.zeros((6, v))
    targets = np.arange(5) % v
    assert lm_loss(logits, targets) == pytest.approx(np.log(v), rel=1e-12)


def test_lm_loss_matches_independent_formula():
    r = np.random.default_rng(1)
    logits = r.normal(size=(9, 11)) * 3
    targets = r.integers(0, 11, size=8)
    z = logits[:-1]
    lse = np.logaddexp.reduce(z, axis=1)
    want = float(np.mean(lse - z[np.arange(8), targets]))
    assert lm_loss(logits, targets) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        lm_loss(logits, targets[:-1])


def test_lm_loss_graph_matches_scalar_loss():
    r = np.random.default_rng(2)
    logits = r.normal(size=(7, CFG.vocab_size))
    tokens = r.integers(0, CFG.vocab_size, size=7)
    node = _lm_loss_graph(ad.leaf(logits), tokens)
    assert float(node.value) == pytest.approx(lm_loss(logits, tokens[1:]), rel=1e-12)


def _trace(indices, probs):
    return RoutingTrace(layers=[LayerRouting(
        indices=np.asarray(indices), gates=np.zeros_like(probs), probs=np.asarray(probs)
    )])


def test_balance_loss_uniform_is_one():
    # every expert used equally, probabilities exactly uniform
    idx = np.array([[0, 1], [2, 3], [1, 2], [3, 0]])
    probs = np.full((4, 4), 0.25)
    assert load_balance_loss(_trace(idx, probs), 4, 2) == pytest.approx(1.0, abs=1e-6)


def test_balance_loss_saturated_pair_is_two():
    # four experts, all mass on two of them
    idx = np.tile([0, 1], (6, 1))
    probs = np.tile([0.5, 0.5, 0.0, 0.0], (6, 1))
    assert load_balance_loss(_trace(idx, probs), 4, 2) == pytest.approx(2.0, abs=0.01)


def test_balance_loss_random_router_states_at_least_one():
    # for any fixed routing distribution the top-k mass is at least k/N,
    # so N * sum f_i P_i >= 1 holds exactly; sweep random states
    r = np.random.default_rng(3)
    for _ in range(500):
        t, n = int(r.integers(1, 24)), int(r.integers(2, 7))
        k = int(r.integers(1, n + 1))
        q = softmax_rows(r.normal(size=(1, n)) * r.uniform(0.1, 4.0))
        probs = np.tile(q, (t, 1))
        idx = top_k_rows(probs, k)
        val = load_balance_loss(_trace(idx, probs), n, k)
        assert val >= 1.0 - 1e-6
    with pytest.raises(ValueError):
        load_balance_loss(RoutingTrace(layers=[]), 4, 2)


def test_balance_loss_heterogeneous_rows_can_dip_below_one():
    # the batched product of marginals has no universal lower bound once
    # rows disagree: frequently-picked experts can carry low mean mass.
    # This pins the formula's semantics so the sweep above is not
    # "fixed" into hiding it later.
    probs = np.array([[0.4, 0.3, 0.3]] * 3 + [[0.0, 0.5, 0.5]] * 2)
    idx = top_k_rows(probs, 1)
    val = load_balance_loss(_trace(idx, probs), 3, 1)
    assert val < 1.0


def test_balance_loss_averages_layers():
    idx_u = np.array([[0, 1], [2, 3]])
    probs_u = np.full((2, 4), 0.25)
    idx_s = np.tile([0, 1], (2, 1))
    probs_s = np.tile([0.5, 0.5, 0.0, 0.0], (2, 1))
    two = RoutingTrace(layers=[
        LayerRouting(indices=idx_u, gates=np.zeros_like(probs_u), probs=probs_u),
        LayerRouting(indices=idx_s, gates=np.zeros_like(probs_s), probs=probs_s),
    ])
    assert load_balance_loss(two, 4, 2) == pytest.approx(1.5, abs=0.01)


def test_bal_loss_graph_matches_scalar_on_live_routing():
    moe = _moe().astype(F64)
    params = wrap_moe(moe)
    seqs = _corpus(3, seed=5)
    aux_per_seq = []
    layers = [[] for _ in range(CFG.n_layers)]
    for s in seqs:
        _, aux = moe_forward_graph(params, moe.config, moe.routing, moe.n_experts, s)
        aux_per_seq.append(aux)
        for l, a in enumerate(aux):
            layers[l].append(a)
    node = _bal_loss_graph(aux_per_seq, moe.n_experts, moe.routing.k)
    merged = RoutingTrace(layers=[
        LayerRouting(
            indices=np.concatenate([a.indices for a in per_layer]),
            gates=np.concatenate([a.gates.value for a in per_layer]),
            probs=np.concatenate([a.probs.value for a in per_layer]),
        )
        for per_layer in layers
    ])
    want = load_balance_loss(merged, moe.n_experts, moe.routing.k)
    assert float(node.value) == pytest.approx(want, rel=1e-10)


def test_router_gradient_matches_finite_differences():
    lam = 0.01
    moe = _moe().astype(F64)
    tokens = _corpus(1, seed=7)[0]

    def loss_and_params(m, trainable="none"):
        params = wrap_moe(m, trainable=trainable)
        logits, aux = moe_forward_graph(params, m.config, m.routing, m.n_experts, tokens)
        total = ad.add(
            ad.scale(_lm_loss_graph(logits, tokens), 1.0),
            ad.scale(_bal_loss_graph([aux], m.n_experts, m.routing.k), lam),
        )
        return total, params

    total, params = loss_and_params(moe, trainable="router_only")
    ad.backward(total)
    grads = collect_gradients(params)
    h = 1e-5
    r = np.random.default_rng(8)
    checked = 0
    for l in range(CFG.n_layers):
        g = grads[f"layers.{l}.router"]
        for _ in range(6):
            i, j = int(r.integers(CFG.d_model)), int(r.integers(3))
            orig = moe.layers[l].router[i, j]
            moe.layers[l].router[i, j] = orig + h
            up, _ = loss_and_params(moe)
            moe.layers[l].router[i, j] = orig - h
            dn, _ = loss_and_params(moe)
            moe.layers[l].router[i, j] = orig
            fd = (float(up.value) - float(dn.value)) / (2 * h)
            denom = max(abs(fd), abs(g[i, j]), 1e-8)
            assert abs(g[i, j] - fd) / denom < 1e-3, (l, i, j)
            checked += 1
    assert checked == 12


def test_grad_norm_and_clipping():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert global_grad_norm(grads) == pytest.approx(5.0)
    same, norm = clip_global_norm(dict(grads), max_norm=10.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_array_equal(same["a"], grads["a"])
    clipped, norm2 = clip_global_norm(dict(grads), max_norm=1.0)
    assert norm2 == pytest.approx(5.0)
    assert global_grad_norm(clipped) == pytest.approx(1.0)
    np.testing.assert_allclose(clipped["a"], [0.6, 0.0])


def test_collect_gradients_contract():
    a = ad.leaf(np.ones(2), requires_grad=True)
    b = ad.leaf(np.ones(2), requires_grad=False)
    with pytest.raises(ValueError):
        collect_gradients({"a": a})
    ad.backward(ad.vsum(ad.mul(a, b)))
    out = collect_gradients({"a": a, "b": b})
    assert set(out) == {"a"}


def test_adamw_matches_hand_rolled_update():
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.04, trainable="all",
                      adam_beta1=0.9, adam_beta2=0.99, adam_eps=1e-8)
    p = np.array([1.0, -2.0])
    var = ad.leaf(p, requires_grad=True)
    opt = AdamW(cfg)

    ref_p = p.copy()
    m = np.zeros(2)
    v = np.zeros(2)
    r = np.random.default_rng(9)
    for t in range(1, 4):
        g = r.normal(size=2)
        opt.step({"p": var}, {"p": g})
        ref_p *= 1.0 - cfg.learning_rate * cfg.weight_decay
        m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
        mhat = m / (1 - cfg.adam_beta1**t)
        vhat = v / (1 - cfg.adam_beta2**t)
        ref_p -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        np.testing.assert_allclose(var.value, ref_p, rtol=1e-12)


def test_adamw_decay_is_decoupled():
    # zero gradient: the only movement is the multiplicative decay
    cfg = TrainConfig(learning_rate=0.5, weight_decay=0.1, trainable="all")
    var = ad.leaf(np.array([8.0]), requires_grad=True)
    AdamW(cfg).step({"p": var}, {"p": np.array([0.0])})
    np.testing.assert_allclose(var.value, [8.0 * (1 - 0.05)], rtol=1e-12)


def _fast_cfg(**kw):
    base = dict(learning_rate=5e-3, epochs=3, batch_size=2, max_seq_len=16,
                trainable="all", seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_pretrain_learns_and_is_deterministic():
    seqs = _corpus(6, seed=11)
    ck1, log1 = pretrain_dense(CFG, seqs, _fast_cfg(), seed=5, model_id="p")
    ck2, _ = pretrain_dense(CFG, seqs, _fast_cfg(), seed=5, model_id="p")
    np.testing.assert_array_equal(ck1.embedding, ck2.embedding)
    np.testing.assert_array_equal(ck1.layers[1].ffn.w_up, ck2.layers[1].ffn.w_up)
    means = log1.epoch_mean("lm_loss")
    assert means[-1] < means[0]
    assert ck1.dtype == np.dtype(F32)
    assert ck1.model_id == "p"
    # 6 sequences in batches of 2 over 3 epochs
    assert len(log1.rows) == 9
    assert log1.meta["trainable"] == "all"


def test_pretrain_requires_all_mode():
    with pytest.raises(ValueError):
        pretrain_dense(CFG, _corpus(), TrainConfig(trainable="router_only"), seed=0, model_id="x")
    with pytest.raises(ValueError):
        pretrain_dense(CFG, [], _fast_cfg(), seed=0, model_id="x")


def test_finetune_moves_from_init():
    init = random_checkpoint(CFG, seed=40, model_id="base")
    tuned, _ = finetune_dense(init, _corpus(4, seed=12), _fast_cfg(), seed=1,
                              model_id="tuned")
    assert tuned.model_id == "tuned"
    assert not np.array_equal(tuned.embedding, init.embedding)
    with pytest.raises(ValueError):
        finetune_dense(init, _corpus(), TrainConfig(trainable="router_only"), seed=0)


def test_finetune_ffn_only_freezes_everything_else():
    init = random_checkpoint(CFG, seed=41, model_id="base")
    tuned, _ = finetune_dense(init, _corpus(4, seed=13),
                              _fast_cfg(trainable="ffn_only"), seed=2)
    np.testing.assert_array_equal(tuned.embedding, init.embedding)
    np.testing.assert_array_equal(tuned.final_gamma, init.final_gamma)
    for lw_t, lw_i in zip(tuned.layers, init.layers):
        np.testing.assert_array_equal(lw_t.attn.w_q, lw_i.attn.w_q)
        np.testing.assert_array_equal(lw_t.attn.w_o, lw_i.attn.w_o)
        np.testing.assert_array_equal(lw_t.attn_gamma, lw_i.attn_gamma)
        np.testing.assert_array_equal(lw_t.ffn_gamma, lw_i.ffn_gamma)
        assert not np.array_equal(lw_t.ffn.w_up, lw_i.ffn.w_up)
        assert not np.array_equal(lw_t.ffn.w_down, lw_i.ffn.w_down)


def test_train_router_moves_only_routers():
    moe = _moe()
    cfg = TrainConfig(learning_rate=1e-2, epochs=2, batch_size=2, max_seq_len=16,
                      lambda_bal=0.01, seed=0)
    trained, log = train_router(moe, _corpus(4, seed=14), cfg)
    before = dict(moe.named_tensors())
    after = dict(trained.named_tensors())
    for name in before:
        if name.endswith(".router"):
            assert not np.array_equal(after[name], before[name]), name
        else:
            np.testing.assert_array_equal(after[name], before[name], err_msg=name)
    assert trained.dtype == moe.dtype
    assert log.n_experts == 3
    for row in log.rows:
        assert len(row.f) == 3
        assert sum(row.f) == pytest.approx(1.0, abs=1e-9)
        assert row.total_loss == pytest.approx(row.lm_loss + cfg.lambda_bal * row.bal_loss,
                                               rel=1e-9)
        assert row.grad_norm_preclip >= 0


def test_train_router_validation():
    moe = _moe()
    with pytest.raises(ValueError):
        train_router(moe, _corpus(), TrainConfig(trainable="all"))
    with pytest.raises(ValueError):
        train_router(moe, [], TrainConfig())


def test_metrics_csv(tmp_path):
    log = MetricsLog(n_experts=2)
    log.rows.append(MetricsRow(epoch=1, step=1, lm_loss=2.5, bal_loss=1.0,
                               total_loss=2.51, f=(0.5, 0.5), grad_norm_preclip=0.3))
    log.rows.append(MetricsRow(epoch=2, step=2, lm_loss=2.0, bal_loss=1.1,
                               total_loss=2.011, f=(0.4, 0.6), grad_norm_preclip=0.2))
    path = tmp_path / "metrics.csv"
    write_metrics_csv(log, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,step,lm_loss,bal_loss,total_loss,f_0,f_1,grad_norm_preclip"
    assert len(lines) == 3
    cells = lines[1].split(",")
    assert float(cells[2]) == 2.5
    assert log.epoch_mean("lm_loss") == [2.5, 2.0]
