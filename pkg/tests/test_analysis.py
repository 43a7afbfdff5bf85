from __future__ import annotations

import json

import numpy as np
import pytest

from moeforge.analysis import (
    SCENARIOS,
    cka_matrix,
    expert_cka_study,
    expert_usage,
    linear_cka,
    make_report,
    perplexity,
    reports_to_csv,
    reports_to_json,
    routing_trace_for,
)
from moeforge.corpus import gen_corpus
from moeforge.fusion import MergeRecipe, build_backbone
from moeforge.model import TransformerConfig, forward, random_checkpoint
from moeforge.moe import (
    LayerRouting,
    RoutingConfig,
    RoutingTrace,
    assemble_moe,
    moe_forward,
)
from moeforge.tensorops import ShapeError
from moeforge.training import lm_loss

CFG = TransformerConfig(
    d_model=8, n_layers=2, n_heads=2, d_ffn=10, vocab_size=256, max_seq_len=32
)


def _xy(seed=0, n=40, d=6):
    r = np.random.default_rng(seed)
    return r.normal(size=(n, d)), r.normal(size=(n, d))


def test_cka_self_similarity_is_one():
    x, _ = _xy()
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-5)


def test_cka_scaling_invariance():
    x, y = _xy(1)
    base = linear_cka(x, y)
    assert linear_cka(x, 3.7 * y) == pytest.approx(base, abs=1e-5)
    assert linear_cka(0.01 * x, y) == pytest.approx(base, abs=1e-5)


def test_cka_orthogonal_invariance():
    x, y = _xy(2)
    q, _ = np.linalg.qr(np.random.default_rng(3).normal(size=(y.shape[1],) * 2))
    assert linear_cka(x, y @ q) == pytest.approx(linear_cka(x, y), abs=1e-5)


def test_cka_translation_invariance():
    x, y = _xy(4)
    shifted = y + np.random.default_rng(5).normal(size=(1, y.shape[1]))
    assert linear_cka(x, shifted) == pytest.approx(linear_cka(x, y), abs=1e-10)


def test_cka_bounded_and_degenerate():
    for seed in range(20):
        x, y = _xy(seed, n=15, d=4)
        v = linear_cka(x, y)
        assert -1e-12 <= v <= 1.0 + 1e-12
    x, _ = _xy(6)
    assert linear_cka(x, np.ones((40, 3))) == 0.0


def test_cka_matches_centered_gram_formulation():
    # independent derivation through Gram matrices and the centering
    # projector rather than feature cross-covariances
    x, y = _xy(7, n=25, d=5)
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    kc = h @ (x @ x.T) @ h
    lc = h @ (y @ y.T) @ h
    want = np.trace(kc @ lc) / np.sqrt(np.trace(kc @ kc) * np.trace(lc @ lc))
    assert linear_cka(x, y) == pytest.approx(float(want), rel=1e-10)


def test_cka_validation():
    x, y = _xy(8)
    with pytest.raises(ShapeError):
        linear_cka(x, y[:-1])
    with pytest.raises(ShapeError):
        linear_cka(x[0], y[0])
    with pytest.raises(ShapeError):
        linear_cka(x[:1], y[:1])


def test_cka_matrix_symmetry():
    acts = [np.random.default_rng(i).normal(size=(30, 5)) for i in range(3)]
    m = cka_matrix(acts)
    np.testing.assert_allclose(m, m.T)
    np.testing.assert_allclose(np.diag(m), 1.0, atol=1e-9)


def test_make_report_offdiagonal_mean():
    acts = [np.random.default_rng(10 + i).normal(size=(30, 5)) for i in range(3)]
    rep = make_report("original", 1, acts)
    m = rep.matrix
    want = (m[0, 1] + m[0, 2] + m[1, 0] + m[1, 2] + m[2, 0] + m[2, 1]) / 6
    assert rep.mean_offdiagonal == pytest.approx(want, rel=1e-12)
    assert rep.scenario == "original"
    assert rep.layer == 1
    d = rep.to_dict()
    json.dumps(d)
    assert len(d["matrix"]) == 3
    with pytest.raises(ValueError):
        make_report("mystery", 0, acts)
    with pytest.raises(ValueError):
        make_report("original", 0, acts[:1])


def _study_fixture():
    models = [random_checkpoint(CFG, seed=60 + i, model_id=f"m{i}") for i in range(2)]
    seqs = gen_corpus("general", seed=1, n_sequences=3, seq_len=24)
    experts = [[lw.ffn for lw in m.layers] for m in models]
    naive_bb = build_backbone(
        models, MergeRecipe(weights=(0.5, 0.5), attention_strategy="linear",
                            embedding_strategy="linear")
    )
    fused_bb = build_backbone(models, MergeRecipe.default(2))
    naive = assemble_moe(naive_bb, experts, seed=2, model_ids=["m0", "m1"])
    aligned = assemble_moe(fused_bb, experts, seed=2, model_ids=["m0", "m1"])
    return models, naive, aligned, seqs


def test_expert_cka_study_defaults_to_last_layer():
    models, naive, aligned, seqs = _study_fixture()
    reports = expert_cka_study(models, naive, aligned, seqs)
    assert [r.scenario for r in reports] == list(SCENARIOS)
    assert all(r.layer == CFG.n_layers - 1 for r in reports)
    assert all(r.matrix.shape == (2, 2) for r in reports)

    both = expert_cka_study(models, naive, aligned, seqs, layers=(0, 1))
    assert [(r.scenario, r.layer) for r in both] == [
        ("original", 0), ("naive_merge", 0), ("aligned_merge", 0),
        ("original", 1), ("naive_merge", 1), ("aligned_merge", 1),
    ]


def test_expert_cka_study_validation():
    models, naive, aligned, seqs = _study_fixture()
    with pytest.raises(ValueError):
        expert_cka_study(models[:1], naive, aligned, seqs)
    three = models + [random_checkpoint(CFG, seed=99, model_id="m2")]
    with pytest.raises(ValueError):
        expert_cka_study(three, naive, aligned, seqs)


def test_report_files(tmp_path):
    models, naive, aligned, seqs = _study_fixture()
    reports = expert_cka_study(models, naive, aligned, seqs)
    jpath = tmp_path / "cka.json"
    reports_to_json(reports, jpath)
    doc = json.loads(jpath.read_text())
    assert len(doc) == 3
    assert {d["scenario"] for d in doc} == set(SCENARIOS)
    cpath = tmp_path / "cka.csv"
    reports_to_csv(reports, cpath)
    lines = cpath.read_text().strip().splitlines()
    assert lines[0] == "scenario,layer,i,j,cka"
    assert len(lines) == 1 + 3 * 4
    row = lines[1].split(",")
    assert row[0] == "original" and float(row[4]) == pytest.approx(1.0, abs=1e-9)


def test_perplexity_uniform_model_is_vocab_size():
    m = random_checkpoint(CFG, seed=70, model_id="z")
    m.embedding[:] = 0.0
    seqs = gen_corpus("math", seed=2, n_sequences=3, seq_len=24)
    assert perplexity(m, seqs) == pytest.approx(CFG.vocab_size, rel=1e-6)


def test_perplexity_matches_manual_pooling():
    m = random_checkpoint(CFG, seed=71, model_id="m")
    seqs = gen_corpus("code", seed=3, n_sequences=3, seq_len=24)
    total_nll, total_pos = 0.0, 0
    for s in seqs:
        total_nll += lm_loss(forward(m, s), s[1:]) * (s.size - 1)
        total_pos += s.size - 1
    want = float(np.exp(total_nll / total_pos))
    assert perplexity(m, seqs) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        perplexity(m, [])


def test_perplexity_accepts_moe():
    models, naive, aligned, seqs = _study_fixture()
    v = perplexity(aligned, seqs)
    assert np.isfinite(v) and v > 1.0


def test_expert_usage_golden():
    idx = np.array([[0, 1], [0, 2], [0, 1]])
    gates = np.array([[0.9, 0.1], [0.5, 0.5], [0.6, 0.4]])
    probs = np.full((3, 3), 1 / 3)
    trace = RoutingTrace(layers=[LayerRouting(indices=idx, gates=gates, probs=probs)])
    u = expert_usage(trace)
    np.testing.assert_allclose(u.f, [3 / 6, 2 / 6, 1 / 6])
    np.testing.assert_allclose(u.gate_mass, [(0.9 + 0.5 + 0.6) / 3, (0.1 + 0.4) / 3, 0.5 / 3])
    assert u.f.sum() == pytest.approx(1.0)
    assert u.gate_mass.sum() == pytest.approx(1.0)
    json.dumps(u.to_dict())
    with pytest.raises(ValueError):
        expert_usage(RoutingTrace(layers=[]))


def test_routing_trace_for_pools_sequences():
    _, _, aligned, seqs = _study_fixture()
    trace = routing_trace_for(aligned, seqs)
    assert trace.n_tokens == sum(len(s) for s in seqs)
    _, first = moe_forward(aligned, seqs[0], with_trace=True)
    np.testing.assert_array_equal(
        trace.layers[0].indices[: len(seqs[0])], first.layers[0].indices
    )
    u = expert_usage(trace)
    assert u.f.shape == (2,)
