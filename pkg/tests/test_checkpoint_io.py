from __future__ import annotations

import json

import numpy as np
import pytest

from moeforge.checkpoint_io import (
    BLOB_NAME,
    MANIFEST_NAME,
    ManifestFormatError,
    NonFiniteError,
    RegionBoundsError,
    RegionOverlapError,
    ShapeConsistencyError,
    VersionError,
    load_checkpoint,
    save_checkpoint,
)
from moeforge.fusion import MergeRecipe, build_backbone
from moeforge.model import TransformerConfig, random_checkpoint
from moeforge.moe import RoutingConfig, assemble_moe
from moeforge.tensorops import F64

CFG = TransformerConfig(
    d_model=8, n_layers=2, n_heads=2, d_ffn=12, vocab_size=17, max_seq_len=16
)


def _dense(seed=1, model_id="m"):
    return random_checkpoint(CFG, seed=seed, model_id=model_id)


def _backbone():
    models = [_dense(1, "a"), _dense(2, "b")]
    return build_backbone(models, MergeRecipe.default(2)), models


def _moe():
    bb, models = _backbone()
    experts = [[lw.ffn for lw in m.layers] for m in models]
    return assemble_moe(bb, experts, seed=5, routing=RoutingConfig(k=1),
                        model_ids=["a", "b"])


def _tensors_equal(a, b):
    na, nb = dict(a.named_tensors()), dict(b.named_tensors())
    assert na.keys() == nb.keys()
    for name in na:
        np.testing.assert_array_equal(na[name], nb[name], err_msg=name)


def test_dense_round_trip_bitwise(tmp_path):
    ck = _dense()
    save_checkpoint(ck, tmp_path / "d")
    back = load_checkpoint(tmp_path / "d", expect_kind="dense")
    _tensors_equal(ck, back)
    assert back.model_id == ck.model_id
    assert back.vocab == ck.vocab
    assert back.config == ck.config


def test_backbone_round_trip_bitwise(tmp_path):
    bb, _ = _backbone()
    save_checkpoint(bb, tmp_path / "b")
    back = load_checkpoint(tmp_path / "b", expect_kind="backbone")
    _tensors_equal(bb, back)
    assert back.provenance == bb.provenance


def test_moe_round_trip_bitwise(tmp_path):
    moe = _moe()
    save_checkpoint(moe, tmp_path / "m")
    back = load_checkpoint(tmp_path / "m", expect_kind="moe")
    _tensors_equal(moe, back)
    assert back.n_experts == 2
    assert back.routing == moe.routing
    assert back.provenance == moe.provenance


def test_two_saves_are_byte_identical(tmp_path):
    ck = _dense()
    save_checkpoint(ck, tmp_path / "one")
    save_checkpoint(ck, tmp_path / "two")
    for name in (MANIFEST_NAME, BLOB_NAME):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_load_resave_identical(tmp_path):
    moe = _moe()
    save_checkpoint(moe, tmp_path / "m")
    save_checkpoint(load_checkpoint(tmp_path / "m"), tmp_path / "m2")
    for name in (MANIFEST_NAME, BLOB_NAME):
        assert (tmp_path / "m" / name).read_bytes() == (tmp_path / "m2" / name).read_bytes()


def test_f64_load_matches_f32_cast(tmp_path):
    ck = _dense()
    save_checkpoint(ck, tmp_path / "d")
    wide = load_checkpoint(tmp_path / "d", dtype=F64)
    assert wide.dtype == np.dtype(F64)
    np.testing.assert_array_equal(wide.embedding, ck.embedding.astype(F64))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "d", dtype=np.int32)


def test_save_rejects_non_finite(tmp_path):
    ck = _dense()
    ck.layers[0].ffn.w_up[0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="w_up"):
        save_checkpoint(ck, tmp_path / "bad")


def _tamper(tmp_path, mutate):
    """Save a dense fixture, edit its manifest dict, write it back."""
    ck = _dense()
    d = tmp_path / "t"
    save_checkpoint(ck, d)
    manifest = json.loads((d / MANIFEST_NAME).read_text())
    mutate(manifest)
    (d / MANIFEST_NAME).write_text(json.dumps(manifest))
    return d


def test_version_mismatch(tmp_path):
    d = _tamper(tmp_path, lambda m: m.update(format_version=99))
    with pytest.raises(VersionError):
        load_checkpoint(d)


def test_overlapping_regions(tmp_path):
    def mutate(m):
        m["tensors"][1]["byte_offset"] = m["tensors"][0]["byte_offset"]

    d = _tamper(tmp_path, mutate)
    with pytest.raises(RegionOverlapError):
        load_checkpoint(d)


def test_region_out_of_bounds(tmp_path):
    def mutate(m):
        m["tensors"][-1]["byte_offset"] += 8

    d = _tamper(tmp_path, mutate)
    with pytest.raises(RegionBoundsError):
        load_checkpoint(d)


def test_truncated_blob_names_tensor(tmp_path):
    ck = _dense()
    d = tmp_path / "t"
    save_checkpoint(ck, d)
    blob = (d / BLOB_NAME).read_bytes()
    (d / BLOB_NAME).write_bytes(blob[:-4])
    with pytest.raises(RegionBoundsError, match="final_gamma"):
        load_checkpoint(d)


def test_byte_length_shape_mismatch(tmp_path):
    def mutate(m):
        m["tensors"][0]["shape"][0] += 1

    d = _tamper(tmp_path, mutate)
    with pytest.raises(RegionBoundsError):
        load_checkpoint(d)


def test_duplicate_tensor_names(tmp_path):
    def mutate(m):
        m["tensors"][1]["name"] = m["tensors"][0]["name"]

    d = _tamper(tmp_path, mutate)
    with pytest.raises(ManifestFormatError):
        load_checkpoint(d)


def test_vocab_config_inconsistency(tmp_path):
    d = _tamper(tmp_path, lambda m: m["vocab"].pop())
    with pytest.raises(ShapeConsistencyError):
        load_checkpoint(d)


def test_unknown_kind(tmp_path):
    d = _tamper(tmp_path, lambda m: m.update(kind="mystery"))
    with pytest.raises(ManifestFormatError):
        load_checkpoint(d)


def test_expect_kind_mismatch(tmp_path):
    ck = _dense()
    save_checkpoint(ck, tmp_path / "d")
    with pytest.raises(ManifestFormatError, match="expected a moe"):
        load_checkpoint(tmp_path / "d", expect_kind="moe")


def test_missing_and_extra_tensors(tmp_path):
    def drop(m):
        m["tensors"] = [t for t in m["tensors"] if t["name"] != "final_gamma"]

    d = _tamper(tmp_path, drop)
    with pytest.raises(ManifestFormatError, match="final_gamma"):
        load_checkpoint(d)

    def rename(m):
        m["tensors"][-1]["name"] = "stowaway"

    d2 = _tamper(tmp_path.joinpath("x"), rename)
    with pytest.raises(ManifestFormatError):
        load_checkpoint(d2)


def test_moe_router_width_inconsistency(tmp_path):
    # a router whose column count disagrees with the expert count must be
    # rejected at load even though every byte region is internally valid
    moe = _moe()
    for ml in moe.layers:
        ml.router = ml.router[:, :1]
    save_checkpoint(moe, tmp_path / "m")
    with pytest.raises(ShapeConsistencyError):
        load_checkpoint(tmp_path / "m")


def test_garbage_manifest(tmp_path):
    d = tmp_path / "g"
    d.mkdir()
    (d / MANIFEST_NAME).write_text("not json at all {")
    (d / BLOB_NAME).write_bytes(b"")
    with pytest.raises(ManifestFormatError):
        load_checkpoint(d)
    with pytest.raises(ManifestFormatError):
        load_checkpoint(tmp_path / "missing")
