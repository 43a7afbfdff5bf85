"""Checkpoint serialization: a JSON manifest beside a raw tensor blob.

A checkpoint directory holds manifest.json (canonical key order) and
data.bin (the tensors' raw little-endian f32 scalars, concatenated in
manifest order). Identical checkpoints serialize to identical bytes.
Loading validates the full manifest against the blob and the declared
config before any checkpoint object is built; failures raise a distinct
error class per defect and never yield a partial object.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .fusion import BackboneCheckpoint, BackboneLayer
from .model import AttnWeights, DenseCheckpoint, FfnWeights, LayerWeights, TransformerConfig
from .moe import MoECheckpoint, MoELayer, RoutingConfig
from .tensorops import F32, F64

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "data.bin"
_DTYPE_BYTES = {"f32": 4}


class CheckpointError(ValueError):
    pass


class ManifestFormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class RegionOverlapError(CheckpointError):
    pass


class RegionBoundsError(CheckpointError):
    pass


class ShapeConsistencyError(CheckpointError):
    pass


class NonFiniteError(CheckpointError):
    pass


def _kind_of(ckpt) -> str:
    if isinstance(ckpt, MoECheckpoint):
        return "moe"
    if isinstance(ckpt, BackboneCheckpoint):
        return "backbone"
    if isinstance(ckpt, DenseCheckpoint):
        return "dense"
    raise ManifestFormatError(f"unsupported checkpoint type {type(ckpt).__name__}")


def save_checkpoint(ckpt, path) -> None:
    """Write manifest.json + data.bin into the directory at path."""
    kind = _kind_of(ckpt)
    named = ckpt.named_tensors()
    tensors = []
    chunks = []
    offset = 0
    for name, arr in named:
        arr = np.asarray(arr)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name} contains non-finite values")
        raw = arr.astype("<f4").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": [int(s) for s in arr.shape],
                "dtype": "f32",
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": ckpt.config.to_dict(),
        "tensors": tensors,
    }
    if kind == "dense":
        manifest["model_id"] = ckpt.model_id
        manifest["vocab"] = list(ckpt.vocab)
        manifest["provenance"] = {}
    elif kind == "backbone":
        manifest["vocab"] = list(ckpt.vocab)
        manifest["provenance"] = dict(ckpt.provenance)
    else:
        manifest["vocab"] = list(ckpt.backbone.vocab)
        manifest["provenance"] = dict(ckpt.provenance)
        manifest["n_experts"] = ckpt.n_experts
        manifest["routing"] = ckpt.routing.to_dict()
    try:
        text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    except (TypeError, ValueError) as e:
        raise ManifestFormatError(f"provenance is not JSON-serializable: {e}") from e
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write(text)
    with open(os.path.join(path, BLOB_NAME), "wb") as f:
        for raw in chunks:
            f.write(raw)


def _read_manifest(path) -> tuple[dict, bytes]:
    try:
        with open(os.path.join(path, MANIFEST_NAME), "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestFormatError(f"cannot read manifest: {e}") from e
    try:
        with open(os.path.join(path, BLOB_NAME), "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ManifestFormatError(f"cannot read blob: {e}") from e
    return manifest, blob


def _validate_regions(tensors: list, blob_len: int) -> None:
    names = [t.get("name") for t in tensors]
    if len(set(names)) != len(names):
        raise ManifestFormatError("duplicate tensor names")
    for t in tensors:
        name, shape = t["name"], t["shape"]
        if t["dtype"] not in _DTYPE_BYTES:
            raise ManifestFormatError(f"tensor {name} has unknown dtype {t['dtype']!r}")
        n_elem = 1
        for s in shape:
            if not isinstance(s, int) or s < 0:
                raise ManifestFormatError(f"tensor {name} has a bad shape entry")
            n_elem *= s
        expect = n_elem * _DTYPE_BYTES[t["dtype"]]
        if t["byte_length"] != expect:
            raise RegionBoundsError(
                f"tensor {name}: byte_length {t['byte_length']} does not match shape ({expect})"
            )
        if t["byte_offset"] < 0 or t["byte_offset"] + t["byte_length"] > blob_len:
            raise RegionBoundsError(f"tensor {name}: region exceeds blob of {blob_len} bytes")
    ordered = sorted(tensors, key=lambda t: t["byte_offset"])
    for a, b in zip(ordered, ordered[1:]):
        if a["byte_offset"] + a["byte_length"] > b["byte_offset"]:
            raise RegionOverlapError(f"tensors {a['name']} and {b['name']} overlap")


def _extract(tensors: list, blob: bytes, dtype) -> dict[str, np.ndarray]:
    out = {}
    for t in tensors:
        n_elem = int(np.prod(t["shape"], dtype=np.int64)) if t["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n_elem, offset=t["byte_offset"])
        out[t["name"]] = arr.reshape(t["shape"]).astype(dtype)
    return out


class _Arrays:
    """Tensor pool that tracks which names a rebuild consumed."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self._arrays = arrays
        self._unused = set(arrays)

    def take(self, name: str) -> np.ndarray:
        if name not in self._arrays:
            raise ManifestFormatError(f"missing tensor {name}")
        self._unused.discard(name)
        return self._arrays[name]

    def assert_drained(self) -> None:
        if self._unused:
            extra = ", ".join(sorted(self._unused))
            raise ManifestFormatError(f"unexpected tensors in manifest: {extra}")


def _attn(pool: _Arrays, prefix: str) -> AttnWeights:
    return AttnWeights(
        w_q=pool.take(f"{prefix}.w_q"),
        w_k=pool.take(f"{prefix}.w_k"),
        w_v=pool.take(f"{prefix}.w_v"),
        w_o=pool.take(f"{prefix}.w_o"),
    )


def _build_dense(manifest: dict, pool: _Arrays, config: TransformerConfig) -> DenseCheckpoint:
    layers = [
        LayerWeights(
            attn=_attn(pool, f"layers.{i}.attn"),
            ffn=FfnWeights(
                w_up=pool.take(f"layers.{i}.ffn.w_up"),
                w_down=pool.take(f"layers.{i}.ffn.w_down"),
            ),
            attn_gamma=pool.take(f"layers.{i}.attn_gamma"),
            ffn_gamma=pool.take(f"layers.{i}.ffn_gamma"),
        )
        for i in range(config.n_layers)
    ]
    return DenseCheckpoint(
        config=config,
        embedding=pool.take("embedding"),
        layers=layers,
        final_gamma=pool.take("final_gamma"),
        model_id=manifest.get("model_id", ""),
        vocab=list(manifest["vocab"]),
    )


def _build_backbone(manifest: dict, pool: _Arrays, config: TransformerConfig) -> BackboneCheckpoint:
    layers = [
        BackboneLayer(
            attn=_attn(pool, f"layers.{i}.attn"),
            attn_gamma=pool.take(f"layers.{i}.attn_gamma"),
            ffn_gamma=pool.take(f"layers.{i}.ffn_gamma"),
        )
        for i in range(config.n_layers)
    ]
    return BackboneCheckpoint(
        config=config,
        embedding=pool.take("embedding"),
        layers=layers,
        final_gamma=pool.take("final_gamma"),
        vocab=list(manifest["vocab"]),
        provenance=dict(manifest.get("provenance", {})),
    )


def _build_moe(manifest: dict, pool: _Arrays, config: TransformerConfig) -> MoECheckpoint:
    backbone = _build_backbone(manifest, pool, config)
    try:
        n = int(manifest["n_experts"])
        routing = RoutingConfig.from_dict(manifest["routing"])
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestFormatError(f"bad moe manifest fields: {e}") from e
    layers = [
        MoELayer(
            experts=[
                FfnWeights(
                    w_up=pool.take(f"layers.{i}.experts.{e}.w_up"),
                    w_down=pool.take(f"layers.{i}.experts.{e}.w_down"),
                )
                for e in range(n)
            ],
            router=pool.take(f"layers.{i}.router"),
        )
        for i in range(config.n_layers)
    ]
    return MoECheckpoint(
        backbone=backbone,
        layers=layers,
        routing=routing,
        provenance=dict(manifest.get("provenance", {})),
    )


_BUILDERS = {"dense": _build_dense, "backbone": _build_backbone, "moe": _build_moe}


def load_checkpoint(path, dtype=F32, expect_kind: str | None = None):
    """Validate and rebuild the checkpoint stored at path.

    dtype selects the in-memory precision; the blob itself is always f32.
    """
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(F32), np.dtype(F64)):
        raise ValueError("dtype must be f32 or f64")
    manifest, blob = _read_manifest(path)
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise ManifestFormatError("manifest is not a checkpoint manifest")
    if manifest["format_version"] != FORMAT_VERSION:
        raise VersionError(f"unsupported format_version {manifest['format_version']}")
    kind = manifest.get("kind")
    if kind not in _BUILDERS:
        raise ManifestFormatError(f"unknown checkpoint kind {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise ManifestFormatError(f"expected a {expect_kind} checkpoint, found {kind}")
    try:
        tensors = manifest["tensors"]
        config = TransformerConfig.from_dict(manifest["config"])
        vocab = manifest["vocab"]
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestFormatError(f"bad manifest fields: {e}") from e
    if len(vocab) != config.vocab_size:
        raise ShapeConsistencyError(
            f"vocab has {len(vocab)} entries for vocab_size {config.vocab_size}"
        )
    _validate_regions(tensors, len(blob))
    pool = _Arrays(_extract(tensors, blob, dtype))
    try:
        ckpt = _BUILDERS[kind](manifest, pool, config)
        pool.assert_drained()
        ckpt.validate()
    except CheckpointError:
        raise
    except ValueError as e:
        raise ShapeConsistencyError(str(e)) from e
    return ckpt
