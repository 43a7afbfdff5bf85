"""Neuron alignment between feed-forward blocks of different checkpoints.

Each source model's experts live in an arbitrary neuron order. On a shared
calibration set we record post-SiLU activations per layer, price every
(anchor neuron, target neuron) pairing by its squared activation distance,
solve the assignment exactly, and permute the target's feed-forward
weights into the anchor's coordinates. The permutation touches only the
hidden dimension, so a remapped block computes the same function as the
original bit for bit up to float re-association.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import assignment
from .model import DenseCheckpoint, FfnWeights, check_compatible, forward_with_trace
from .tensorops import F64, ShapeError

log = logging.getLogger(__name__)


@dataclass
class ActivationMatrix:
    """Post-SiLU hidden states [rows, d_ffn] pooled over calibration tokens."""

    model_id: str
    layer: int
    data: np.ndarray


@dataclass
class CostMatrix:
    data: np.ndarray
    layer: int = -1

    def __post_init__(self) -> None:
        d = np.asarray(self.data)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ShapeError(f"cost matrix must be square, got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("cost matrix has non-finite entries")
        if (d < 0).any():
            raise ValueError("cost matrix has negative entries")
        self.data = d

    @property
    def n(self) -> int:
        return self.data.shape[0]


@dataclass
class Permutation:
    """map[j] = target neuron assigned to anchor slot j."""

    layer: int
    map: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.map, dtype=np.int64)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ValueError("permutation map is not a bijection on 0..n-1")
        self.map = m

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.map, np.arange(self.map.size)))


@dataclass
class AlignmentDiagnostics:
    layer: int
    identity_cost: float
    assigned_cost: float


@dataclass
class AlignmentResult:
    model_id: str
    anchor_id: str
    aligned: list[FfnWeights]
    permutations: list[Permutation]
    diagnostics: list[AlignmentDiagnostics]


def collect_activations(
    model: DenseCheckpoint, calib_sequences, layers=None
) -> dict[int, ActivationMatrix]:
    """Feed-forward activations per layer, concatenated over sequences."""
    if layers is None:
        layers = tuple(range(model.config.n_layers))
    layers = tuple(layers)
    seqs = list(calib_sequences)
    if not seqs:
        raise ValueError("calibration set is empty")
    pooled: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    for seq in seqs:
        _, traces = forward_with_trace(model, seq, layers)
        for l in layers:
            pooled[l].append(traces[l])
    out = {}
    for l in layers:
        data = np.concatenate(pooled[l], axis=0)
        if data.shape[0] < model.config.d_ffn:
            log.warning(
                "layer %d activations have %d rows for %d neurons; "
                "matching may be underdetermined",
                l,
                data.shape[0],
                model.config.d_ffn,
            )
        out[l] = ActivationMatrix(model_id=model.model_id, layer=l, data=data)
    return out


def normalize_activation_columns(a: ActivationMatrix) -> ActivationMatrix:
    """Experimental variant: center columns and scale them to unit norm."""
    x = a.data - np.mean(a.data, axis=0, keepdims=True)
    norms = np.linalg.norm(x, axis=0, keepdims=True)
    norms[norms == 0] = 1.0
    return ActivationMatrix(model_id=a.model_id, layer=a.layer, data=x / norms)


def build_cost_matrix(anchor: ActivationMatrix, target: ActivationMatrix) -> CostMatrix:
    """cost[j, k] = squared distance between anchor column j and target column k.

    Computed as an explicit difference-and-square per anchor column, which
    keeps entries exactly non-negative and exactly zero for bitwise-equal
    columns (the Gram-matrix shortcut loses both under cancellation).
    """
    if anchor.layer != target.layer:
        raise ValueError(f"layer mismatch: {anchor.layer} vs {target.layer}")
    a = np.asarray(anchor.data)
    b = np.asarray(target.data)
    if a.shape != b.shape:
        raise ShapeError(f"activation shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(F64)
    b = b.astype(F64)
    d = a.shape[1]
    cost = np.empty((d, d))
    for j in range(d):
        diff = b - a[:, j : j + 1]
        cost[j] = np.sum(diff * diff, axis=0)
    return CostMatrix(data=cost, layer=anchor.layer)


def assignment_cost(c: CostMatrix, perm: np.ndarray) -> float:
    """Total cost of an explicit assignment; equals the Frobenius gap
    ||A_anchor - A_target[:, perm]||_F^2 when c came from build_cost_matrix."""
    perm = np.asarray(perm)
    return float(c.data[np.arange(c.n), perm].sum())


def solve_lap(c: CostMatrix, backend: str = "auto") -> tuple[Permutation, float]:
    """Exact minimum-cost assignment; lexicographically smallest on ties."""
    p, total = assignment.solve_square(c.data, backend=backend)
    return Permutation(layer=c.layer, map=p), total


def brute_force_lap(c: CostMatrix) -> tuple[Permutation, float]:
    """Independent exhaustive solver for small matrices (oracle path)."""
    p, total = assignment.brute_force_min(c.data)
    return Permutation(layer=c.layer, map=p), total


def apply_permutation_columns(m: np.ndarray, perm: Permutation) -> np.ndarray:
    return np.asarray(m)[:, perm.map]


def remap_ffn(ffn: FfnWeights, perm: Permutation) -> FfnWeights:
    """Reindex a feed-forward block into anchor coordinates.

    Slot j of the result is the target's neuron perm.map[j]: column j of
    w_up and row j of w_down are pure copies, so the block's function is
    unchanged (the hidden sum is merely re-ordered).
    """
    p = perm.map
    if ffn.w_up.shape[1] != p.size or ffn.w_down.shape[0] != p.size:
        raise ShapeError(
            f"permutation of size {p.size} does not fit ffn "
            f"{ffn.w_up.shape}/{ffn.w_down.shape}"
        )
    return FfnWeights(w_up=ffn.w_up[:, p].copy(), w_down=ffn.w_down[p, :].copy())


def align_expert(
    anchor: DenseCheckpoint,
    target: DenseCheckpoint,
    calib_sequences,
    backend: str = "auto",
    normalize: bool = False,
) -> AlignmentResult:
    """Match target feed-forward neurons to the anchor's, layer by layer."""
    check_compatible(anchor, target)
    acts_a = collect_activations(anchor, calib_sequences)
    acts_t = collect_activations(target, calib_sequences)
    aligned: list[FfnWeights] = []
    perms: list[Permutation] = []
    diags: list[AlignmentDiagnostics] = []
    for l in range(anchor.config.n_layers):
        a, t = acts_a[l], acts_t[l]
        if normalize:
            a, t = normalize_activation_columns(a), normalize_activation_columns(t)
        cost = build_cost_matrix(a, t)
        perm, assigned = solve_lap(cost, backend=backend)
        identity = float(np.trace(cost.data))
        diags.append(
            AlignmentDiagnostics(layer=l, identity_cost=identity, assigned_cost=assigned)
        )
        perms.append(perm)
        aligned.append(remap_ffn(target.layers[l].ffn, perm))
    return AlignmentResult(
        model_id=target.model_id,
        anchor_id=anchor.model_id,
        aligned=aligned,
        permutations=perms,
        diagnostics=diags,
    )


def result_to_json_dict(r: AlignmentResult) -> dict:
    return {
        "model_id": r.model_id,
        "anchor_id": r.anchor_id,
        "layers": [{"layer": p.layer, "perm": p.map.tolist()} for p in r.permutations],
        "costs": [
            {
                "layer": d.layer,
                "identity_cost": d.identity_cost,
                "assigned_cost": d.assigned_cost,
            }
            for d in r.diagnostics
        ],
    }


def save_permutations(path, r: AlignmentResult) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(result_to_json_dict(r), f, indent=2, sort_keys=True)
        f.write("\n")


def load_permutations(path) -> tuple[str, str, list[Permutation]]:
    """Read a permutation file back as (model_id, anchor_id, permutations)."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    try:
        perms = [Permutation(layer=e["layer"], map=np.asarray(e["perm"])) for e in doc["layers"]]
        return doc["model_id"], doc["anchor_id"], perms
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed permutation file {path}") from e
