"""Representation and behavior diagnostics for merged models.

Linear CKA compares expert activations across three scenarios: the
source dense models on their own forward passes, experts installed
naively into a linearly merged backbone, and the full fused pipeline.
Perplexity and expert-usage summaries cover the behavioral side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import DenseCheckpoint, forward
from .moe import MoECheckpoint, RoutingTrace, moe_forward, moe_forward_graph, wrap_moe
from .tensorops import F64, ShapeError, column_center, silu
from .training import lm_loss


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Feature-space CKA on column-centered data; 0 for degenerate input."""
    x = np.asarray(x, dtype=F64)
    y = np.asarray(y, dtype=F64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"CKA needs matching rows, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ShapeError("CKA needs at least two rows")
    xc = column_center(x)
    yc = column_center(y)
    cross = float(np.linalg.norm(yc.T @ xc, "fro") ** 2)
    nx = float(np.linalg.norm(xc.T @ xc, "fro"))
    ny = float(np.linalg.norm(yc.T @ yc, "fro"))
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return cross / (nx * ny)


def cka_matrix(activations: list[np.ndarray]) -> np.ndarray:
    n = len(activations)
    m = np.zeros((n, n), dtype=F64)
    for i in range(n):
        for j in range(i, n):
            v = linear_cka(activations[i], activations[j])
            m[i, j] = v
            m[j, i] = v
    return m


@dataclass
class CkaReport:
    scenario: str
    layer: int
    matrix: np.ndarray
    mean_offdiagonal: float

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "layer": self.layer,
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "mean_offdiagonal": self.mean_offdiagonal,
        }


SCENARIOS = ("original", "naive_merge", "aligned_merge")


def make_report(scenario: str, layer: int, activations: list[np.ndarray]) -> CkaReport:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if len(activations) < 2:
        raise ValueError("need at least two experts to compare")
    m = cka_matrix(activations)
    off = m[~np.eye(len(activations), dtype=bool)]
    return CkaReport(scenario=scenario, layer=layer, matrix=m, mean_offdiagonal=float(off.mean()))


def moe_expert_activations(
    moe: MoECheckpoint, sequences, layers: tuple[int, ...]
) -> dict[int, list[np.ndarray]]:
    """Per-layer, per-expert post-SiLU responses to the routed stream.

    Every expert sees the same normalized feed-forward input from the
    real forward pass, routed to it or not, pooled over sequences.
    """
    seqs = list(sequences)
    if not seqs:
        raise ValueError("no sequences")
    params = wrap_moe(moe)
    pooled: dict[int, list[list[np.ndarray]]] = {
        l: [[] for _ in range(moe.n_experts)] for l in layers
    }
    for seq in seqs:
        _, aux = moe_forward_graph(params, moe.config, moe.routing, moe.n_experts, seq)
        for l in layers:
            xn = aux[l].ffn_input.value
            for e, ffn in enumerate(moe.layers[l].experts):
                pooled[l][e].append(silu(xn @ ffn.w_up))
    return {
        l: [np.concatenate(chunks, axis=0) for chunks in pooled[l]] for l in layers
    }


def dense_hidden_activations(
    models: list[DenseCheckpoint], sequences, layers: tuple[int, ...]
) -> dict[int, list[np.ndarray]]:
    """Each source model's own feed-forward activations on shared data."""
    from .alignment import collect_activations

    out: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    for model in models:
        acts = collect_activations(model, sequences, layers)
        for l in layers:
            out[l].append(acts[l].data)
    return out


def expert_cka_study(
    source_models: list[DenseCheckpoint],
    naive_moe: MoECheckpoint,
    aligned_moe: MoECheckpoint,
    sequences,
    layers: tuple[int, ...] | None = None,
) -> list[CkaReport]:
    if len(source_models) < 2:
        raise ValueError("need at least two source models")
    if naive_moe.n_experts != len(source_models) or aligned_moe.n_experts != len(source_models):
        raise ValueError("expert count does not match source models")
    if layers is None:
        layers = (naive_moe.config.n_layers - 1,)
    layers = tuple(layers)
    original = dense_hidden_activations(source_models, sequences, layers)
    naive = moe_expert_activations(naive_moe, sequences, layers)
    aligned = moe_expert_activations(aligned_moe, sequences, layers)
    reports = []
    for l in layers:
        reports.append(make_report("original", l, original[l]))
        reports.append(make_report("naive_merge", l, naive[l]))
        reports.append(make_report("aligned_merge", l, aligned[l]))
    return reports


def reports_to_json(reports: list[CkaReport], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in reports], f, sort_keys=True, indent=2)
        f.write("\n")


def reports_to_csv(reports: list[CkaReport], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("scenario,layer,i,j,cka\n")
        for r in reports:
            n = r.matrix.shape[0]
            for i in range(n):
                for j in range(n):
                    f.write(f"{r.scenario},{r.layer},{i},{j},{repr(float(r.matrix[i, j]))}\n")


# ---------------------------------------------------------------------------
# behavioral metrics


def perplexity(model, sequences) -> float:
    """exp of the corpus-pooled per-token negative log likelihood."""
    seqs = [np.asarray(s) for s in sequences]
    if not seqs:
        raise ValueError("empty evaluation corpus")
    total_nll = 0.0
    total_pos = 0
    for seq in seqs:
        logits = moe_forward(model, seq) if isinstance(model, MoECheckpoint) else forward(model, seq)
        n = seq.size - 1
        total_nll += lm_loss(logits, seq[1:]) * n
        total_pos += n
    return float(np.exp(total_nll / total_pos))


@dataclass
class UsageSummary:
    f: np.ndarray  # top-k membership fraction per expert
    gate_mass: np.ndarray  # mean routed gate value per expert

    def to_dict(self) -> dict:
        return {
            "f": [float(v) for v in self.f],
            "gate_mass": [float(v) for v in self.gate_mass],
        }


def expert_usage(trace: RoutingTrace) -> UsageSummary:
    """Selection frequency and gate mass; both sum to one over experts."""
    if not trace.layers or trace.layers[0].indices.shape[0] == 0:
        raise ValueError("empty routing trace")
    n = trace.layers[0].probs.shape[1]
    k = trace.layers[0].indices.shape[1]
    counts = np.zeros(n, dtype=F64)
    mass = np.zeros(n, dtype=F64)
    total_t = 0
    for lr in trace.layers:
        t = lr.indices.shape[0]
        total_t += t
        counts += np.bincount(lr.indices.ravel(), minlength=n)
        np.add.at(mass, lr.indices.ravel(), lr.gates.astype(F64).ravel())
    return UsageSummary(f=counts / (k * total_t), gate_mass=mass / total_t)


def routing_trace_for(moe: MoECheckpoint, sequences) -> RoutingTrace:
    from .moe import merge_traces

    traces = []
    for seq in sequences:
        _, trace = moe_forward(moe, seq, with_trace=True)
        traces.append(trace)
    return merge_traces(traces)
