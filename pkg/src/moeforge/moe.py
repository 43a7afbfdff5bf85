"""Routed mixture-of-experts assembly and forward pass.

An MoE checkpoint is a fused backbone plus, per layer, N feed-forward
expert blocks and one router matrix. Routing is top-k over a row softmax
of x @ w_g with ties broken toward the lower expert index; selected gate
values are renormalized to sum to one by default. Gradients flow through
gate values and router probabilities but never through the selection
itself.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fusion import BackboneCheckpoint
from .model import (
    DenseCheckpoint,
    FfnWeights,
    TransformerConfig,
    attention_delta,
    causal_mask,
    rope_cache,
    validate_tokens,
)
from .tensorops import F32, ShapeError, softmax_rows, top_k_rows

ROUTER_INIT_STD = 0.02


@dataclass(frozen=True)
class RoutingConfig:
    k: int = 2
    renormalize: bool = True

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoutingConfig":
        return cls(**d)


@dataclass
class MoELayer:
    experts: list[FfnWeights]
    router: np.ndarray


@dataclass
class MoECheckpoint:
    backbone: BackboneCheckpoint
    layers: list[MoELayer]
    routing: RoutingConfig
    provenance: dict = field(default_factory=dict)

    @property
    def config(self) -> TransformerConfig:
        return self.backbone.config

    @property
    def n_experts(self) -> int:
        return len(self.layers[0].experts)

    @property
    def dtype(self) -> np.dtype:
        return self.backbone.dtype

    def validate(self) -> None:
        self.backbone.validate()
        c = self.config
        if len(self.layers) != c.n_layers:
            raise ShapeError("expert layer count does not match config")
        n = len(self.layers[0].experts)
        if n < 1:
            raise ShapeError("need at least one expert")
        for i, ml in enumerate(self.layers):
            if len(ml.experts) != n:
                raise ShapeError(f"layer {i} has {len(ml.experts)} experts, expected {n}")
            for e, ffn in enumerate(ml.experts):
                if np.shape(ffn.w_up) != (c.d_model, c.d_ffn):
                    raise ShapeError(f"layers.{i}.experts.{e}.w_up shape {np.shape(ffn.w_up)}")
                if np.shape(ffn.w_down) != (c.d_ffn, c.d_model):
                    raise ShapeError(f"layers.{i}.experts.{e}.w_down shape {np.shape(ffn.w_down)}")
            if np.shape(ml.router) != (c.d_model, n):
                raise ShapeError(
                    f"layers.{i}.router shape {np.shape(ml.router)}, "
                    f"expected ({c.d_model}, {n})"
                )
        if self.routing.k > n:
            raise ShapeError(f"k={self.routing.k} exceeds expert count {n}")

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = list(self.backbone.named_tensors())
        for i, ml in enumerate(self.layers):
            for e, ffn in enumerate(ml.experts):
                out.append((f"layers.{i}.experts.{e}.w_up", ffn.w_up))
                out.append((f"layers.{i}.experts.{e}.w_down", ffn.w_down))
            out.append((f"layers.{i}.router", ml.router))
        return out

    def astype(self, dtype) -> "MoECheckpoint":
        dtype = np.dtype(dtype)
        return MoECheckpoint(
            backbone=self.backbone.astype(dtype),
            layers=[
                MoELayer(
                    experts=[
                        FfnWeights(f.w_up.astype(dtype), f.w_down.astype(dtype))
                        for f in ml.experts
                    ],
                    router=ml.router.astype(dtype),
                )
                for ml in self.layers
            ],
            routing=self.routing,
            provenance=dict(self.provenance),
        )

    def copy(self) -> "MoECheckpoint":
        return self.astype(self.dtype)


# ---------------------------------------------------------------------------
# routing primitives (inference path)


def router_probs(x: np.ndarray, w_g: np.ndarray) -> np.ndarray:
    """Row-softmax routing probabilities for a [T, d_model] stream."""
    if np.shape(x)[1] != np.shape(w_g)[0]:
        raise ShapeError(f"router shapes differ: {np.shape(x)} @ {np.shape(w_g)}")
    return softmax_rows(np.asarray(x) @ np.asarray(w_g))


def top_k_dispatch(probs: np.ndarray, cfg: RoutingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Selected expert indices and gate values per token.

    Indices come out in descending-probability order, ties to the lower
    index. Gates are the selected probabilities, renormalized to sum to
    one when cfg.renormalize is set.
    """
    probs = np.asarray(probs)
    idx = top_k_rows(probs, cfg.k)
    gates = probs[np.arange(probs.shape[0])[:, None], idx]
    if cfg.renormalize:
        gates = gates / np.sum(gates, axis=1, keepdims=True)
    return idx, gates


def moe_ffn_forward(
    x: np.ndarray, experts: list[FfnWeights], w_g: np.ndarray, cfg: RoutingConfig
) -> np.ndarray:
    """Dense reference of one expert layer on a normalized stream."""
    from .tensorops import silu

    probs = router_probs(x, w_g)
    idx, gates = top_k_dispatch(probs, cfg)
    t = x.shape[0]
    out = np.zeros((t, experts[0].w_down.shape[1]), dtype=np.asarray(x).dtype)
    for e, ffn in enumerate(experts):
        rows = np.nonzero((idx == e).any(axis=1))[0]
        if rows.size == 0:
            continue
        slot = np.argmax(idx[rows] == e, axis=1)
        y = silu(x[rows] @ ffn.w_up) @ ffn.w_down
        out[rows] += y * gates[rows, slot][:, None]
    return out


# ---------------------------------------------------------------------------
# assembly


def assemble_moe(
    backbone: BackboneCheckpoint,
    experts,
    seed: int,
    routing: RoutingConfig | None = None,
    model_ids: list[str] | None = None,
    extra_provenance: dict | None = None,
) -> MoECheckpoint:
    """Install per-source expert blocks onto a backbone with fresh routers.

    experts is one entry per source model, each a per-layer list of
    FfnWeights, installed in source-model order. Every router is drawn
    i.i.d. Gaussian(0, 0.02^2) from a generator seeded with seed, so the
    assembly is a pure function of its inputs.
    """
    routing = routing if routing is not None else RoutingConfig()
    experts = [list(e) for e in experts]
    n = len(experts)
    if n < 1:
        raise ShapeError("no experts to install")
    c = backbone.config
    for e, per_layer in enumerate(experts):
        if len(per_layer) != c.n_layers:
            raise ShapeError(f"expert {e} covers {len(per_layer)} layers, config wants {c.n_layers}")
    if model_ids is None:
        model_ids = [f"expert{e}" for e in range(n)]
    if len(model_ids) != n:
        raise ShapeError("model_ids length does not match expert count")
    if len(set(model_ids)) != n:
        raise ValueError(f"duplicate model ids: {model_ids}")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dtype = backbone.dtype
    layers = [
        MoELayer(
            experts=[
                FfnWeights(experts[e][i].w_up.copy(), experts[e][i].w_down.copy())
                for e in range(n)
            ],
            router=rng.normal(0.0, ROUTER_INIT_STD, size=(c.d_model, n)).astype(dtype),
        )
        for i in range(c.n_layers)
    ]
    provenance = {"source_models": list(model_ids), "router_seed": int(seed)}
    if extra_provenance:
        provenance.update(extra_provenance)
    moe = MoECheckpoint(
        backbone=backbone, layers=layers, routing=routing, provenance=provenance
    )
    moe.validate()
    return moe


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class LayerRouting:
    indices: np.ndarray  # [T, k] int
    gates: np.ndarray  # [T, k]
    probs: np.ndarray  # [T, N] pre-selection probabilities


@dataclass
class RoutingTrace:
    layers: list[LayerRouting]

    @property
    def n_tokens(self) -> int:
        return self.layers[0].indices.shape[0]

    @property
    def n_rows(self) -> int:
        return sum(l.indices.shape[0] for l in self.layers)


def merge_traces(traces: list[RoutingTrace]) -> RoutingTrace:
    n_layers = len(traces[0].layers)
    return RoutingTrace(
        layers=[
            LayerRouting(
                indices=np.concatenate([t.layers[l].indices for t in traces], axis=0),
                gates=np.concatenate([t.layers[l].gates for t in traces], axis=0),
                probs=np.concatenate([t.layers[l].probs for t in traces], axis=0),
            )
            for l in range(n_layers)
        ]
    )


def write_trace_ndjson(trace: RoutingTrace, path) -> None:
    """One record per (token, layer): token_pos, layer, indices, gates."""
    with open(path, "w", encoding="utf-8") as f:
        for t in range(trace.n_tokens):
            for l, lr in enumerate(trace.layers):
                rec = {
                    "token_pos": t,
                    "layer": l,
                    "indices": [int(i) for i in lr.indices[t]],
                    "gates": [float(g) for g in lr.gates[t]],
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class MoeLayerAux:
    probs: ad.Var
    indices: np.ndarray
    gates: ad.Var
    ffn_input: ad.Var


def wrap_moe(moe: MoECheckpoint, trainable: str = "none") -> dict[str, ad.Var]:
    """Var-wrap all tensors; trainable is none, router_only or all."""
    if trainable not in ("none", "router_only", "all"):
        raise ValueError(f"unknown trainable mode {trainable!r}")
    params = {}
    for name, arr in moe.named_tensors():
        if trainable == "all":
            grad = True
        elif trainable == "router_only":
            grad = name.endswith(".router")
        else:
            grad = False
        params[name] = ad.leaf(arr, requires_grad=grad)
    return params


def moe_ffn_graph(
    xn: ad.Var, params: dict[str, ad.Var], layer: int, n_experts: int, routing: RoutingConfig
) -> tuple[ad.Var, ad.Var, np.ndarray, ad.Var]:
    """Expert mixture on a normalized stream; returns (out, probs, idx, gates)."""
    t = np.shape(xn.value)[0]
    probs = ad.softmax_rows(ad.matmul(xn, params[f"layers.{layer}.router"]))
    idx = top_k_rows(probs.value, routing.k)
    selected = ad.gather_cols_per_row(probs, idx)
    gates = ad.div(selected, ad.sum_cols(selected)) if routing.renormalize else selected
    out = None
    for e in range(n_experts):
        rows = np.nonzero((idx == e).any(axis=1))[0]
        if rows.size == 0:
            continue
        slot = np.argmax(idx[rows] == e, axis=1)
        g = ad.reshape(ad.gather_elems(gates, rows, slot), (rows.size, 1))
        xe = ad.gather_rows(xn, rows)
        y = ad.matmul(ad.silu(ad.matmul(xe, params[f"layers.{layer}.experts.{e}.w_up"])),
                      params[f"layers.{layer}.experts.{e}.w_down"])
        contrib = ad.scatter_rows(ad.mul(y, g), rows, t)
        out = contrib if out is None else ad.add(out, contrib)
    return out, probs, idx, gates


def moe_forward_graph(
    params: dict[str, ad.Var],
    config: TransformerConfig,
    routing: RoutingConfig,
    n_experts: int,
    tokens: np.ndarray,
) -> tuple[ad.Var, list[MoeLayerAux]]:
    tokens = validate_tokens(tokens, config)
    t = tokens.size
    dtype = np.asarray(params["embedding"].value).dtype
    cos, sin = rope_cache(t, config.head_dim, config.rope_theta, dtype)
    mask = causal_mask(t, dtype)
    emb = params["embedding"]
    x = ad.gather_rows(emb, tokens)
    aux: list[MoeLayerAux] = []
    for i in range(config.n_layers):
        p = f"layers.{i}"
        xn = ad.rms_norm(x, params[f"{p}.attn_gamma"], config.norm_eps)
        x = ad.add(
            x,
            attention_delta(
                xn,
                params[f"{p}.attn.w_q"],
                params[f"{p}.attn.w_k"],
                params[f"{p}.attn.w_v"],
                params[f"{p}.attn.w_o"],
                config,
                cos,
                sin,
                mask,
            ),
        )
        hn = ad.rms_norm(x, params[f"{p}.ffn_gamma"], config.norm_eps)
        delta, probs, idx, gates = moe_ffn_graph(hn, params, i, n_experts, routing)
        x = ad.add(x, delta)
        aux.append(MoeLayerAux(probs=probs, indices=idx, gates=gates, ffn_input=hn))
    final = ad.rms_norm(x, params["final_gamma"], config.norm_eps)
    logits = ad.matmul(final, ad.transpose(emb))
    return logits, aux


def _trace_from_aux(aux: list[MoeLayerAux]) -> RoutingTrace:
    return RoutingTrace(
        layers=[
            LayerRouting(indices=a.indices, gates=a.gates.value, probs=a.probs.value)
            for a in aux
        ]
    )


def moe_forward(moe: MoECheckpoint, tokens, with_trace: bool = False):
    """Logits for one sequence; optionally the routing trace alongside.

    Tracing records values the forward already computes, so it never
    changes the logits.
    """
    params = wrap_moe(moe)
    logits, aux = moe_forward_graph(params, moe.config, moe.routing, moe.n_experts, tokens)
    if with_trace:
        return logits.value, _trace_from_aux(aux)
    return logits.value


def expert_hidden_states(moe: MoECheckpoint, tokens, layer: int) -> list[np.ndarray]:
    """Every expert's post-SiLU response to the routed stream at one layer.

    The stream is the layer's normalized feed-forward input from the real
    routed forward pass; each expert then sees that same input, routed to
    it or not, which is what expert-similarity comparisons need.
    """
    from .tensorops import silu

    if not 0 <= layer < moe.config.n_layers:
        raise ValueError(f"layer {layer} out of range")
    params = wrap_moe(moe)
    _, aux = moe_forward_graph(params, moe.config, moe.routing, moe.n_experts, tokens)
    xn = aux[layer].ffn_input.value
    return [silu(xn @ ffn.w_up) for ffn in moe.layers[layer].experts]
