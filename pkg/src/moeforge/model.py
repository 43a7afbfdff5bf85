"""Decoder-only transformer restricted to the surface the merges touch.

Pre-norm residual blocks: attention over an RMS-normed stream, then a
two-matrix SiLU feed-forward block. Scale-only RMSNorm, rotary position
encoding on query/key, no biases anywhere, and the output head is tied to
the embedding. The rotary cos/sin tables are derived from the config at
call time and are never part of a checkpoint.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tensorops import F32, F64, ShapeError


class IncompatibleModelsError(ValueError):
    """Checkpoints disagree on architecture where they must match."""


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_ffn: int
    vocab_size: int
    max_seq_len: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("d_model", "n_layers", "n_heads", "d_ffn", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary pairs")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ValueError("rope_theta and norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**d)


DESK_CONFIG = TransformerConfig(
    d_model=64, n_layers=2, n_heads=4, d_ffn=128, vocab_size=256, max_seq_len=128
)


@dataclass
class AttnWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class FfnWeights:
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class LayerWeights:
    attn: AttnWeights
    ffn: FfnWeights
    attn_gamma: np.ndarray
    ffn_gamma: np.ndarray


def _check_shape(arr: np.ndarray, shape: tuple, name: str) -> None:
    if np.shape(arr) != shape:
        raise ShapeError(f"{name} has shape {np.shape(arr)}, expected {shape}")


@dataclass
class DenseCheckpoint:
    config: TransformerConfig
    embedding: np.ndarray
    layers: list[LayerWeights]
    final_gamma: np.ndarray
    model_id: str
    vocab: list[str]

    def validate(self) -> None:
        c = self.config
        _check_shape(self.embedding, (c.vocab_size, c.d_model), "embedding")
        _check_shape(self.final_gamma, (c.d_model,), "final_gamma")
        if len(self.layers) != c.n_layers:
            raise ShapeError(f"{len(self.layers)} layers, config says {c.n_layers}")
        for i, lw in enumerate(self.layers):
            for n in ("w_q", "w_k", "w_v", "w_o"):
                _check_shape(getattr(lw.attn, n), (c.d_model, c.d_model), f"layers.{i}.attn.{n}")
            _check_shape(lw.ffn.w_up, (c.d_model, c.d_ffn), f"layers.{i}.ffn.w_up")
            _check_shape(lw.ffn.w_down, (c.d_ffn, c.d_model), f"layers.{i}.ffn.w_down")
            _check_shape(lw.attn_gamma, (c.d_model,), f"layers.{i}.attn_gamma")
            _check_shape(lw.ffn_gamma, (c.d_model,), f"layers.{i}.ffn_gamma")
        if len(self.vocab) != c.vocab_size:
            raise ValueError(f"vocab has {len(self.vocab)} entries, config says {c.vocab_size}")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocab tokens must be unique")

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("embedding", self.embedding)]
        for i, lw in enumerate(self.layers):
            p = f"layers.{i}"
            out += [
                (f"{p}.attn.w_q", lw.attn.w_q),
                (f"{p}.attn.w_k", lw.attn.w_k),
                (f"{p}.attn.w_v", lw.attn.w_v),
                (f"{p}.attn.w_o", lw.attn.w_o),
                (f"{p}.ffn.w_up", lw.ffn.w_up),
                (f"{p}.ffn.w_down", lw.ffn.w_down),
                (f"{p}.attn_gamma", lw.attn_gamma),
                (f"{p}.ffn_gamma", lw.ffn_gamma),
            ]
        out.append(("final_gamma", self.final_gamma))
        return out

    def astype(self, dtype) -> "DenseCheckpoint":
        dtype = np.dtype(dtype)
        return DenseCheckpoint(
            config=self.config,
            embedding=self.embedding.astype(dtype),
            layers=[
                LayerWeights(
                    attn=AttnWeights(
                        lw.attn.w_q.astype(dtype),
                        lw.attn.w_k.astype(dtype),
                        lw.attn.w_v.astype(dtype),
                        lw.attn.w_o.astype(dtype),
                    ),
                    ffn=FfnWeights(lw.ffn.w_up.astype(dtype), lw.ffn.w_down.astype(dtype)),
                    attn_gamma=lw.attn_gamma.astype(dtype),
                    ffn_gamma=lw.ffn_gamma.astype(dtype),
                )
                for lw in self.layers
            ],
            final_gamma=self.final_gamma.astype(dtype),
            model_id=self.model_id,
            vocab=list(self.vocab),
        )


def check_compatible(a, b) -> None:
    """Raise unless two checkpoints share architecture and dtype."""
    if a.config != b.config:
        raise IncompatibleModelsError(f"configs differ: {a.config} vs {b.config}")
    if a.dtype != b.dtype:
        raise IncompatibleModelsError(f"dtypes differ: {a.dtype} vs {b.dtype}")


def default_vocab(vocab_size: int) -> list[str]:
    return [f"tok{i}" for i in range(vocab_size)]


def random_checkpoint(
    config: TransformerConfig,
    seed: int,
    model_id: str = "",
    vocab: list[str] | None = None,
    init_std: float = 0.02,
    dtype=F32,
) -> DenseCheckpoint:
    """Fresh checkpoint with Gaussian weights and unit norm scales."""
    dtype = np.dtype(dtype)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def w(*shape):
        return rng.normal(0.0, init_std, size=shape).astype(dtype)

    layers = [
        LayerWeights(
            attn=AttnWeights(
                w(config.d_model, config.d_model),
                w(config.d_model, config.d_model),
                w(config.d_model, config.d_model),
                w(config.d_model, config.d_model),
            ),
            ffn=FfnWeights(w(config.d_model, config.d_ffn), w(config.d_ffn, config.d_model)),
            attn_gamma=np.ones(config.d_model, dtype=dtype),
            ffn_gamma=np.ones(config.d_model, dtype=dtype),
        )
        for _ in range(config.n_layers)
    ]
    ckpt = DenseCheckpoint(
        config=config,
        embedding=w(config.vocab_size, config.d_model),
        layers=layers,
        final_gamma=np.ones(config.d_model, dtype=dtype),
        model_id=model_id or f"rand{seed}",
        vocab=vocab if vocab is not None else default_vocab(config.vocab_size),
    )
    ckpt.validate()
    return ckpt


# ---------------------------------------------------------------------------
# forward pass


def rope_cache(n_positions: int, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [n_positions, head_dim // 2]."""
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(0, half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(n_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    dtype = np.dtype(dtype)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def causal_mask(n: int, dtype) -> np.ndarray:
    mask = np.zeros((n, n), dtype=np.dtype(dtype))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def validate_tokens(tokens, config: TransformerConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a non-empty 1-d sequence")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be integers")
    if tokens.size > config.max_seq_len:
        raise ValueError(f"sequence of {tokens.size} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token id out of range for vocab of {config.vocab_size}")
    return tokens


def wrap_dense(ckpt: DenseCheckpoint, trainable: bool = False) -> dict[str, ad.Var]:
    return {name: ad.leaf(arr, requires_grad=trainable) for name, arr in ckpt.named_tensors()}


def attention_delta(
    xn: ad.Var,
    w_q: ad.Var,
    w_k: ad.Var,
    w_v: ad.Var,
    w_o: ad.Var,
    config: TransformerConfig,
    cos: np.ndarray,
    sin: np.ndarray,
    mask: np.ndarray,
) -> ad.Var:
    """Multi-head causal attention on an already-normalized stream."""
    q = ad.matmul(xn, w_q)
    k = ad.matmul(xn, w_k)
    v = ad.matmul(xn, w_v)
    hd = config.head_dim
    inv_scale = 1.0 / np.sqrt(hd)
    heads = []
    for h in range(config.n_heads):
        j0, j1 = h * hd, (h + 1) * hd
        qh = ad.rope_rotate(ad.slice_cols(q, j0, j1), cos, sin)
        kh = ad.rope_rotate(ad.slice_cols(k, j0, j1), cos, sin)
        vh = ad.slice_cols(v, j0, j1)
        scores = ad.add_const(ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_scale), mask)
        heads.append(ad.matmul(ad.softmax_rows(scores), vh))
    return ad.matmul(ad.concat_cols(heads), w_o)


def ffn_delta(xn: ad.Var, w_up: ad.Var, w_down: ad.Var) -> tuple[ad.Var, ad.Var]:
    """SiLU feed-forward block; also returns the post-SiLU hidden state."""
    hidden = ad.silu(ad.matmul(xn, w_up))
    return ad.matmul(hidden, w_down), hidden


def dense_forward_graph(
    params: dict[str, ad.Var],
    config: TransformerConfig,
    tokens: np.ndarray,
    trace_layers: tuple[int, ...] = (),
) -> tuple[ad.Var, dict[int, ad.Var]]:
    tokens = validate_tokens(tokens, config)
    t = tokens.size
    dtype = np.asarray(params["embedding"].value).dtype
    cos, sin = rope_cache(t, config.head_dim, config.rope_theta, dtype)
    mask = causal_mask(t, dtype)
    emb = params["embedding"]
    x = ad.gather_rows(emb, tokens)
    traces: dict[int, ad.Var] = {}
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
        delta, hidden = ffn_delta(hn, params[f"{p}.ffn.w_up"], params[f"{p}.ffn.w_down"])
        x = ad.add(x, delta)
        if i in trace_layers:
            traces[i] = hidden
    final = ad.rms_norm(x, params["final_gamma"], config.norm_eps)
    logits = ad.matmul(final, ad.transpose(emb))
    return logits, traces


def forward(ckpt: DenseCheckpoint, tokens) -> np.ndarray:
    """Logits [T, vocab_size] for one token sequence."""
    params = wrap_dense(ckpt)
    logits, _ = dense_forward_graph(params, ckpt.config, tokens)
    return logits.value


def forward_with_trace(
    ckpt: DenseCheckpoint, tokens, layers
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Logits plus post-SiLU feed-forward activations at the given layers.

    Tracing only records values the plain forward already computes, so the
    logits are bit-identical to forward().
    """
    layers = tuple(layers)
    for l in layers:
        if not 0 <= l < ckpt.config.n_layers:
            raise ValueError(f"layer {l} out of range for {ckpt.config.n_layers} layers")
    params = wrap_dense(ckpt)
    logits, traces = dense_forward_graph(params, ckpt.config, tokens, trace_layers=layers)
    return logits.value, {l: h.value for l, h in traces.items()}
