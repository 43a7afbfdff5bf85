"""Gradient training loops: dense pretraining and router-only tuning.

Both loops share one taped step: forward every sequence in the batch,
pool the losses by position count, run reverse mode, clip the global
gradient norm, apply a decoupled-weight-decay Adam update. Optimization
runs in f64 regardless of checkpoint dtype; the result is cast back, so
untouched tensors round-trip bitwise.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import DenseCheckpoint, TransformerConfig, dense_forward_graph, random_checkpoint, wrap_dense
from .moe import MoECheckpoint, MoeLayerAux, RoutingTrace, moe_forward_graph, wrap_moe
from .tensorops import F32, F64

SHUFFLE_TAG = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 6
    batch_size: int = 2
    max_seq_len: int = 128  # desk cutoff; 2048 at full scale
    lambda_bal: float = 0.01
    max_grad_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    trainable: str = "router_only"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_bal < 0:
            raise ValueError("lambda_bal must be nonnegative")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.max_seq_len < 2:
            raise ValueError("bad loop bounds")
        if self.trainable not in ("router_only", "all", "ffn_only"):
            raise ValueError(f"unknown trainable filter {self.trainable!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricsRow:
    epoch: int
    step: int
    lm_loss: float
    bal_loss: float
    total_loss: float
    f: tuple[float, ...]
    grad_norm_preclip: float


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)
    n_experts: int = 0
    meta: dict = field(default_factory=dict)

    def epoch_mean(self, key: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.rows:
            by_epoch.setdefault(r.epoch, []).append(getattr(r, key))
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_metrics_csv(log: MetricsLog, path) -> None:
    cols = ["epoch", "step", "lm_loss", "bal_loss", "total_loss"]
    cols += [f"f_{i}" for i in range(log.n_experts)]
    cols.append("grad_norm_preclip")
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for r in log.rows:
            vals = [str(r.epoch), str(r.step), repr(r.lm_loss), repr(r.bal_loss), repr(r.total_loss)]
            vals += [repr(x) for x in r.f]
            vals.append(repr(r.grad_norm_preclip))
            f.write(",".join(vals) + "\n")


# ---------------------------------------------------------------------------
# losses


def shift_targets(tokens: np.ndarray) -> np.ndarray:
    """Next-token targets: tokens shifted left by one, length T-1."""
    tokens = np.asarray(tokens)
    if tokens.size < 2:
        raise ValueError("need at least two tokens to form a target")
    return tokens[1:]


def lm_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean next-token cross-entropy; logits has one extra trailing row."""
    logits = np.asarray(logits, dtype=F64)
    targets = np.asarray(targets)
    if logits.shape[0] != targets.size + 1:
        raise ValueError(f"{logits.shape[0]} logit rows for {targets.size} targets")
    z = logits[:-1]
    zmax = np.max(z, axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))
    picked = z[np.arange(targets.size), targets]
    return float(np.mean(lse - picked))


def load_balance_loss(trace: RoutingTrace, n_experts: int, k: int) -> float:
    """N * sum_i f_i P_i, averaged over layers; 1.0 at perfect uniformity."""
    if not trace.layers or trace.layers[0].indices.shape[0] == 0:
        raise ValueError("empty routing trace")
    per_layer = []
    for lr in trace.layers:
        t = lr.indices.shape[0]
        counts = np.bincount(lr.indices.ravel(), minlength=n_experts).astype(F64)
        f = counts / (k * t)
        p = np.mean(lr.probs.astype(F64), axis=0)
        per_layer.append(n_experts * float(np.dot(f, p)))
    return float(np.mean(per_layer))


def _lm_loss_graph(logits: ad.Var, tokens: np.ndarray) -> ad.Var:
    t = np.asarray(tokens).size
    return ad.softmax_xent_mean(ad.slice_rows(logits, 0, t - 1), shift_targets(tokens))


def _bal_loss_graph(aux_per_seq: list[list[MoeLayerAux]], n_experts: int, k: int) -> ad.Var:
    """Batch-pooled balance loss as a graph node; f counts are constants."""
    n_layers = len(aux_per_seq[0])
    total_t = sum(a[0].indices.shape[0] for a in aux_per_seq)
    layer_terms = []
    for l in range(n_layers):
        counts = np.zeros(n_experts, dtype=F64)
        p_acc = None
        for aux in aux_per_seq:
            a = aux[l]
            t = a.indices.shape[0]
            counts += np.bincount(a.indices.ravel(), minlength=n_experts)
            contrib = ad.scale(ad.mean_axis0(a.probs), t / total_t)
            p_acc = contrib if p_acc is None else ad.add(p_acc, contrib)
        f = counts / (k * total_t)
        layer_terms.append(ad.scale(ad.vsum(ad.mul_const(p_acc, f)), float(n_experts)))
    acc = layer_terms[0]
    for term in layer_terms[1:]:
        acc = ad.add(acc, term)
    return ad.scale(acc, 1.0 / n_layers)


def _usage_fractions(aux_per_seq: list[list[MoeLayerAux]], n_experts: int, k: int) -> tuple[float, ...]:
    n_layers = len(aux_per_seq[0])
    total_t = sum(a[0].indices.shape[0] for a in aux_per_seq)
    f = np.zeros(n_experts, dtype=F64)
    for l in range(n_layers):
        for aux in aux_per_seq:
            f += np.bincount(aux[l].indices.ravel(), minlength=n_experts)
    f /= n_layers * k * total_t
    return tuple(float(x) for x in f)


# ---------------------------------------------------------------------------
# optimizer


def collect_gradients(params: dict[str, ad.Var]) -> dict[str, np.ndarray]:
    """Gradients for trainable parameters only, after a backward pass."""
    out = {}
    for name, var in params.items():
        if var.requires_grad:
            if var.grad is None:
                raise ValueError(f"no gradient recorded for {name}")
            out[name] = var.grad
    return out


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=F64) ** 2))
    return float(np.sqrt(total))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so the joint norm is at most max_norm.

    Returns the (possibly rescaled) store and the pre-clip norm.
    """
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


class AdamW:
    """Decoupled-weight-decay Adam; updates parameter arrays in place."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, ad.Var], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.adam_beta1**self.t
        bc2 = 1.0 - c.adam_beta2**self.t
        for name, g in grads.items():
            p = params[name].value
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            p *= 1.0 - c.learning_rate * c.weight_decay
            m *= c.adam_beta1
            m += (1.0 - c.adam_beta1) * g
            v *= c.adam_beta2
            v += (1.0 - c.adam_beta2) * g * g
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


# ---------------------------------------------------------------------------
# loops


def _truncate(seq: np.ndarray, cutoff: int) -> np.ndarray:
    seq = np.asarray(seq)
    return seq[:cutoff] if seq.size > cutoff else seq


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _shuffle_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, SHUFFLE_TAG))))


def train_router(
    moe: MoECheckpoint, calib_sequences: list[np.ndarray], cfg: TrainConfig
) -> tuple[MoECheckpoint, MetricsLog]:
    """Stage-2 tuning: composite loss, router weights the only moving parts."""
    if cfg.trainable != "router_only":
        raise ValueError("train_router requires trainable=router_only")
    if not calib_sequences:
        raise ValueError("empty calibration set")
    in_dtype = moe.dtype
    work = moe.astype(F64)
    params = wrap_moe(work, trainable="router_only")
    n = work.n_experts
    k = work.routing.k
    seqs = [_truncate(s, cfg.max_seq_len) for s in calib_sequences]
    opt = AdamW(cfg)
    rng = _shuffle_rng(cfg.seed)
    log = MetricsLog(n_experts=n, meta={"cutoff": cfg.max_seq_len, "trainable": cfg.trainable})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for batch in _batches(len(seqs), cfg.batch_size, rng):
            step += 1
            lm_acc = None
            aux_per_seq = []
            total_pos = sum(seqs[i].size - 1 for i in batch)
            for i in batch:
                tokens = seqs[i]
                logits, aux = moe_forward_graph(params, work.config, work.routing, n, tokens)
                aux_per_seq.append(aux)
                w = (tokens.size - 1) / total_pos
                contrib = ad.scale(_lm_loss_graph(logits, tokens), w)
                lm_acc = contrib if lm_acc is None else ad.add(lm_acc, contrib)
            bal = _bal_loss_graph(aux_per_seq, n, k)
            total = ad.add(lm_acc, ad.scale(bal, cfg.lambda_bal))
            ad.backward(total)
            grads, preclip = clip_global_norm(collect_gradients(params), cfg.max_grad_norm)
            opt.step(params, grads)
            for var in params.values():
                var.grad = None
            log.rows.append(
                MetricsRow(
                    epoch=epoch,
                    step=step,
                    lm_loss=float(lm_acc.value),
                    bal_loss=float(bal.value),
                    total_loss=float(total.value),
                    f=_usage_fractions(aux_per_seq, n, k),
                    grad_norm_preclip=preclip,
                )
            )
    return work.astype(in_dtype), log


def pretrain_dense(
    config: TransformerConfig,
    sequences: list[np.ndarray],
    cfg: TrainConfig,
    seed: int,
    model_id: str,
    vocab: list[str] | None = None,
) -> tuple[DenseCheckpoint, MetricsLog]:
    """Stage-0: train one model from seeded random init on a corpus."""
    if cfg.trainable != "all":
        raise ValueError("pretraining requires trainable=all")
    init = random_checkpoint(config, seed=seed, model_id=model_id, vocab=vocab)
    return finetune_dense(init, sequences, cfg, seed)


def finetune_dense(
    init: DenseCheckpoint,
    sequences: list[np.ndarray],
    cfg: TrainConfig,
    seed: int,
    model_id: str | None = None,
) -> tuple[DenseCheckpoint, MetricsLog]:
    """Continue training an existing checkpoint on a corpus.

    With trainable=all every tensor moves; with trainable=ffn_only the
    attention, embedding, and norm tensors stay frozen, so the result keeps
    its starting point's residual-stream geometry and differs only where
    the future experts live.
    """
    if cfg.trainable not in ("all", "ffn_only"):
        raise ValueError("dense training requires trainable=all or ffn_only")
    if not sequences:
        raise ValueError("empty corpus")
    config = init.config
    work = init.astype(F64)
    if model_id is not None:
        work.model_id = model_id
    params = wrap_dense(work, trainable=True)
    if cfg.trainable == "ffn_only":
        for name, var in params.items():
            if ".ffn." not in name:
                var.requires_grad = False
    seqs = [_truncate(s, cfg.max_seq_len) for s in sequences]
    opt = AdamW(cfg)
    rng = _shuffle_rng(seed)
    log = MetricsLog(n_experts=0, meta={"cutoff": cfg.max_seq_len, "trainable": cfg.trainable})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for batch in _batches(len(seqs), cfg.batch_size, rng):
            step += 1
            lm_acc = None
            total_pos = sum(seqs[i].size - 1 for i in batch)
            for i in batch:
                tokens = seqs[i]
                logits, _ = dense_forward_graph(params, config, tokens)
                w = (tokens.size - 1) / total_pos
                contrib = ad.scale(_lm_loss_graph(logits, tokens), w)
                lm_acc = contrib if lm_acc is None else ad.add(lm_acc, contrib)
            ad.backward(lm_acc)
            grads, preclip = clip_global_norm(collect_gradients(params), cfg.max_grad_norm)
            opt.step(params, grads)
            for var in params.values():
                var.grad = None
            log.rows.append(
                MetricsRow(
                    epoch=epoch,
                    step=step,
                    lm_loss=float(lm_acc.value),
                    bal_loss=0.0,
                    total_loss=float(lm_acc.value),
                    f=(),
                    grad_norm_preclip=preclip,
                )
            )
    # optimizer steps mutate work's arrays in place via the Var wrappers
    trained = work.astype(F32)
    trained.validate()
    return trained, log
