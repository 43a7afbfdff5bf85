"""Stage-1 backbone construction.

Merges attention projections, norm scales and embeddings from several
source checkpoints into one shared non-expert skeleton. Attention weights
combine on the hypersphere (spherical interpolation, pairwise over an
explicit reduction tree); norm scales combine linearly; embeddings merge
per token with weights renormalized over the models that actually carry
the token. Feed-forward blocks are deliberately left out: they become the
experts.
"""

from __future__ import annotations

import ast
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import (
    AttnWeights,
    DenseCheckpoint,
    IncompatibleModelsError,
    TransformerConfig,
    check_compatible,
)

log = logging.getLogger(__name__)

SLERP_DOT_THRESHOLD = 0.9995

# a reduction tree is an int leaf (model index) or a pair of subtrees
Tree = "int | tuple"


class MergeError(ValueError):
    pass


class DegenerateTensorError(MergeError):
    """A tensor with zero norm cannot be placed on the hypersphere."""


def balanced_tree(indices: list[int]):
    if len(indices) == 1:
        return indices[0]
    mid = (len(indices) + 1) // 2
    return (balanced_tree(indices[:mid]), balanced_tree(indices[mid:]))


def tree_leaves(tree) -> list[int]:
    if isinstance(tree, int):
        return [tree]
    if isinstance(tree, tuple) and len(tree) == 2:
        return tree_leaves(tree[0]) + tree_leaves(tree[1])
    raise MergeError(f"malformed reduction tree node: {tree!r}")


@dataclass
class MergeRecipe:
    weights: tuple[float, ...]
    anchor_index: int = 0
    slerp_dot_threshold: float = SLERP_DOT_THRESHOLD
    attention_strategy: str = "slerp"
    embedding_strategy: str = "selective"
    reduction_order: object = None

    def __post_init__(self) -> None:
        self.weights = tuple(float(w) for w in self.weights)
        n = len(self.weights)
        if n < 1:
            raise MergeError("recipe needs at least one weight")
        if any(w < 0 for w in self.weights):
            raise MergeError("weights must be non-negative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise MergeError(f"weights must sum to 1, got {sum(self.weights)}")
        if not 0 <= self.anchor_index < n:
            raise MergeError(f"anchor_index {self.anchor_index} out of range for {n} models")
        if self.attention_strategy not in ("slerp", "linear"):
            raise MergeError(f"unknown attention strategy {self.attention_strategy!r}")
        if self.embedding_strategy not in ("selective", "linear"):
            raise MergeError(f"unknown embedding strategy {self.embedding_strategy!r}")
        if not 0 < self.slerp_dot_threshold <= 1:
            raise MergeError("slerp_dot_threshold must be in (0, 1]")
        if self.reduction_order is None:
            self.reduction_order = balanced_tree(list(range(n)))
        if sorted(tree_leaves(self.reduction_order)) != list(range(n)):
            raise MergeError(
                f"reduction tree leaves {tree_leaves(self.reduction_order)} "
                f"must cover model indices 0..{n - 1} exactly once"
            )

    @property
    def n_models(self) -> int:
        return len(self.weights)

    @classmethod
    def default(cls, n_models: int, anchor_index: int = 0) -> "MergeRecipe":
        return cls(weights=(1.0 / n_models,) * n_models, anchor_index=anchor_index)

    def to_dict(self) -> dict:
        return {
            "weights": list(self.weights),
            "anchor_index": self.anchor_index,
            "slerp_dot_threshold": self.slerp_dot_threshold,
            "attention_strategy": self.attention_strategy,
            "embedding_strategy": self.embedding_strategy,
            "reduction_order": repr(self.reduction_order),
        }

    def to_text(self) -> str:
        lines = [
            f"weights = {', '.join(repr(w) for w in self.weights)}",
            f"anchor_index = {self.anchor_index}",
            f"slerp_dot_threshold = {self.slerp_dot_threshold!r}",
            f"attention_strategy = {self.attention_strategy}",
            f"embedding_strategy = {self.embedding_strategy}",
            f"reduction_order = {self.reduction_order!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_text(cls, text: str) -> "MergeRecipe":
        """Parse the plain key = value recipe format.

        Lines are ``key = value``; blank lines and # comments are skipped.
        ``weights`` is a comma list, ``reduction_order`` a nested tuple
        expression such as ((0, 1), (2, 3)).
        """
        fields: dict = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise MergeError(f"recipe line {lineno} is not key = value: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "weights":
                fields["weights"] = tuple(float(x) for x in val.split(","))
            elif key == "anchor_index":
                fields["anchor_index"] = int(val)
            elif key == "slerp_dot_threshold":
                fields["slerp_dot_threshold"] = float(val)
            elif key in ("attention_strategy", "embedding_strategy"):
                fields[key] = val
            elif key == "reduction_order":
                try:
                    fields["reduction_order"] = ast.literal_eval(val)
                except (ValueError, SyntaxError) as e:
                    raise MergeError(f"bad reduction_order expression: {val!r}") from e
            else:
                raise MergeError(f"unknown recipe key {key!r} on line {lineno}")
        if "weights" not in fields:
            raise MergeError("recipe is missing the weights line")
        return cls(**fields)

    @classmethod
    def from_file(cls, path) -> "MergeRecipe":
        with open(path, "r", encoding="utf-8") as f:
            return cls.parse_text(f.read())


# ---------------------------------------------------------------------------
# merge primitives


def slerp(w1: np.ndarray, w2: np.ndarray, t: float, dot_threshold: float = SLERP_DOT_THRESHOLD) -> np.ndarray:
    """Spherical interpolation between two same-shape tensors.

    The angle comes from the flattened unit vectors; near-colinear inputs
    (|cos| above dot_threshold) fall back to linear interpolation, which
    also keeps the endpoints bit-exact.
    """
    w1 = np.asarray(w1)
    w2 = np.asarray(w2)
    if w1.shape != w2.shape:
        raise MergeError(f"slerp shapes differ: {w1.shape} vs {w2.shape}")
    if not 0.0 <= t <= 1.0:
        raise MergeError(f"interpolation parameter t={t} outside [0, 1]")
    f1 = w1.ravel().astype(np.float64)
    f2 = w2.ravel().astype(np.float64)
    n1 = np.linalg.norm(f1)
    n2 = np.linalg.norm(f2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateTensorError("slerp input has zero norm")
    c = float(np.clip(np.dot(f1 / n1, f2 / n2), -1.0, 1.0))
    if abs(c) > dot_threshold:
        return (1.0 - t) * w1 + t * w2
    omega = np.arccos(c)
    so = np.sin(omega)
    a = float(np.sin((1.0 - t) * omega) / so)
    b = float(np.sin(t * omega) / so)
    return a * w1 + b * w2


def nary_slerp(tensors, weights, order=None, dot_threshold: float = SLERP_DOT_THRESHOLD) -> np.ndarray:
    """Weighted spherical merge of N tensors over a pairwise reduction tree.

    Each internal node interpolates its children with t equal to the right
    child's share of the combined weight mass, so for two tensors this is
    exactly slerp(w1, w2, t=weight2).
    """
    tensors = list(tensors)
    weights = [float(w) for w in weights]
    if len(tensors) < 2:
        raise MergeError("nary_slerp needs at least two tensors")
    if len(tensors) != len(weights):
        raise MergeError(f"{len(tensors)} tensors but {len(weights)} weights")
    if order is None:
        order = balanced_tree(list(range(len(tensors))))
    if sorted(tree_leaves(order)) != list(range(len(tensors))):
        raise MergeError("reduction tree does not cover the tensor indices")

    def reduce(node):
        if isinstance(node, int):
            return tensors[node], weights[node]
        (left, ml), (right, mr) = reduce(node[0]), reduce(node[1])
        total = ml + mr
        t = mr / total if total > 0 else 0.5
        return slerp(left, right, t, dot_threshold), total

    merged, _ = reduce(order)
    return merged


def linear_merge(tensors, weights) -> np.ndarray:
    tensors = list(tensors)
    weights = [float(w) for w in weights]
    if not tensors or len(tensors) != len(weights):
        raise MergeError("linear_merge needs matching tensors and weights")
    shape = np.shape(tensors[0])
    for t in tensors[1:]:
        if np.shape(t) != shape:
            raise MergeError("linear_merge shapes differ")
    out = weights[0] * np.asarray(tensors[0])
    for w, t in zip(weights[1:], tensors[1:]):
        out = out + w * np.asarray(t)
    return out


def selective_embedding_merge(
    embeddings, vocabs, weights, anchor_index: int = 0
) -> tuple[np.ndarray, list[str]]:
    """Union-vocabulary embedding merge.

    Row order: the anchor's vocabulary first, then each other model's
    novel tokens in model order, sorted lexically within a model. A token
    carried by one model keeps its row bit for bit; a shared token gets
    the weighted average with weights renormalized over the carriers.
    Carriers whose weights sum to zero average uniformly instead.
    """
    embeddings = [np.asarray(e) for e in embeddings]
    vocabs = [list(v) for v in vocabs]
    weights = [float(w) for w in weights]
    n = len(embeddings)
    if not (n == len(vocabs) == len(weights)) or n == 0:
        raise MergeError("embeddings, vocabs and weights must align")
    if not 0 <= anchor_index < n:
        raise MergeError(f"anchor_index {anchor_index} out of range")
    d = embeddings[0].shape[1]
    for e, v in zip(embeddings, vocabs):
        if e.ndim != 2 or e.shape[1] != d:
            raise MergeError("embedding widths differ")
        if e.shape[0] != len(v):
            raise MergeError("embedding rows do not match vocab length")
        if len(set(v)) != len(v):
            raise MergeError("vocab tokens must be unique within a model")

    lookup = [{tok: r for r, tok in enumerate(v)} for v in vocabs]
    merged_vocab = list(vocabs[anchor_index])
    seen = set(merged_vocab)
    for m in range(n):
        if m == anchor_index:
            continue
        novel = sorted(tok for tok in vocabs[m] if tok not in seen)
        merged_vocab.extend(novel)
        seen.update(novel)

    out = np.empty((len(merged_vocab), d), dtype=embeddings[0].dtype)
    for r, tok in enumerate(merged_vocab):
        carriers = [m for m in range(n) if tok in lookup[m]]
        if len(carriers) == 1:
            m = carriers[0]
            out[r] = embeddings[m][lookup[m][tok]]
            continue
        mass = sum(weights[m] for m in carriers)
        row = np.zeros(d, dtype=np.float64)
        for m in carriers:
            share = weights[m] / mass if mass > 0 else 1.0 / len(carriers)
            row += share * embeddings[m][lookup[m][tok]].astype(np.float64)
        out[r] = row.astype(embeddings[0].dtype)
    return out, merged_vocab


# ---------------------------------------------------------------------------
# backbone assembly


@dataclass
class BackboneLayer:
    attn: AttnWeights
    attn_gamma: np.ndarray
    ffn_gamma: np.ndarray


@dataclass
class BackboneCheckpoint:
    config: TransformerConfig
    embedding: np.ndarray
    layers: list[BackboneLayer]
    final_gamma: np.ndarray
    vocab: list[str]
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        c = self.config
        if np.shape(self.embedding) != (c.vocab_size, c.d_model):
            raise MergeError(f"backbone embedding shape {np.shape(self.embedding)}")
        if len(self.layers) != c.n_layers:
            raise MergeError("backbone layer count mismatch")
        for i, bl in enumerate(self.layers):
            for nm in ("w_q", "w_k", "w_v", "w_o"):
                if np.shape(getattr(bl.attn, nm)) != (c.d_model, c.d_model):
                    raise MergeError(f"backbone layers.{i}.attn.{nm} shape")
            if np.shape(bl.attn_gamma) != (c.d_model,) or np.shape(bl.ffn_gamma) != (c.d_model,):
                raise MergeError(f"backbone layers.{i} gamma shape")
        if np.shape(self.final_gamma) != (c.d_model,):
            raise MergeError("backbone final_gamma shape")
        if len(self.vocab) != c.vocab_size:
            raise MergeError("backbone vocab length mismatch")

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("embedding", self.embedding)]
        for i, bl in enumerate(self.layers):
            p = f"layers.{i}"
            out += [
                (f"{p}.attn.w_q", bl.attn.w_q),
                (f"{p}.attn.w_k", bl.attn.w_k),
                (f"{p}.attn.w_v", bl.attn.w_v),
                (f"{p}.attn.w_o", bl.attn.w_o),
                (f"{p}.attn_gamma", bl.attn_gamma),
                (f"{p}.ffn_gamma", bl.ffn_gamma),
            ]
        out.append(("final_gamma", self.final_gamma))
        return out

    def astype(self, dtype) -> "BackboneCheckpoint":
        dtype = np.dtype(dtype)
        return BackboneCheckpoint(
            config=self.config,
            embedding=self.embedding.astype(dtype),
            layers=[
                BackboneLayer(
                    attn=AttnWeights(
                        bl.attn.w_q.astype(dtype),
                        bl.attn.w_k.astype(dtype),
                        bl.attn.w_v.astype(dtype),
                        bl.attn.w_o.astype(dtype),
                    ),
                    attn_gamma=bl.attn_gamma.astype(dtype),
                    ffn_gamma=bl.ffn_gamma.astype(dtype),
                )
                for bl in self.layers
            ],
            final_gamma=self.final_gamma.astype(dtype),
            vocab=list(self.vocab),
            provenance=dict(self.provenance),
        )


def _merge_spherical(tensors, recipe: MergeRecipe, label: str) -> np.ndarray:
    try:
        return nary_slerp(
            tensors, recipe.weights, recipe.reduction_order, recipe.slerp_dot_threshold
        )
    except DegenerateTensorError:
        log.warning("zero-norm tensor in %s, falling back to linear merge", label)
        return linear_merge(tensors, recipe.weights)


def build_backbone(models: list[DenseCheckpoint], recipe: MergeRecipe) -> BackboneCheckpoint:
    """Merge the non-expert parts of N compatible checkpoints."""
    if not models:
        raise MergeError("no models to merge")
    if len(models) != recipe.n_models:
        raise MergeError(f"recipe covers {recipe.n_models} models, got {len(models)}")
    anchor = models[recipe.anchor_index]
    for m in models:
        try:
            check_compatible(anchor, m)
        except IncompatibleModelsError:
            raise
    config = anchor.config
    provenance = {
        "recipe": recipe.to_dict(),
        "source_models": [m.model_id for m in models],
        "anchor_model": anchor.model_id,
    }

    if len(models) == 1:
        only = models[0]
        bb = BackboneCheckpoint(
            config=config,
            embedding=only.embedding.copy(),
            layers=[
                BackboneLayer(
                    attn=AttnWeights(
                        lw.attn.w_q.copy(),
                        lw.attn.w_k.copy(),
                        lw.attn.w_v.copy(),
                        lw.attn.w_o.copy(),
                    ),
                    attn_gamma=lw.attn_gamma.copy(),
                    ffn_gamma=lw.ffn_gamma.copy(),
                )
                for lw in only.layers
            ],
            final_gamma=only.final_gamma.copy(),
            vocab=list(only.vocab),
            provenance=provenance,
        )
        bb.validate()
        return bb

    spherical = recipe.attention_strategy == "slerp"
    layers = []
    for i in range(config.n_layers):
        merged_attn = {}
        for nm in ("w_q", "w_k", "w_v", "w_o"):
            tensors = [getattr(m.layers[i].attn, nm) for m in models]
            label = f"layers.{i}.attn.{nm}"
            if spherical:
                merged_attn[nm] = _merge_spherical(tensors, recipe, label)
            else:
                merged_attn[nm] = linear_merge(tensors, recipe.weights)
        layers.append(
            BackboneLayer(
                attn=AttnWeights(**merged_attn),
                attn_gamma=linear_merge([m.layers[i].attn_gamma for m in models], recipe.weights),
                ffn_gamma=linear_merge([m.layers[i].ffn_gamma for m in models], recipe.weights),
            )
        )

    if recipe.embedding_strategy == "selective":
        embedding, vocab = selective_embedding_merge(
            [m.embedding for m in models],
            [m.vocab for m in models],
            recipe.weights,
            recipe.anchor_index,
        )
    else:
        for m in models:
            if m.vocab != anchor.vocab:
                raise IncompatibleModelsError("linear embedding merge needs identical vocabs")
        embedding = linear_merge([m.embedding for m in models], recipe.weights)
        vocab = list(anchor.vocab)
    if len(vocab) != config.vocab_size:
        raise IncompatibleModelsError(
            f"merged vocabulary has {len(vocab)} tokens, config allows {config.vocab_size}"
        )

    bb = BackboneCheckpoint(
        config=config,
        embedding=embedding,
        layers=layers,
        final_gamma=linear_merge([m.final_gamma for m in models], recipe.weights),
        vocab=vocab,
        provenance=provenance,
    )
    bb.validate()
    return bb
