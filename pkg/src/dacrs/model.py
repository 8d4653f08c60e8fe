"""Forward computation: RGCN entity encoding, dialogue-guided attention, fusion, scoring."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .kg import Kg, KgIndex

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class ModelConfig:
    d: int
    d_llm: int
    num_rgcn_layers: int = 1
    activation: str = "relu"
    num_attention_heads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d < 1 or self.d_llm < 1:
            raise ConfigError("d and d_llm must be >= 1")
        if self.num_rgcn_layers < 1:
            raise ConfigError("num_rgcn_layers must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.num_attention_heads < 1 or self.d % self.num_attention_heads != 0:
            raise ConfigError("num_attention_heads must divide d")


@dataclass
class ModelParams:
    """All learnable tensors. The relation and self weights are shared across
    RGCN layers; fusion_raw holds the unconstrained fusion logit (shape (1,))."""

    base_table: np.ndarray
    rel_weights: list[np.ndarray]
    self_weight: np.ndarray
    attn_query: np.ndarray
    attn_key: np.ndarray
    attn_value: np.ndarray
    dialogue_proj: np.ndarray
    fusion_raw: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig, num_entities: int, num_relations: int) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        bound = 1.0 / math.sqrt(config.d)

        def uniform(*shape: int) -> np.ndarray:
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            base_table=uniform(num_entities, config.d),
            rel_weights=[uniform(config.d, config.d) for _ in range(num_relations)],
            self_weight=uniform(config.d, config.d),
            attn_query=uniform(config.d_llm, config.d),
            attn_key=uniform(config.d, config.d),
            attn_value=uniform(config.d, config.d),
            dialogue_proj=uniform(config.d_llm, config.d),
            fusion_raw=np.zeros(1, dtype=np.float64),
        )

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Stable (name, tensor) ordering shared by the optimizer and checkpoints."""
        named = [("base_table", self.base_table)]
        named.extend((f"rel_weight_{r}", w) for r, w in enumerate(self.rel_weights))
        named.extend(
            [
                ("self_weight", self.self_weight),
                ("attn_query", self.attn_query),
                ("attn_key", self.attn_key),
                ("attn_value", self.attn_value),
                ("dialogue_proj", self.dialogue_proj),
                ("fusion_raw", self.fusion_raw),
            ]
        )
        return named

    @property
    def fusion_weight(self) -> float:
        """The fused mixing weight, kept inside (0, 1) by the logistic map."""
        return float(1.0 / (1.0 + np.exp(-self.fusion_raw[0])))

    def copy(self) -> "ModelParams":
        return ModelParams(
            base_table=self.base_table.copy(),
            rel_weights=[w.copy() for w in self.rel_weights],
            self_weight=self.self_weight.copy(),
            attn_query=self.attn_query.copy(),
            attn_key=self.attn_key.copy(),
            attn_value=self.attn_value.copy(),
            dialogue_proj=self.dialogue_proj.copy(),
            fusion_raw=self.fusion_raw.copy(),
        )


@dataclass(frozen=True)
class RecommendationList:
    """Ranked (item_id, score) pairs; scores non-increasing, ties by ascending id."""

    entries: tuple[tuple[int, float], ...]

    def item_ids(self) -> list[int]:
        return [item_id for item_id, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _activate_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class RgcnCache:
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    preactivations: list[np.ndarray] = field(default_factory=list)
    messages: list[list[np.ndarray]] = field(default_factory=list)


def _check_rgcn_shapes(params: ModelParams, index: KgIndex, config: ModelConfig) -> None:
    num_entities, d = params.base_table.shape
    if d != config.d:
        raise ConfigError(f"base table dimension {d} != configured d {config.d}")
    if num_entities != index.num_entities:
        raise ConfigError(
            f"base table has {num_entities} rows but the index covers "
            f"{index.num_entities} entities"
        )
    if len(params.rel_weights) != index.kg.num_relations:
        raise ConfigError("one relation weight matrix per relation is required")


def rgcn_forward_cached(
    params: ModelParams, index: KgIndex, config: ModelConfig
) -> tuple[np.ndarray, RgcnCache]:
    _check_rgcn_shapes(params, index, config)
    cache = RgcnCache()
    h = params.base_table
    for _ in range(config.num_rgcn_layers):
        cache.layer_inputs.append(h)
        z = h @ params.self_weight.T
        layer_messages = []
        for r, weight in enumerate(params.rel_weights):
            message = index.norm_adjacency(r) @ h
            layer_messages.append(message)
            z = z + message @ weight.T
        cache.messages.append(layer_messages)
        cache.preactivations.append(z)
        h = _activate(z, config.activation)
    return h, cache


def rgcn_forward(params: ModelParams, index: KgIndex, config: ModelConfig) -> np.ndarray:
    """Entity embeddings: per-relation degree-normalized neighbor averaging plus a
    self transform, applied num_rgcn_layers times from the base table."""
    h, _ = rgcn_forward_cached(params, index, config)
    return h


def rgcn_backward(
    grad_output: np.ndarray,
    cache: RgcnCache,
    params: ModelParams,
    index: KgIndex,
    config: ModelConfig,
) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Backpropagate through the cached forward; returns gradients for the base
    table, the per-relation weights, and the self weight."""
    d_rel = [np.zeros_like(w) for w in params.rel_weights]
    d_self = np.zeros_like(params.self_weight)
    grad = grad_output
    for layer in reversed(range(config.num_rgcn_layers)):
        z = cache.preactivations[layer]
        h_in = cache.layer_inputs[layer]
        dz = grad * _activate_grad(z, config.activation)
        d_self += dz.T @ h_in
        grad = dz @ params.self_weight
        for r, weight in enumerate(params.rel_weights):
            message = cache.messages[layer][r]
            d_rel[r] += dz.T @ message
            grad = grad + (index.norm_adjacency(r).T @ dz) @ weight
    return grad, d_rel, d_self


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


@dataclass
class AttentionCache:
    rows: np.ndarray
    query: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    weights: list[np.ndarray]


def attention_aggregate_cached(
    s: np.ndarray, entity_rows: np.ndarray, params: ModelParams, config: ModelConfig
) -> tuple[np.ndarray, AttentionCache]:
    if entity_rows.ndim != 2 or entity_rows.shape[0] == 0:
        raise ValueError("attention requires at least one entity row")
    query = s @ params.attn_query
    keys = entity_rows @ params.attn_key
    values = entity_rows @ params.attn_value
    heads = config.num_attention_heads
    head_dim = config.d // heads
    scale = math.sqrt(head_dim)
    out = np.empty(config.d, dtype=np.float64)
    weights = []
    for h in range(heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        attn = _softmax((keys[:, sl] @ query[sl]) / scale)
        weights.append(attn)
        out[sl] = attn @ values[:, sl]
    return out, AttentionCache(entity_rows, query, keys, values, weights)


def attention_aggregate(
    s: np.ndarray, entity_rows: np.ndarray, params: ModelParams, config: ModelConfig
) -> np.ndarray:
    """Aggregate mentioned-entity rows with the dialogue embedding as the query."""
    out, _ = attention_aggregate_cached(s, entity_rows, params, config)
    return out


def attention_weights(
    s: np.ndarray, entity_rows: np.ndarray, params: ModelParams, config: ModelConfig
) -> np.ndarray:
    """Per-row attention weights averaged across heads (diagnostics and UI)."""
    _, cache = attention_aggregate_cached(s, entity_rows, params, config)
    return np.mean(cache.weights, axis=0)


def attention_backward(
    grad_out: np.ndarray,
    s: np.ndarray,
    cache: AttentionCache,
    params: ModelParams,
    config: ModelConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the attention output w.r.t. the three projections and the
    entity rows (the dialogue embedding is frozen)."""
    heads = config.num_attention_heads
    head_dim = config.d // heads
    scale = math.sqrt(head_dim)
    p = cache.rows.shape[0]
    d_query = np.zeros(config.d, dtype=np.float64)
    d_keys = np.zeros((p, config.d), dtype=np.float64)
    d_values = np.zeros((p, config.d), dtype=np.float64)
    for h in range(heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        attn = cache.weights[h]
        d_values[:, sl] = np.outer(attn, grad_out[sl])
        d_attn = cache.values[:, sl] @ grad_out[sl]
        d_scores = attn * (d_attn - attn @ d_attn)
        d_query[sl] = (d_scores @ cache.keys[:, sl]) / scale
        d_keys[:, sl] = np.outer(d_scores, cache.query[sl]) / scale
    d_attn_query = np.outer(s, d_query)
    d_attn_key = cache.rows.T @ d_keys
    d_attn_value = cache.rows.T @ d_values
    d_rows = d_keys @ params.attn_key.T + d_values @ params.attn_value.T
    return d_attn_query, d_attn_key, d_attn_value, d_rows


def fuse_user(
    s: np.ndarray, h_n: Optional[np.ndarray], params: ModelParams
) -> np.ndarray:
    """Blend projected dialogue and aggregated entity vectors with the learned
    mixing weight; with no mentioned entities the projected dialogue stands alone."""
    projected = s @ params.dialogue_proj
    if h_n is None:
        return projected
    lam = params.fusion_weight
    return lam * projected + (1.0 - lam) * h_n


def score_items(u: np.ndarray, item_rows: np.ndarray) -> np.ndarray:
    """Dot-product similarity of one user vector against item embedding rows."""
    return item_rows @ u


def recommend(
    u: np.ndarray,
    kg: Kg,
    entity_embeddings: np.ndarray,
    k: int,
    exclusions: Iterable[int] = (),
) -> RecommendationList:
    """Top-k item ids by dot-product score; ties break toward the lower id.

    Excluded ids are removed before ranking; asking for more items than exist
    returns everything available.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.isfinite(u).all():
        raise NumericError("user vector contains non-finite values")
    item_ids = kg.item_ids()
    excluded = set(exclusions)
    if excluded:
        item_ids = np.array([i for i in item_ids if i not in excluded], dtype=np.int64)
    if len(item_ids) == 0:
        return RecommendationList(entries=())
    scores = score_items(u, entity_embeddings[item_ids])
    order = np.lexsort((item_ids, -scores))
    top = order[:k]
    return RecommendationList(
        entries=tuple((int(item_ids[i]), float(scores[i])) for i in top)
    )


def user_embedding(
    s: np.ndarray,
    context_entity_ids: Sequence[int],
    entity_embeddings: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
) -> np.ndarray:
    """Full user-side forward: attention over context entities, then fusion."""
    if len(context_entity_ids) == 0:
        return fuse_user(s, None, params)
    rows = entity_embeddings[np.asarray(context_entity_ids, dtype=np.int64)]
    aggregated = attention_aggregate(s, rows, params, config)
    return fuse_user(s, aggregated, params)
