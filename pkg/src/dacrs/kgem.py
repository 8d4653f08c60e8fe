"""Knowledge-guided entity modeling: neighbor substitution and the similarity loss.

Substitution perturbs mentioned-entity lists at training time by swapping
entities for 1-hop graph neighbors. The similarity loss pulls each entity's
embedding toward its neighbors through a softmax over the full entity set,
and ships with an exact analytic gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .kg import KgIndex, sample_neighbor


@dataclass(frozen=True)
class SubstitutionConfig:
    substitution_rate: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.substitution_rate <= 1.0:
            raise ConfigError("substitution_rate must lie in [0, 1]")


@dataclass(frozen=True)
class EntityLossReport:
    value: float
    per_entity: np.ndarray  # one contribution per entity, zero for isolated ones

    def __post_init__(self) -> None:
        if not np.isfinite(self.value):
            raise NumericError("entity loss is non-finite")


def substitute_entities(
    context_entities: Sequence[int],
    index: KgIndex,
    config: SubstitutionConfig,
    rng: np.random.Generator,
) -> list[int]:
    """Independently replace each entity with a uniform 1-hop neighbor at the
    configured rate; isolated entities are always kept. Positions preserved."""
    rate = config.substitution_rate
    if rate == 0.0:
        return list(context_entities)
    out = []
    for entity_id in context_entities:
        if rng.random() < rate:
            neighbor = sample_neighbor(index, int(entity_id), rng)
            out.append(neighbor if neighbor is not None else int(entity_id))
        else:
            out.append(int(entity_id))
    return out


def _check_embeddings(embeddings: np.ndarray, index: KgIndex) -> None:
    if embeddings.ndim != 2 or embeddings.shape[0] != index.num_entities:
        raise ConfigError(
            f"embedding matrix must be {index.num_entities}×d, got {embeddings.shape}"
        )
    if not np.isfinite(embeddings).all():
        raise NumericError("embedding matrix contains non-finite values")


def _denominator_columns(
    index: KgIndex,
    num_negatives: Optional[int],
    rng: Optional[np.random.Generator],
) -> Optional[list[np.ndarray]]:
    """Per-anchor denominator id sets for the sampled-softmax switch, or None
    for the exact full-softmax path."""
    if num_negatives is None:
        return None
    if rng is None:
        raise ConfigError("sampled softmax requires an rng")
    n = index.num_entities
    columns = []
    for m in range(n):
        sampled = rng.integers(n, size=num_negatives)
        cols = np.union1d(np.append(index.neighbors(m), [m]), sampled)
        columns.append(cols.astype(np.int64))
    return columns


def _loss_terms(
    embeddings: np.ndarray,
    index: KgIndex,
    columns: Optional[list[np.ndarray]],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-entity losses and the softmax coefficient matrix G with
    G[m, k] = deg_m * p_m[k] - [k in N_m]; the gradient is (G + G^T) H."""
    n = index.num_entities
    per_entity = np.zeros(n, dtype=np.float64)
    g = np.zeros((n, n), dtype=np.float64)
    for m in range(n):
        neigh = index.neighbors(m)
        deg = len(neigh)
        if deg == 0:
            continue
        cols = np.arange(n) if columns is None else columns[m]
        scores = embeddings[cols] @ embeddings[m]
        peak = scores.max()
        lse = peak + np.log(np.exp(scores - peak).sum())
        pos = embeddings[neigh] @ embeddings[m]
        per_entity[m] = deg * lse - pos.sum()
        g[m, cols] += deg * np.exp(scores - lse)
        g[m, neigh] -= 1.0
    return per_entity, g


def entity_similarity_loss(
    embeddings: np.ndarray,
    index: KgIndex,
    num_negatives: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> EntityLossReport:
    """Softmax neighbor-similarity loss, log-sum-exp stabilized.

    Each anchor contributes one negative log-probability per neighbor, with the
    denominator running over every entity (including the anchor itself). With
    ``num_negatives`` set, the denominator is restricted to the anchor, its
    neighbors, and that many uniform samples.
    """
    _check_embeddings(embeddings, index)
    per_entity, _ = _loss_terms(
        embeddings, index, _denominator_columns(index, num_negatives, rng)
    )
    return EntityLossReport(value=float(per_entity.sum()), per_entity=per_entity)


def entity_similarity_loss_grad(
    embeddings: np.ndarray,
    index: KgIndex,
    num_negatives: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Exact gradient of the similarity loss w.r.t. every embedding row."""
    _check_embeddings(embeddings, index)
    _, g = _loss_terms(
        embeddings, index, _denominator_columns(index, num_negatives, rng)
    )
    return g @ embeddings + g.T @ embeddings


def entity_similarity_loss_and_grad(
    embeddings: np.ndarray,
    index: KgIndex,
    num_negatives: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[EntityLossReport, np.ndarray]:
    """Loss and gradient from one pass (and, when sampling, one shared draw)."""
    _check_embeddings(embeddings, index)
    per_entity, g = _loss_terms(
        embeddings, index, _denominator_columns(index, num_negatives, rng)
    )
    report = EntityLossReport(value=float(per_entity.sum()), per_entity=per_entity)
    return report, g @ embeddings + g.T @ embeddings
