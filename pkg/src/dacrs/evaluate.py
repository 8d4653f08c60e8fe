"""Recall@k evaluation, hyperparameter sweeps, and entity-embedding dumps."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import serialize_dialogue
from .corpus import TestSample, TrainingSample
from .encoder import HashedNgramEncoder
from .errors import ConfigError
from .kg import Kg, build_index
from .model import RecommendationList, recommend, rgcn_forward, user_embedding
from .trainer import Checkpoint, TrainConfig, train

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 10, 50)
SWEEPABLE = ("alpha", "substitution_rate", "augmentation_rate")


@dataclass(frozen=True)
class SampleHits:
    dialogue_id: str
    target_index: int
    recall_at: dict[int, float]


@dataclass(frozen=True)
class EvalReport:
    recall_at: dict[int, float]
    num_test_samples: int
    per_sample: tuple[SampleHits, ...] = ()


@dataclass(frozen=True)
class SweepResult:
    param_name: str
    grid: tuple[float, ...]
    reports: tuple[Optional[EvalReport], ...]
    final_entity_loss: tuple[Optional[float], ...]
    errors: tuple[Optional[str], ...]
    runs_per_point: int


def recall_at_k(
    recommendations: RecommendationList, target_items: Sequence[int], k: int
) -> float:
    """Fraction of target items appearing in the top-k of one ranking."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(target_items) == 0:
        raise ValueError("target_items must be non-empty")
    top = set(recommendations.item_ids()[:k])
    hits = sum(1 for item in target_items if item in top)
    return hits / len(target_items)


def evaluate(
    checkpoint: Checkpoint,
    test_samples: Sequence[TestSample],
    kg: Kg,
    ks: Sequence[int] = DEFAULT_KS,
    encoder=None,
    exclude_context_items: bool = False,
) -> EvalReport:
    """Mean Recall@k over test samples; no augmentation or substitution applies.

    The forward pass sees the raw serialized context and its annotated
    entities. By default every item is ranked; ``exclude_context_items``
    switches to the serving behavior of dropping already-mentioned items.
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("ks must contain integers >= 1")
    config = checkpoint.model_config
    if checkpoint.params.base_table.shape[0] != kg.num_entities:
        raise ConfigError("checkpoint entity count does not match the kg")
    if encoder is None:
        encoder = HashedNgramEncoder(config.d_llm)
    index = build_index(kg)
    embeddings = rgcn_forward(checkpoint.params, index, config)
    max_k = max(ks)

    per_sample: list[SampleHits] = []
    sums = {k: 0.0 for k in ks}
    for sample in test_samples:
        text = serialize_dialogue(sample.context_utterances)
        if text.strip():
            vector = np.asarray(encoder.encode(text), dtype=np.float64)
        else:
            vector = np.zeros(config.d_llm, dtype=np.float64)
        u = user_embedding(
            vector, sample.context_entities, embeddings, checkpoint.params, config
        )
        exclusions: tuple[int, ...] = ()
        if exclude_context_items:
            exclusions = tuple(
                e for e in sample.context_entities if kg.is_item[e]
            )
        ranking = recommend(u, kg, embeddings, max_k, exclusions)
        hits = {k: recall_at_k(ranking, sample.target_items, k) for k in ks}
        per_sample.append(
            SampleHits(
                dialogue_id=sample.dialogue_id,
                target_index=sample.target_index,
                recall_at=hits,
            )
        )
        for k in ks:
            sums[k] += hits[k]

    count = len(per_sample)
    means = {k: (sums[k] / count if count else 0.0) for k in ks}
    return EvalReport(
        recall_at=means, num_test_samples=count, per_sample=tuple(per_sample)
    )


def _mean_reports(reports: Sequence[EvalReport]) -> EvalReport:
    ks = sorted(reports[0].recall_at)
    means = {k: float(np.mean([r.recall_at[k] for r in reports])) for k in ks}
    return EvalReport(recall_at=means, num_test_samples=reports[0].num_test_samples)


def sweep(
    param_name: str,
    grid: Sequence[float],
    base_config: TrainConfig,
    model_config,
    train_samples: Sequence[TrainingSample],
    test_samples: Sequence[TestSample],
    kg: Kg,
    encoder=None,
    ks: Sequence[int] = DEFAULT_KS,
    runs_per_point: int = 5,
) -> SweepResult:
    """Train and evaluate once per grid value, averaging runs_per_point seeded
    runs. A failed point is recorded and the sweep continues.

    Seeds derive as base seed + point index * 1000 (+ run index), so points
    and runs are reproducible yet distinct.
    """
    if param_name not in SWEEPABLE:
        raise ValueError(f"param_name must be one of {SWEEPABLE}")
    if len(grid) == 0:
        raise ValueError("grid must be non-empty")
    if runs_per_point < 1:
        raise ValueError("runs_per_point must be >= 1")
    if encoder is None:
        encoder = HashedNgramEncoder(model_config.d_llm)

    reports: list[Optional[EvalReport]] = []
    entity_losses: list[Optional[float]] = []
    errors: list[Optional[str]] = []
    for point_index, value in enumerate(grid):
        point_reports: list[EvalReport] = []
        point_entity: list[float] = []
        try:
            for run in range(runs_per_point):
                config = replace(
                    base_config,
                    seed=base_config.seed + point_index * 1000 + run,
                    **{param_name: value},
                )
                checkpoint, losses = train(
                    train_samples, kg, model_config, config, encoder
                )
                point_entity.append(losses[-1].entity_loss)
                point_reports.append(
                    evaluate(checkpoint, test_samples, kg, ks, encoder)
                )
        except Exception as exc:
            logger.warning("sweep point %s=%s failed: %s", param_name, value, exc)
            reports.append(None)
            entity_losses.append(None)
            errors.append(str(exc))
            continue
        reports.append(_mean_reports(point_reports))
        entity_losses.append(float(np.mean(point_entity)))
        errors.append(None)
    return SweepResult(
        param_name=param_name,
        grid=tuple(float(v) for v in grid),
        reports=tuple(reports),
        final_entity_loss=tuple(entity_losses),
        errors=tuple(errors),
        runs_per_point=runs_per_point,
    )


def write_sweep_table(result: SweepResult, path: str | Path) -> None:
    """Plot-ready flat records: one row per (grid value, k)."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t")
        writer.writerow([result.param_name, "k", "recall", "final_entity_loss", "error"])
        for value, report, ent, err in zip(
            result.grid, result.reports, result.final_entity_loss, result.errors
        ):
            if report is None:
                writer.writerow([value, "", "", "", err])
                continue
            for k in sorted(report.recall_at):
                writer.writerow([value, k, f"{report.recall_at[k]:.6f}", f"{ent:.6f}", ""])


def dump_embeddings(checkpoint: Checkpoint, kg: Kg, path: str | Path) -> int:
    """Write post-graph-convolution entity embeddings as CSV; returns rows written."""
    config = checkpoint.model_config
    if checkpoint.params.base_table.shape[0] != kg.num_entities:
        raise ConfigError("checkpoint entity count does not match the kg")
    index = build_index(kg)
    embeddings = rgcn_forward(checkpoint.params, index, config)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["entity_id", "name", "is_item"] + [f"x{i}" for i in range(config.d)]
        )
        for entity_id in range(kg.num_entities):
            writer.writerow(
                [entity_id, kg.entity_names[entity_id], int(kg.is_item[entity_id])]
                + [f"{v:.9g}" for v in embeddings[entity_id]]
            )
    return kg.num_entities
