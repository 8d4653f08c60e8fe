"""Slow reference implementations the fast paths are checked against.

Everything here is written with explicit loops and no shared code with the
package, so agreement is evidence rather than tautology.
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Callable, Sequence

import numpy as np

from dacrs.corpus import Dialogue
from dacrs.kg import Kg, KgIndex, build_index
from dacrs.model import ModelConfig, ModelParams
from dacrs.trainer import BatchSample


def rgcn_reference(params: ModelParams, index: KgIndex, config: ModelConfig) -> np.ndarray:
    """Per-entity, per-relation, per-neighbor evaluation of the graph layer."""
    h = np.array(params.base_table, dtype=np.float64)
    num_entities = h.shape[0]
    num_relations = len(params.rel_weights)
    for _ in range(config.num_rgcn_layers):
        nxt = np.zeros_like(h)
        for m in range(num_entities):
            z = params.self_weight @ h[m]
            for r in range(num_relations):
                neighbors = index.rel_neighbors(m, r)
                if len(neighbors) == 0:
                    continue
                c = float(len(neighbors))
                for j in neighbors:
                    z = z + (params.rel_weights[r] @ h[int(j)]) / c
            if config.activation == "relu":
                z = np.maximum(z, 0.0)
            nxt[m] = z
        h = nxt
    return h


def entity_loss_reference(embeddings: np.ndarray, index: KgIndex) -> tuple[float, np.ndarray]:
    """Direct softmax-over-all-entities evaluation, one anchor at a time."""
    num_entities = embeddings.shape[0]
    per_entity = np.zeros(num_entities, dtype=np.float64)
    for m in range(num_entities):
        denom = 0.0
        for k in range(num_entities):
            denom += math.exp(float(embeddings[m] @ embeddings[k]))
        for j in index.neighbors(m):
            numer = math.exp(float(embeddings[m] @ embeddings[int(j)]))
            per_entity[m] += -math.log(numer / denom)
    return float(per_entity.sum()), per_entity


def rec_loss_reference(
    user_vectors: np.ndarray,
    target_sets: Sequence[Sequence[int]],
    entity_rows: np.ndarray,
) -> float:
    total = 0.0
    for u, targets in zip(user_vectors, target_sets):
        denom = 0.0
        for k in range(entity_rows.shape[0]):
            denom += math.exp(float(u @ entity_rows[k]))
        for j in targets:
            total += -math.log(math.exp(float(u @ entity_rows[int(j)])) / denom)
    return total


def attention_reference(
    s: np.ndarray, rows: np.ndarray, params: ModelParams, config: ModelConfig
) -> np.ndarray:
    """Query/key/value attention with explicit per-head slicing."""
    q = s @ params.attn_query
    keys = rows @ params.attn_key
    values = rows @ params.attn_value
    heads = config.num_attention_heads
    dh = config.d // heads
    out = np.zeros(config.d, dtype=np.float64)
    for head in range(heads):
        lo, hi = head * dh, (head + 1) * dh
        scores = [float(q[lo:hi] @ keys[i, lo:hi]) / math.sqrt(dh) for i in range(rows.shape[0])]
        mx = max(scores)
        weights = [math.exp(sc - mx) for sc in scores]
        norm = sum(weights)
        for i in range(rows.shape[0]):
            out[lo:hi] += (weights[i] / norm) * values[i, lo:hi]
    return out


def recall_reference(ranked_ids: Sequence[int], targets: Sequence[int], k: int) -> float:
    top = set(int(i) for i in ranked_ids[:k])
    wanted = set(int(t) for t in targets)
    return len(wanted & top) / len(wanted)


def popularity_ranking(dialogues: Sequence[Dialogue], kg: Kg) -> list[int]:
    """Items ordered by annotation frequency in the given dialogues, ties by id."""
    counts: Counter[int] = Counter()
    for dialogue in dialogues:
        for utt in dialogue.utterances:
            for entity_id in utt.entities:
                if kg.is_item[entity_id]:
                    counts[int(entity_id)] += 1
    ranked = sorted(kg.item_ids().tolist(), key=lambda i: (-counts.get(int(i), 0), int(i)))
    return [int(i) for i in ranked]


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences, one coordinate at a time, 64-bit."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-6))) if a.size else 0.0


def random_micro_kg(rng: np.random.Generator, max_entities: int = 8) -> Kg:
    """Small random graph with 1-3 relations and a nonempty item set."""
    num_entities = int(rng.integers(3, max_entities + 1))
    num_relations = int(rng.integers(1, 4))
    names = [f"ent {i}" for i in range(num_entities)]
    is_item = np.zeros(num_entities, dtype=bool)
    is_item[rng.integers(num_entities)] = True
    for i in range(num_entities):
        if rng.random() < 0.4:
            is_item[i] = True
    triples = set()
    for _ in range(int(rng.integers(2, 2 * num_entities))):
        h = int(rng.integers(num_entities))
        t = int(rng.integers(num_entities))
        if h == t:
            continue
        triples.add((h, int(rng.integers(num_relations)), t))
    return Kg(
        entity_uris=tuple(f"uri:{i}" for i in range(num_entities)),
        entity_names=tuple(names),
        is_item=is_item,
        relation_names=tuple(f"rel{r}" for r in range(num_relations)),
        triples=np.array(sorted(triples), dtype=np.int64).reshape(-1, 3),
    )


def random_micro_batch(
    rng: np.random.Generator, kg: Kg, config: ModelConfig, batch_size: int
) -> list[BatchSample]:
    samples = []
    for _ in range(batch_size):
        vector = rng.normal(size=config.d_llm)
        if rng.random() < 0.25:
            context: tuple[int, ...] = ()
        else:
            count = int(rng.integers(1, min(4, kg.num_entities) + 1))
            context = tuple(
                int(i) for i in rng.choice(kg.num_entities, size=count, replace=False)
            )
        targets = tuple(
            int(i)
            for i in rng.choice(kg.num_entities, size=int(rng.integers(1, 3)), replace=False)
        )
        samples.append(
            BatchSample(dialogue_vector=vector, context_entities=context, target_entities=targets)
        )
    return samples


def micro_model_instance(
    seed: int,
) -> tuple[Kg, KgIndex, ModelConfig, ModelParams, list[BatchSample]]:
    """Random tiny model whose relu units sit safely away from the kink.

    Finite differences are meaningless across a kink, so draws whose
    preactivations come within 1e-3 of zero are rejected and redrawn.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(200):
        kg = random_micro_kg(rng)
        d = int(rng.integers(2, 5))
        heads = 2 if d % 2 == 0 and rng.random() < 0.5 else 1
        config = ModelConfig(
            d=d,
            d_llm=int(rng.integers(2, 6)),
            num_rgcn_layers=int(rng.integers(1, 3)),
            activation="relu" if rng.random() < 0.5 else "identity",
            num_attention_heads=heads,
            seed=int(rng.integers(1 << 16)),
        )
        params = ModelParams.init(config, kg.num_entities, kg.num_relations)
        for name, tensor in params.tensors():
            if name != "fusion_raw":
                tensor += rng.normal(scale=0.3, size=tensor.shape)
        index = build_index(kg)
        if config.activation == "relu":
            h = np.array(params.base_table)
            safe = True
            for _ in range(config.num_rgcn_layers):
                z = h @ params.self_weight.T
                for r in range(kg.num_relations):
                    z = z + index.norm_adjacency(r) @ h @ params.rel_weights[r].T
                if np.min(np.abs(z)) < 1e-3:
                    safe = False
                    break
                h = np.maximum(z, 0.0)
            if not safe:
                continue
        batch = random_micro_batch(rng, kg, config, int(rng.integers(1, 4)))
        return kg, index, config, params, batch
    raise RuntimeError("could not draw a kink-free micro instance")
