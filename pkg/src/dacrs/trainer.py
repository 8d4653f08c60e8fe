"""Training: combined recommendation + entity-similarity objective with exact
gradients, decoupled-weight-decay adaptive-moment updates, and checkpoints.

All arithmetic runs at 64-bit precision; checkpoints persist tensors at 32-bit
and parameters are quantized to 32-bit-representable values when a checkpoint
is built, so save/load round trips are bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig, RewriteProvider, run_pipeline
from .corpus import TrainingSample
from .encoder import EncoderError
from .errors import ConfigError, NumericError
from .kg import Kg, KgIndex, build_index
from .kgem import SubstitutionConfig, entity_similarity_loss_and_grad, substitute_entities
from .model import (
    ModelConfig,
    ModelParams,
    attention_aggregate_cached,
    attention_backward,
    rgcn_backward,
    rgcn_forward_cached,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DACR"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    batch_size: int = 128
    epochs: int = 50
    substitution_rate: float = 0.2
    augmentation_rate: float = 0.2
    stage1_enabled: bool = False
    holdout_fraction: float = 0.0
    entity_loss_negatives: Optional[int] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        for name in ("substitution_rate", "augmentation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.entity_loss_negatives is not None and self.entity_loss_negatives < 1:
            raise ConfigError("entity_loss_negatives must be >= 1 when set")


@dataclass(frozen=True)
class BatchSample:
    """One prepared training example: frozen dialogue vector, context entity
    ids after substitution, and the non-empty target entity ids."""

    dialogue_vector: np.ndarray
    context_entities: tuple[int, ...]
    target_entities: tuple[int, ...]


@dataclass(frozen=True)
class BatchLoss:
    rec_loss: float
    entity_loss: float
    total: float
    size: int


@dataclass(frozen=True)
class LossReport:
    rec_loss: float
    entity_loss: float
    total: float
    batches: tuple[BatchLoss, ...] = ()
    provider_failures: int = 0


@dataclass
class ParamGrads:
    """Gradient for every tensor in ModelParams, in the same tensors() order."""

    base_table: np.ndarray
    rel_weights: list[np.ndarray]
    self_weight: np.ndarray
    attn_query: np.ndarray
    attn_key: np.ndarray
    attn_value: np.ndarray
    dialogue_proj: np.ndarray
    fusion_raw: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "ParamGrads":
        return cls(
            base_table=np.zeros_like(params.base_table),
            rel_weights=[np.zeros_like(w) for w in params.rel_weights],
            self_weight=np.zeros_like(params.self_weight),
            attn_query=np.zeros_like(params.attn_query),
            attn_key=np.zeros_like(params.attn_key),
            attn_value=np.zeros_like(params.attn_value),
            dialogue_proj=np.zeros_like(params.dialogue_proj),
            fusion_raw=np.zeros_like(params.fusion_raw),
        )

    def tensors(self) -> list[tuple[str, np.ndarray]]:
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


def rec_loss(
    user_vectors: np.ndarray,
    target_sets: Sequence[Sequence[int]],
    all_entity_rows: np.ndarray,
) -> float:
    """Softmax cross-entropy between each user vector and its target entities,
    with the denominator over every entity; summed over the batch."""
    if not np.isfinite(user_vectors).all() or not np.isfinite(all_entity_rows).all():
        raise NumericError("non-finite inputs to rec_loss")
    total = 0.0
    for u, targets in zip(user_vectors, target_sets):
        if len(targets) == 0:
            raise ValueError("each target set must be non-empty")
        logits = all_entity_rows @ u
        peak = logits.max()
        lse = peak + np.log(np.exp(logits - peak).sum())
        total += len(targets) * lse - logits[np.asarray(targets, dtype=np.int64)].sum()
    return float(total)


def total_loss_and_grad(
    batch: Sequence[BatchSample],
    params: ModelParams,
    index: KgIndex,
    model_config: ModelConfig,
    train_config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[LossReport, ParamGrads]:
    """One optimization step's loss and exact parameter gradients.

    The recommendation term is averaged over the batch; the entity term is
    evaluated once on the full entity set. The dialogue vectors are frozen
    inputs and receive no gradient.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    h, rgcn_cache = rgcn_forward_cached(params, index, model_config)
    if not np.isfinite(h).all():
        raise NumericError("non-finite entity embeddings in forward pass")

    grads = ParamGrads.zeros_like(params)
    d_h = np.zeros_like(h)
    lam = params.fusion_weight
    rec_sum = 0.0
    inv_b = 1.0 / len(batch)

    for sample in batch:
        s = sample.dialogue_vector
        projected = s @ params.dialogue_proj
        if sample.context_entities:
            ctx = np.asarray(sample.context_entities, dtype=np.int64)
            rows = h[ctx]
            aggregated, att_cache = attention_aggregate_cached(
                s, rows, params, model_config
            )
            u = lam * projected + (1.0 - lam) * aggregated
        else:
            u = projected
        if not np.isfinite(u).all():
            raise NumericError("non-finite user vector")

        targets = np.asarray(sample.target_entities, dtype=np.int64)
        if targets.size == 0:
            raise ValueError("sample has no target entities")
        logits = h @ u
        peak = logits.max()
        lse = peak + np.log(np.exp(logits - peak).sum())
        rec_sum += targets.size * lse - logits[targets].sum()

        d_logits = targets.size * np.exp(logits - lse)
        np.add.at(d_logits, targets, -1.0)
        d_u = h.T @ d_logits
        d_h += d_logits[:, None] * u[None, :]

        if sample.context_entities:
            d_lambda = float(d_u @ (projected - aggregated))
            grads.fusion_raw[0] += d_lambda * lam * (1.0 - lam)
            grads.dialogue_proj += np.outer(s, lam * d_u)
            d_q, d_k, d_v, d_rows = attention_backward(
                (1.0 - lam) * d_u, s, att_cache, params, model_config
            )
            grads.attn_query += d_q
            grads.attn_key += d_k
            grads.attn_value += d_v
            np.add.at(d_h, ctx, d_rows)
        else:
            grads.dialogue_proj += np.outer(s, d_u)

    grads.fusion_raw *= inv_b
    grads.dialogue_proj *= inv_b
    grads.attn_query *= inv_b
    grads.attn_key *= inv_b
    grads.attn_value *= inv_b
    d_h *= inv_b

    alpha = train_config.alpha
    entity_value = 0.0
    if alpha > 0:
        ent_report, ent_grad = entity_similarity_loss_and_grad(
            h, index, train_config.entity_loss_negatives, rng
        )
        entity_value = ent_report.value
        d_h += alpha * ent_grad

    d_base, d_rel, d_self = rgcn_backward(d_h, rgcn_cache, params, index, model_config)
    grads.base_table = d_base
    grads.rel_weights = d_rel
    grads.self_weight = d_self

    rec_value = rec_sum * inv_b
    report = LossReport(
        rec_loss=rec_value,
        entity_loss=entity_value,
        total=rec_value + alpha * entity_value,
        batches=(
            BatchLoss(
                rec_loss=rec_value,
                entity_loss=entity_value,
                total=rec_value + alpha * entity_value,
                size=len(batch),
            ),
        ),
    )
    if not np.isfinite(report.total):
        raise NumericError("non-finite loss")
    return report, grads


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    The decay term is scaled by the learning rate, so a zero rate leaves
    parameters fully untouched.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: ModelParams, learning_rate: float, weight_decay: float) -> None:
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(t) for name, t in params.tensors()}
        self._v = {name: np.zeros_like(t) for name, t in params.tensors()}

    def step(self, params: ModelParams, grads: ParamGrads) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.BETA1**t
        bias2 = 1.0 - self.BETA2**t
        for (name, tensor), (_, grad) in zip(params.tensors(), grads.tensors()):
            m = self._m[name]
            v = self._v[name]
            m *= self.BETA1
            m += (1.0 - self.BETA1) * grad
            v *= self.BETA2
            v += (1.0 - self.BETA2) * grad * grad
            update = (m / bias1) / (np.sqrt(v / bias2) + self.EPS)
            tensor -= self.learning_rate * (update + self.weight_decay * tensor)


def _zero_vector(dim: int) -> np.ndarray:
    return np.zeros(dim, dtype=np.float64)


def prepare_batch(
    samples: Sequence[TrainingSample],
    index: KgIndex,
    encoder,
    train_config: TrainConfig,
    model_config: ModelConfig,
    rng: np.random.Generator,
    rewrite_provider: Optional[RewriteProvider] = None,
) -> tuple[list[BatchSample], int]:
    """Augment, substitute, and encode raw samples; returns batch plus the
    number of stage-1 provider failures encountered."""
    augment_config = AugmentConfig(
        rate=train_config.augmentation_rate,
        stage1_enabled=train_config.stage1_enabled,
        seed=train_config.seed,
    )
    subst_config = SubstitutionConfig(
        substitution_rate=train_config.substitution_rate, seed=train_config.seed
    )
    batch: list[BatchSample] = []
    failures = 0
    for sample in samples:
        augmented = run_pipeline(
            sample.context_utterances, augment_config, rewrite_provider, rng
        )
        failures += int(augmented.stage1_failed)
        text = augmented.serialized()
        if text.strip():
            vector = np.asarray(encoder.encode(text), dtype=np.float64)
            if vector.shape != (model_config.d_llm,):
                raise ConfigError(
                    f"encoder produced dimension {vector.shape}, expected d_llm={model_config.d_llm}"
                )
        else:
            vector = _zero_vector(model_config.d_llm)
        context = substitute_entities(
            sample.context_entities, index, subst_config, rng
        )
        batch.append(
            BatchSample(
                dialogue_vector=vector,
                context_entities=tuple(context),
                target_entities=sample.target_entities,
            )
        )
    return batch, failures


def train(
    train_samples: Sequence[TrainingSample],
    kg: Kg,
    model_config: ModelConfig,
    train_config: TrainConfig,
    encoder,
    rewrite_provider: Optional[RewriteProvider] = None,
) -> tuple["Checkpoint", list[LossReport]]:
    """Full training run; deterministic given configs, data, and fixture providers."""
    if len(train_samples) == 0:
        raise ValueError("training set must be non-empty")
    index = build_index(kg)
    params = ModelParams.init(model_config, kg.num_entities, kg.num_relations)
    optimizer = AdamW(params, train_config.learning_rate, train_config.weight_decay)
    rng = np.random.default_rng(train_config.seed)

    samples = list(train_samples)
    holdout: list[TrainingSample] = []
    if train_config.holdout_fraction > 0:
        stride = max(2, round(1.0 / train_config.holdout_fraction))
        holdout = samples[::stride]
        samples = [s for i, s in enumerate(samples) if i % stride != 0]
        if not samples:
            raise ValueError("holdout fraction leaves no training samples")

    reports: list[LossReport] = []
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(samples))
        batch_losses: list[BatchLoss] = []
        failures = 0
        for batch_index, start in enumerate(range(0, len(order), train_config.batch_size)):
            chosen = [samples[i] for i in order[start : start + train_config.batch_size]]
            try:
                batch, batch_failures = prepare_batch(
                    chosen, index, encoder, train_config, model_config, rng,
                    rewrite_provider,
                )
                failures += batch_failures
                report, grads = total_loss_and_grad(
                    batch, params, index, model_config, train_config, rng
                )
            except (NumericError, EncoderError) as exc:
                raise type(exc)(f"epoch {epoch} batch {batch_index}: {exc}") from exc
            optimizer.step(params, grads)
            batch_losses.extend(report.batches)

        total_size = sum(b.size for b in batch_losses)
        epoch_rec = sum(b.rec_loss * b.size for b in batch_losses) / total_size
        epoch_ent = sum(b.entity_loss * b.size for b in batch_losses) / total_size
        epoch_report = LossReport(
            rec_loss=epoch_rec,
            entity_loss=epoch_ent,
            total=epoch_rec + train_config.alpha * epoch_ent,
            batches=tuple(batch_losses),
            provider_failures=failures,
        )
        reports.append(epoch_report)
        logger.info(
            "epoch %d: rec=%.6f entity=%.6f total=%.6f",
            epoch, epoch_rec, epoch_ent, epoch_report.total,
        )
        if holdout:
            logger.info(
                "epoch %d: holdout rec=%.6f", epoch,
                _holdout_rec_loss(holdout, params, index, encoder, model_config),
            )

    checkpoint = Checkpoint.create(
        model_config=model_config,
        train_config=train_config,
        params=params,
        epoch=train_config.epochs,
        rng_digest=rng_state_digest(rng),
    )
    return checkpoint, reports


def _holdout_rec_loss(
    holdout: Sequence[TrainingSample],
    params: ModelParams,
    index: KgIndex,
    encoder,
    model_config: ModelConfig,
) -> float:
    from .model import rgcn_forward, user_embedding
    from .augment import serialize_dialogue

    h = rgcn_forward(params, index, model_config)
    users = []
    targets = []
    for sample in holdout:
        text = serialize_dialogue(sample.context_utterances)
        vector = (
            np.asarray(encoder.encode(text), dtype=np.float64)
            if text.strip()
            else _zero_vector(model_config.d_llm)
        )
        users.append(
            user_embedding(vector, sample.context_entities, h, params, model_config)
        )
        targets.append(sample.target_entities)
    return rec_loss(np.array(users), targets, h) / len(holdout)


def rng_state_digest(rng: np.random.Generator) -> str:
    """Stable digest of a generator's bit-state for reproducibility audits."""
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=int)
    return hashlib.sha256(state.encode("utf-8")).hexdigest()


def _quantize(array: np.ndarray) -> np.ndarray:
    """Round-trip through 32-bit so in-memory values match what a checkpoint stores."""
    return array.astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class Checkpoint:
    version: int
    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    epoch: int
    rng_digest: str

    @classmethod
    def create(
        cls,
        model_config: ModelConfig,
        train_config: TrainConfig,
        params: ModelParams,
        epoch: int,
        rng_digest: str,
    ) -> "Checkpoint":
        quantized = ModelParams(
            base_table=_quantize(params.base_table),
            rel_weights=[_quantize(w) for w in params.rel_weights],
            self_weight=_quantize(params.self_weight),
            attn_query=_quantize(params.attn_query),
            attn_key=_quantize(params.attn_key),
            attn_value=_quantize(params.attn_value),
            dialogue_proj=_quantize(params.dialogue_proj),
            fusion_raw=_quantize(params.fusion_raw),
        )
        return cls(
            version=CHECKPOINT_VERSION,
            model_config=model_config,
            train_config=train_config,
            params=quantized,
            epoch=epoch,
            rng_digest=rng_digest,
        )


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Write magic, version, a manifest block, then row-major 32-bit payloads."""
    tensors = checkpoint.params.tensors()
    payload = b"".join(
        np.ascontiguousarray(t, dtype=np.float32).tobytes() for _, t in tensors
    )
    manifest = {
        "model_config": asdict(checkpoint.model_config),
        "train_config": asdict(checkpoint.train_config),
        "epoch": checkpoint.epoch,
        "rng_digest": checkpoint.rng_digest,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", checkpoint.version))
        handle.write(struct.pack("<Q", len(manifest_bytes)))
        handle.write(manifest_bytes)
        handle.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    header = 4 + 4 + 8
    if len(data) < header or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (manifest_len,) = struct.unpack("<Q", data[8:16])
    if len(data) < header + manifest_len:
        raise CheckpointError("truncated checkpoint (manifest)")
    try:
        manifest = json.loads(data[header : header + manifest_len])
        model_config = ModelConfig(**manifest["model_config"])
        train_config = TrainConfig(**manifest["train_config"])
        tensor_specs = manifest["tensors"]
        epoch = int(manifest["epoch"])
        rng_digest = str(manifest["rng_digest"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid checkpoint manifest: {exc}") from exc

    payload = data[header + manifest_len :]
    if manifest["payload_sha256"] != hashlib.sha256(payload).hexdigest():
        raise CheckpointError("checkpoint payload digest mismatch")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for spec in tensor_specs:
        shape = tuple(int(x) for x in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise CheckpointError("truncated checkpoint (payload)")
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arrays[spec["name"]] = flat.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("checkpoint payload has trailing bytes")

    d = model_config.d
    expected = {
        "self_weight": (d, d),
        "attn_query": (model_config.d_llm, d),
        "attn_key": (d, d),
        "attn_value": (d, d),
        "dialogue_proj": (model_config.d_llm, d),
        "fusion_raw": (1,),
    }
    rel_weights = []
    try:
        for r in range(len(tensor_specs) - len(expected) - 1):
            rel_weights.append(arrays[f"rel_weight_{r}"])
        params = ModelParams(
            base_table=arrays["base_table"],
            rel_weights=rel_weights,
            self_weight=arrays["self_weight"],
            attn_query=arrays["attn_query"],
            attn_key=arrays["attn_key"],
            attn_value=arrays["attn_value"],
            dialogue_proj=arrays["dialogue_proj"],
            fusion_raw=arrays["fusion_raw"],
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing tensor {exc}") from exc
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"tensor {name} has shape {arrays[name].shape}, expected {shape}"
            )
    for r, w in enumerate(rel_weights):
        if w.shape != (d, d):
            raise CheckpointError(f"tensor rel_weight_{r} has shape {w.shape}, expected {(d, d)}")
    if params.base_table.shape[1] != d:
        raise CheckpointError("base table dimension mismatch")
    return Checkpoint(
        version=version,
        model_config=model_config,
        train_config=train_config,
        params=params,
        epoch=epoch,
        rng_digest=rng_digest,
    )


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
