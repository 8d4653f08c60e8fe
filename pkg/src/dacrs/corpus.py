"""Dialogue corpus loading, sample construction, and the planted-preference synthetic set."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kg import Kg

logger = logging.getLogger(__name__)

SPEAKERS = ("user", "recommender")


class CorpusLoadError(ValueError):
    """Malformed dialogue record."""


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str
    entities: tuple[int, ...] = ()


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    utterances: tuple[Utterance, ...]


@dataclass(frozen=True)
class TrainingSample:
    """Context prefix plus the entities of one target utterance."""

    dialogue_id: str
    target_index: int
    context_utterances: tuple[Utterance, ...]
    context_entities: tuple[int, ...]
    target_entities: tuple[int, ...]


@dataclass(frozen=True)
class TestSample:
    """Like a training sample, but the target utterance is a recommender turn
    and the scored targets are restricted to item entities."""

    dialogue_id: str
    target_index: int
    context_utterances: tuple[Utterance, ...]
    context_entities: tuple[int, ...]
    target_entities: tuple[int, ...]
    target_items: tuple[int, ...]


@dataclass(frozen=True)
class CorpusStats:
    num_dialogues: int
    num_items: int
    num_entities: int
    num_interactions: int
    density: float


def _ordered_dedup(ids: Iterable[int]) -> tuple[int, ...]:
    seen: set[int] = set()
    out: list[int] = []
    for entity_id in ids:
        if entity_id not in seen:
            seen.add(entity_id)
            out.append(entity_id)
    return tuple(out)


def load_dialogues(source: Iterable[str] | str | Path, kg: Kg) -> list[Dialogue]:
    """Parse line-delimited dialogue records, resolving entity uris to dense ids.

    Unknown entity uris are dropped from the annotation (counted and logged);
    a structurally malformed record raises :class:`CorpusLoadError` with its
    record index.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as handle:
            lines = handle.readlines()
    else:
        lines = list(source)

    dialogues: list[Dialogue] = []
    unknown_count = 0
    for record_index, raw in enumerate(lines):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusLoadError(f"record {record_index}: invalid JSON ({exc})") from exc
        if not isinstance(record, dict) or "dialogue_id" not in record:
            raise CorpusLoadError(f"record {record_index}: missing dialogue_id")
        utterances_field = record.get("utterances")
        if not isinstance(utterances_field, list) or not utterances_field:
            raise CorpusLoadError(f"record {record_index}: utterances must be a non-empty list")
        utterances: list[Utterance] = []
        for utt_index, utt in enumerate(utterances_field):
            if not isinstance(utt, dict):
                raise CorpusLoadError(f"record {record_index}: utterance {utt_index} not an object")
            speaker = utt.get("speaker")
            text = utt.get("text")
            if speaker not in SPEAKERS:
                raise CorpusLoadError(
                    f"record {record_index}: utterance {utt_index} has invalid speaker {speaker!r}"
                )
            if not isinstance(text, str):
                raise CorpusLoadError(f"record {record_index}: utterance {utt_index} missing text")
            entity_ids: list[int] = []
            for uri in utt.get("entities", []):
                entity_id = kg.uri_to_id.get(uri)
                if entity_id is None:
                    unknown_count += 1
                else:
                    entity_ids.append(entity_id)
            utterances.append(Utterance(speaker=speaker, text=text, entities=tuple(entity_ids)))
        dialogues.append(Dialogue(dialogue_id=str(record["dialogue_id"]), utterances=tuple(utterances)))

    if unknown_count:
        logger.warning("dropped %d entity annotations with unknown uris", unknown_count)
    return dialogues


def save_dialogues(dialogues: Sequence[Dialogue], kg: Kg, path: str | Path) -> None:
    """Write dialogues in the line-delimited record format, ids mapped back to uris."""
    with open(path, "w", encoding="utf-8") as handle:
        for dialogue in dialogues:
            record = {
                "dialogue_id": dialogue.dialogue_id,
                "utterances": [
                    {
                        "speaker": utt.speaker,
                        "text": utt.text,
                        "entities": [kg.entity_uris[e] for e in utt.entities],
                    }
                    for utt in dialogue.utterances
                ],
            }
            handle.write(json.dumps(record) + "\n")


def build_training_samples(dialogues: Sequence[Dialogue]) -> list[TrainingSample]:
    """One sample per utterance with at least one entity, from either speaker."""
    samples: list[TrainingSample] = []
    for dialogue in dialogues:
        for index, utterance in enumerate(dialogue.utterances):
            if not utterance.entities:
                continue
            prefix = dialogue.utterances[:index]
            samples.append(
                TrainingSample(
                    dialogue_id=dialogue.dialogue_id,
                    target_index=index,
                    context_utterances=prefix,
                    context_entities=_ordered_dedup(
                        e for utt in prefix for e in utt.entities
                    ),
                    target_entities=_ordered_dedup(utterance.entities),
                )
            )
    return samples


def build_test_samples(dialogues: Sequence[Dialogue], kg: Kg) -> list[TestSample]:
    """One sample per recommender utterance that mentions at least one item."""
    samples: list[TestSample] = []
    for dialogue in dialogues:
        for index, utterance in enumerate(dialogue.utterances):
            if utterance.speaker != "recommender":
                continue
            targets = _ordered_dedup(utterance.entities)
            items = tuple(e for e in targets if kg.is_item[e])
            if not items:
                continue
            prefix = dialogue.utterances[:index]
            samples.append(
                TestSample(
                    dialogue_id=dialogue.dialogue_id,
                    target_index=index,
                    context_utterances=prefix,
                    context_entities=_ordered_dedup(
                        e for utt in prefix for e in utt.entities
                    ),
                    target_entities=targets,
                    target_items=items,
                )
            )
    return samples


def corpus_stats(dialogues: Sequence[Dialogue], kg: Kg) -> CorpusStats:
    """Dataset statistics; an interaction is one item-entity annotation occurrence."""
    interactions = sum(
        1
        for dialogue in dialogues
        for utt in dialogue.utterances
        for e in utt.entities
        if kg.is_item[e]
    )
    denom = len(dialogues) * kg.num_items
    return CorpusStats(
        num_dialogues=len(dialogues),
        num_items=kg.num_items,
        num_entities=kg.num_entities,
        num_interactions=interactions,
        density=interactions / denom if denom else 0.0,
    )


def split_dialogues(
    dialogues: Sequence[Dialogue], test_fraction: float = 0.2
) -> tuple[list[Dialogue], list[Dialogue]]:
    """Deterministic interleaved train/test split (every round(1/f)-th goes to test)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    stride = max(2, round(1.0 / test_fraction))
    train = [d for i, d in enumerate(dialogues) if i % stride != 0]
    test = [d for i, d in enumerate(dialogues) if i % stride == 0]
    return train, test


@dataclass(frozen=True)
class SyntheticSpec:
    num_clusters: int
    entities_per_cluster: int
    items_per_cluster: int
    num_dialogues: int
    utterances_per_dialogue: int
    seed: int


_THEMES = (
    "cosmic", "noir", "slapstick", "heartfelt", "haunted", "frontier",
    "mythic", "cyber", "regal", "tropical", "arctic", "baroque",
)
_ASPECTS = (
    "plot", "vibe", "mood", "pace", "tone", "style", "cast", "score",
    "twist", "scene", "world", "craft", "charm", "drama",
    "action", "magic", "wit", "depth", "heart", "grit",
)
_ITEM_NOUNS = ("Story", "Saga", "Voyage", "Chronicle", "Legend", "Affair", "Gambit", "Reverie")

_GREETING_TEMPLATES = (
    "Hi! I am looking for a movie tonight.",
    "Hello, can you recommend me something to watch?",
    "Hey there. I need a film for this evening.",
)
_ACK_TEMPLATES = (
    "Happy to help. What matters most to you?",
    "Sure thing. Any particulars you care about?",
    "Of course. Tell me what you value in a film.",
)
# Preference text stays generic; the annotation alone carries which
# qualities the user named, so mentions are the only target signal.
_PREF_TEMPLATES = (
    "I care most about a few particular things in a film.",
    "My taste is pretty specific, if that helps.",
    "There are a couple of qualities I always look for.",
)


def _bank_word(bank: tuple[str, ...], i: int) -> str:
    base = bank[i % len(bank)]
    return base if i < len(bank) else f"{base}{i // len(bank)}"


def _cluster_theme(c: int) -> str:
    return _bank_word(_THEMES, c)


def _aspect_word(i: int) -> str:
    return _bank_word(_ASPECTS, i)


def _item_noun(j: int) -> str:
    base = _ITEM_NOUNS[j % len(_ITEM_NOUNS)]
    return base if j < len(_ITEM_NOUNS) else f"{base} {j // len(_ITEM_NOUNS) + 1}"


def generate_synthetic(spec: SyntheticSpec) -> tuple[Kg, list[Dialogue]]:
    """Planted-preference dataset: clustered KG plus dialogues whose mentioned
    entities and final recommended item provably share a cluster.

    Each item owns a signature subset of its cluster's entities (a star in
    the KG) and preference turns mention mostly signature entities. All
    utterance text is deliberately generic: the target is recoverable only
    from the annotated mentions, never from wording, so the mention channel
    carries the entire preference signal. Sparse cross-cluster entity links
    give aggressive neighbor substitution a path out of the target's
    cluster, while low rates mostly land on semantically safe neighbors.
    """
    for field_name in ("num_clusters", "entities_per_cluster", "items_per_cluster",
                       "num_dialogues", "utterances_per_dialogue"):
        if getattr(spec, field_name) <= 0:
            raise ValueError(f"{field_name} must be positive")

    rng = np.random.default_rng(spec.seed)
    names: list[str] = []
    flags: list[bool] = []
    cluster_entities: list[list[int]] = []
    cluster_items: list[list[int]] = []
    for c in range(spec.num_clusters):
        theme = _cluster_theme(c)
        ents = []
        for i in range(spec.entities_per_cluster):
            ents.append(len(names))
            names.append(f"{theme} {_aspect_word(i)}")
            flags.append(False)
        items = []
        for j in range(spec.items_per_cluster):
            items.append(len(names))
            names.append(f"The {theme.capitalize()} {_item_noun(j)}")
            flags.append(True)
        cluster_entities.append(ents)
        cluster_items.append(items)

    uris = tuple(f"synth:{i:05d}" for i in range(len(names)))
    relation_names = ("features", "related_to", "similar_to")
    triples: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()

    def add(head: int, rel: int, tail: int) -> None:
        if head == tail:
            return
        triple = (head, rel, tail)
        if triple not in seen:
            seen.add(triple)
            triples.append(triple)

    signatures: dict[int, list[int]] = {}
    for c in range(spec.num_clusters):
        ents = cluster_entities[c]
        items = cluster_items[c]
        # Item signatures partition the cluster's entity list round-robin;
        # each signature forms a star around its item.
        for j, item in enumerate(items):
            sig = ents[j :: len(items)]
            signatures[item] = sig if sig else list(ents)
            for e in signatures[item]:
                add(item, 0, e)
        if len(items) > 1:
            add(items[0], 2, items[1])
        # The first two signature entities mesh adjacent stars so the
        # cluster stays connected at the entity level.
        for j in range(len(items) - 1):
            left, right = signatures[items[j]], signatures[items[j + 1]]
            for a, b in list(zip(left, right))[:2]:
                add(a, 1, b)
    # Inter-cluster links: the remaining signature entities pair with their
    # counterparts half a cycle away, so aggressive substitution tends to
    # drag mentions into a distant cluster while low rates rarely do; one
    # item-level bridge joins each adjacent pair.
    if spec.num_clusters > 1:
        half = max(1, spec.num_clusters // 2)
        for c in range(spec.num_clusters):
            far = (c + half) % spec.num_clusters
            if far <= c:
                continue
            for item_a, item_b in zip(cluster_items[c], cluster_items[far]):
                sig_a, sig_b = signatures[item_a], signatures[item_b]
                for t in range(2, min(len(sig_a), len(sig_b))):
                    add(sig_a[t], 1, sig_b[t])
        for c in range(spec.num_clusters):
            nxt = (c + 1) % spec.num_clusters
            add(
                cluster_items[c][int(rng.integers(spec.items_per_cluster))],
                1,
                cluster_items[nxt][int(rng.integers(spec.items_per_cluster))],
            )

    kg = Kg(
        entity_uris=uris,
        entity_names=tuple(names),
        is_item=np.array(flags, dtype=bool),
        relation_names=relation_names,
        triples=np.array(triples, dtype=np.int64).reshape(-1, 3),
    )

    def pick_template(bank: tuple[str, ...]) -> str:
        return bank[int(rng.integers(len(bank)))]

    dialogues: list[Dialogue] = []
    for k in range(spec.num_dialogues):
        c = k % spec.num_clusters
        j = int(rng.integers(spec.items_per_cluster))
        item = cluster_items[c][j]
        sig = signatures[item]

        utterances: list[Utterance] = []
        n = spec.utterances_per_dialogue
        if n >= 2:
            utterances.append(
                Utterance(speaker="user", text=pick_template(_GREETING_TEMPLATES))
            )
        slots = n - 2
        for i in range(slots):
            # One preference turn per ack/probe pair; a lone middle slot is
            # the preference turn.
            is_pref = i % 2 == 1 or slots == 1
            if is_pref:
                count = 1 + int(rng.integers(2))
                mentioned: list[int] = []
                for _ in range(count):
                    if rng.random() < 0.9:
                        mentioned.append(sig[int(rng.integers(len(sig)))])
                    else:
                        pool = cluster_entities[c]
                        mentioned.append(pool[int(rng.integers(len(pool)))])
                mentioned = list(_ordered_dedup(mentioned))
                utterances.append(
                    Utterance(
                        speaker="user",
                        text=pick_template(_PREF_TEMPLATES),
                        entities=tuple(mentioned),
                    )
                )
            else:
                utterances.append(
                    Utterance(speaker="recommender", text=pick_template(_ACK_TEMPLATES))
                )
        utterances.append(
            Utterance(
                speaker="recommender",
                text=f"You should watch {kg.entity_names[item]}.",
                entities=(item,),
            )
        )
        dialogues.append(Dialogue(dialogue_id=f"d{k:05d}", utterances=tuple(utterances)))

    return kg, dialogues
