"""Item-entity knowledge graph: loading, indexing, neighbor sampling, entity linking."""
from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
import scipy.sparse as sparse

CATALOG_FILENAME = "entities.tsv"
TRIPLES_FILENAME = "triples.tsv"


class KgLoadError(ValueError):
    """Malformed catalog or triple stream."""


@dataclass(frozen=True)
class EntityMention:
    """An exact-match occurrence of a catalog name inside an utterance."""

    entity_id: int
    utterance_index: int
    span: tuple[int, int]


class Kg:
    """Immutable entity/relation/triple store with dense integer ids.

    Entity ids are 0..num_entities-1 in catalog order; relation ids are
    0..num_relations-1 in first-appearance order of the triple stream.
    The graph is treated as undirected for all neighborhood queries.
    """

    def __init__(
        self,
        entity_uris: tuple[str, ...],
        entity_names: tuple[str, ...],
        is_item: np.ndarray,
        relation_names: tuple[str, ...],
        triples: np.ndarray,
    ) -> None:
        self.entity_uris = entity_uris
        self.entity_names = entity_names
        self.is_item = np.asarray(is_item, dtype=bool)
        self.is_item.setflags(write=False)
        self.relation_names = relation_names
        self.triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.triples.setflags(write=False)
        self.uri_to_id = {uri: i for i, uri in enumerate(entity_uris)}
        self._linker: Optional[_Linker] = None

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    @property
    def num_items(self) -> int:
        return int(self.is_item.sum())

    def item_ids(self) -> np.ndarray:
        """Dense ids of item-flagged entities, ascending."""
        return np.flatnonzero(self.is_item)

    def __repr__(self) -> str:
        return (
            f"Kg(entities={self.num_entities}, items={self.num_items}, "
            f"relations={self.num_relations}, triples={len(self.triples)})"
        )


def _iter_lines(source: Iterable[str] | str | Path) -> Iterator[str]:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as handle:
            yield from handle
    else:
        yield from source


def load_kg(
    triples_source: Iterable[str] | str | Path,
    entity_catalog: Iterable[str] | str | Path,
) -> Kg:
    """Build a Kg from a tab-separated triple stream and an entity catalog.

    Catalog lines: ``<uri>\\t<name>\\t<0|1>``; triple lines:
    ``<head_uri>\\t<relation>\\t<tail_uri>``. Ids are assigned by first
    appearance. Exact duplicate triples are dropped; a triple referencing
    an unknown uri raises :class:`KgLoadError` with the line number.
    """
    uris: list[str] = []
    names: list[str] = []
    flags: list[bool] = []
    uri_to_id: dict[str, int] = {}
    for lineno, raw in enumerate(_iter_lines(entity_catalog), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise KgLoadError(f"catalog line {lineno}: expected 3 tab-separated fields")
        uri, name, flag = parts
        if flag not in ("0", "1"):
            raise KgLoadError(f"catalog line {lineno}: item flag must be 0 or 1")
        if uri in uri_to_id:
            raise KgLoadError(f"catalog line {lineno}: duplicate uri {uri!r}")
        uri_to_id[uri] = len(uris)
        uris.append(uri)
        names.append(name)
        flags.append(flag == "1")

    relation_ids: dict[str, int] = {}
    relation_names: list[str] = []
    seen: set[tuple[int, int, int]] = set()
    triples: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(_iter_lines(triples_source), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise KgLoadError(f"triple line {lineno}: expected 3 tab-separated fields")
        head_uri, relation, tail_uri = parts
        if head_uri not in uri_to_id:
            raise KgLoadError(f"triple line {lineno}: unknown head uri {head_uri!r}")
        if tail_uri not in uri_to_id:
            raise KgLoadError(f"triple line {lineno}: unknown tail uri {tail_uri!r}")
        if relation not in relation_ids:
            relation_ids[relation] = len(relation_names)
            relation_names.append(relation)
        triple = (uri_to_id[head_uri], relation_ids[relation], uri_to_id[tail_uri])
        if triple in seen:
            continue
        seen.add(triple)
        triples.append(triple)

    return Kg(
        entity_uris=tuple(uris),
        entity_names=tuple(names),
        is_item=np.array(flags, dtype=bool),
        relation_names=tuple(relation_names),
        triples=np.array(triples, dtype=np.int64).reshape(-1, 3),
    )


def load_kg_dir(directory: str | Path) -> Kg:
    """Load a Kg from ``entities.tsv`` and ``triples.tsv`` in a directory."""
    directory = Path(directory)
    return load_kg(directory / TRIPLES_FILENAME, directory / CATALOG_FILENAME)


def save_kg(kg: Kg, directory: str | Path) -> None:
    """Write a Kg back out in the catalog/triple file format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / CATALOG_FILENAME, "w", encoding="utf-8") as handle:
        for i in range(kg.num_entities):
            flag = "1" if kg.is_item[i] else "0"
            handle.write(f"{kg.entity_uris[i]}\t{kg.entity_names[i]}\t{flag}\n")
    with open(directory / TRIPLES_FILENAME, "w", encoding="utf-8") as handle:
        for head, rel, tail in kg.triples:
            handle.write(
                f"{kg.entity_uris[head]}\t{kg.relation_names[rel]}\t{kg.entity_uris[tail]}\n"
            )


class KgIndex:
    """Per-relation adjacency with degree normalization constants.

    For entity ``m`` and relation ``r`` the normalization constant equals
    the number of distinct undirected neighbors of ``m`` under ``r``.
    Self-loops never enter neighbor sets.
    """

    def __init__(self, kg: Kg) -> None:
        self.kg = kg
        num_entities = kg.num_entities
        per_rel: list[dict[int, set[int]]] = [defaultdict(set) for _ in range(kg.num_relations)]
        undirected: list[set[int]] = [set() for _ in range(num_entities)]
        for head, rel, tail in kg.triples:
            if head == tail:
                continue
            per_rel[rel][head].add(tail)
            per_rel[rel][tail].add(head)
            undirected[head].add(tail)
            undirected[tail].add(head)

        self._rel_neighbors: list[dict[int, np.ndarray]] = []
        for rel in range(kg.num_relations):
            frozen = {
                m: np.array(sorted(members), dtype=np.int64)
                for m, members in per_rel[rel].items()
            }
            self._rel_neighbors.append(frozen)
        self._neighbors: list[np.ndarray] = [
            np.array(sorted(members), dtype=np.int64) for members in undirected
        ]
        self.degrees = np.array([len(arr) for arr in self._neighbors], dtype=np.int64)
        self._norm_adjacency = [self._build_norm_adjacency(r) for r in range(kg.num_relations)]

    def _build_norm_adjacency(self, relation_id: int) -> sparse.csr_matrix:
        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []
        for m, members in sorted(self._rel_neighbors[relation_id].items()):
            weight = 1.0 / len(members)
            for j in members:
                rows.append(m)
                cols.append(int(j))
                vals.append(weight)
        shape = (self.kg.num_entities, self.kg.num_entities)
        return sparse.csr_matrix(
            (np.array(vals, dtype=np.float64), (rows, cols)), shape=shape
        )

    @property
    def num_entities(self) -> int:
        return self.kg.num_entities

    def neighbors(self, entity_id: int) -> np.ndarray:
        """Undirected neighbor ids of an entity, sorted ascending."""
        self._check_entity(entity_id)
        return self._neighbors[entity_id]

    def rel_neighbors(self, entity_id: int, relation_id: int) -> np.ndarray:
        self._check_entity(entity_id)
        empty = np.empty(0, dtype=np.int64)
        return self._rel_neighbors[relation_id].get(entity_id, empty)

    def norm_constant(self, entity_id: int, relation_id: int) -> int:
        return len(self.rel_neighbors(entity_id, relation_id))

    def norm_adjacency(self, relation_id: int) -> sparse.csr_matrix:
        """Sparse matrix A with A[m, j] = 1/c(m, r) for j in the relation neighborhood."""
        return self._norm_adjacency[relation_id]

    def mean_degree(self) -> float:
        if self.num_entities == 0:
            return 0.0
        return float(self.degrees.mean())

    def _check_entity(self, entity_id: int) -> None:
        if not 0 <= entity_id < self.kg.num_entities:
            raise ValueError(f"unknown entity id {entity_id}")


def build_index(kg: Kg) -> KgIndex:
    """Index adjacency and normalization constants for a loaded Kg."""
    return KgIndex(kg)


def sample_neighbor(
    index: KgIndex, entity_id: int, rng: np.random.Generator
) -> Optional[int]:
    """Draw a uniform 1-hop neighbor, or None for isolated entities."""
    members = index.neighbors(entity_id)
    if len(members) == 0:
        return None
    return int(members[rng.integers(len(members))])


class _Linker:
    """Longest-match, case-insensitive exact matcher over catalog names."""

    def __init__(self, kg: Kg) -> None:
        by_name: dict[str, int] = {}
        for entity_id, name in enumerate(kg.entity_names):
            key = name.lower()
            if key and key not in by_name:
                by_name[key] = entity_id
        self.by_name = by_name
        if by_name:
            # Longest alternative first so the leftmost match is also the longest.
            ordered = sorted(by_name, key=len, reverse=True)
            alternation = "|".join(re.escape(name) for name in ordered)
            self.pattern: Optional[re.Pattern[str]] = re.compile(
                r"(?<![0-9A-Za-z])(?:" + alternation + r")(?![0-9A-Za-z])",
                re.IGNORECASE,
            )
        else:
            self.pattern = None

    def find(self, text: str, utterance_index: int) -> list[EntityMention]:
        if self.pattern is None:
            return []
        mentions = []
        for match in self.pattern.finditer(text):
            entity_id = self.by_name[match.group(0).lower()]
            mentions.append(
                EntityMention(
                    entity_id=entity_id,
                    utterance_index=utterance_index,
                    span=(match.start(), match.end()),
                )
            )
        return mentions


def link_entities(kg: Kg, utterance_text: str, utterance_index: int = 0) -> list[EntityMention]:
    """Find non-overlapping, left-to-right, longest exact name matches in a text."""
    if kg._linker is None:
        kg._linker = _Linker(kg)
    return kg._linker.find(utterance_text, utterance_index)
