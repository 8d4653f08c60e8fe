"""Recall@k math, evaluation flow, sweeps, and the embedding dump."""
import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dacrs.corpus import TrainingSample, Utterance
from dacrs.corpus import TestSample as HeldOutSample
from dacrs.encoder import HashedNgramEncoder
from dacrs.errors import ConfigError
from dacrs.evaluate import (
    DEFAULT_KS,
    SWEEPABLE,
    dump_embeddings,
    evaluate,
    recall_at_k,
    sweep,
    write_sweep_table,
)
from dacrs.kg import Kg, build_index
from dacrs.model import ModelConfig, ModelParams, RecommendationList, rgcn_forward
from dacrs.trainer import Checkpoint, TrainConfig, train

from oracles import recall_reference


def make_kg(num_entities=5, items=(2, 3, 4)):
    flags = np.zeros(num_entities, dtype=bool)
    flags[list(items)] = True
    return Kg(
        entity_uris=tuple(f"uri:{i}" for i in range(num_entities)),
        entity_names=tuple(f"entity {i}" for i in range(num_entities)),
        is_item=flags,
        relation_names=("rel",),
        triples=np.array([[0, 0, 1]], dtype=np.int64),
    )


def ranking(*ids):
    return RecommendationList(entries=tuple((i, float(-rank)) for rank, i in enumerate(ids)))


class TestRecallAtK:
    def test_hit_at_one(self):
        assert recall_at_k(ranking(3, 2, 4), [3], 1) == 1.0

    def test_miss_then_hit_with_larger_k(self):
        assert recall_at_k(ranking(3, 2, 4), [4], 1) == 0.0
        assert recall_at_k(ranking(3, 2, 4), [4], 3) == 1.0

    def test_partial_credit_for_multiple_targets(self):
        assert recall_at_k(ranking(3, 2, 4), [2, 4], 2) == 0.5

    def test_k_beyond_ranking_length(self):
        assert recall_at_k(ranking(3), [3, 2], 50) == 0.5

    def test_validation(self):
        with pytest.raises(ValueError):
            recall_at_k(ranking(1), [1], 0)
        with pytest.raises(ValueError):
            recall_at_k(ranking(1), [], 1)

    @given(
        seed=st.integers(0, 3_000),
        k=st.integers(1, 12),
    )
    @settings(max_examples=150, deadline=None)
    def test_matches_reference_and_is_monotone_in_k(self, seed, k):
        rng = np.random.default_rng(seed)
        ids = rng.permutation(10)[: rng.integers(1, 10)]
        targets = rng.integers(10, size=rng.integers(1, 4))
        targets = list(dict.fromkeys(int(t) for t in targets))
        ranked = ranking(*[int(i) for i in ids])
        value = recall_at_k(ranked, targets, k)
        assert value == recall_reference(ranked.item_ids(), targets, k)
        if k > 1:
            assert value >= recall_at_k(ranked, targets, k - 1)


def zero_checkpoint(kg, d=4, d_llm=8):
    config = ModelConfig(d=d, d_llm=d_llm)
    params = ModelParams.init(config, kg.num_entities, kg.num_relations)
    for _, tensor in params.tensors():
        tensor[...] = 0.0
    return Checkpoint.create(
        model_config=config,
        train_config=TrainConfig(),
        params=params,
        epoch=0,
        rng_digest="0" * 64,
    )


def make_sample(target_items, context_entities=(), utterances=(), dialogue_id="d0"):
    return HeldOutSample(
        dialogue_id=dialogue_id,
        target_index=len(utterances),
        context_utterances=tuple(utterances),
        context_entities=tuple(context_entities),
        target_entities=tuple(target_items),
        target_items=tuple(target_items),
    )


class TestEvaluate:
    def test_zero_model_ranks_items_by_ascending_id(self):
        # all scores tie at zero, so the tiebreak fixes the ranking to 2,3,4
        kg = make_kg()
        report = evaluate(
            zero_checkpoint(kg),
            [make_sample((2,)), make_sample((4,))],
            kg,
            ks=(1, 2, 3),
        )
        assert report.num_test_samples == 2
        assert report.recall_at[1] == 0.5   # item 2 hits, item 4 misses
        assert report.recall_at[2] == 0.5
        assert report.recall_at[3] == 1.0

    def test_per_sample_breakdown(self):
        kg = make_kg()
        report = evaluate(
            zero_checkpoint(kg),
            [make_sample((2,), dialogue_id="a"), make_sample((3,), dialogue_id="b")],
            kg,
            ks=(1,),
        )
        assert [h.dialogue_id for h in report.per_sample] == ["a", "b"]
        assert [h.recall_at[1] for h in report.per_sample] == [1.0, 0.0]

    def test_context_items_ranked_by_default_but_excludable(self):
        kg = make_kg()
        sample = make_sample((3,), context_entities=(2,))
        default = evaluate(zero_checkpoint(kg), [sample], kg, ks=(1,))
        assert default.recall_at[1] == 0.0  # item 2 still occupies the top slot
        excluded = evaluate(
            zero_checkpoint(kg), [sample], kg, ks=(1,), exclude_context_items=True
        )
        assert excluded.recall_at[1] == 1.0

    def test_ks_deduped_and_sorted(self):
        kg = make_kg()
        report = evaluate(zero_checkpoint(kg), [make_sample((2,))], kg, ks=(3, 1, 3))
        assert sorted(report.recall_at) == [1, 3]

    def test_invalid_ks_rejected(self):
        kg = make_kg()
        with pytest.raises(ValueError):
            evaluate(zero_checkpoint(kg), [], kg, ks=(0,))
        with pytest.raises(ValueError):
            evaluate(zero_checkpoint(kg), [], kg, ks=())

    def test_entity_count_mismatch_rejected(self):
        kg = make_kg()
        other = make_kg(num_entities=7, items=(5, 6))
        with pytest.raises(ConfigError):
            evaluate(zero_checkpoint(other), [], kg)

    def test_empty_test_set_reports_zero(self):
        kg = make_kg()
        report = evaluate(zero_checkpoint(kg), [], kg)
        assert report.num_test_samples == 0
        assert all(v == 0.0 for v in report.recall_at.values())

    def test_context_is_serialized_without_augmentation(self):
        kg = make_kg()

        class Recording:
            provider_id = "rec"

            def __init__(self):
                self.texts = []

            def encode(self, text):
                self.texts.append(text)
                return np.zeros(8)

        encoder = Recording()
        sample = make_sample(
            (2,),
            utterances=(Utterance("user", "hi there"), Utterance("recommender", "yes")),
        )
        evaluate(zero_checkpoint(kg), [sample], kg, ks=(1,), encoder=encoder)
        assert encoder.texts == ["User: hi there\nRecommender: yes"]

    def test_default_ks(self):
        kg = make_kg()
        report = evaluate(zero_checkpoint(kg), [make_sample((2,))], kg)
        assert sorted(report.recall_at) == sorted(DEFAULT_KS)


def tiny_corpus():
    kg = make_kg()
    train_samples = [
        TrainingSample(
            dialogue_id=f"t{i}",
            target_index=1,
            context_utterances=(Utterance("user", f"context {i}"),),
            context_entities=(i % 2,),
            target_entities=(2 + i % 3,),
        )
        for i in range(6)
    ]
    test_samples = [make_sample((2,)), make_sample((3,))]
    return kg, train_samples, test_samples


BASE = TrainConfig(
    epochs=2, batch_size=4, learning_rate=0.01,
    substitution_rate=0.0, augmentation_rate=0.0, seed=3,
)
MODEL = ModelConfig(d=4, d_llm=16)


class TestSweep:
    def test_param_name_whitelist(self):
        kg, train_samples, test_samples = tiny_corpus()
        with pytest.raises(ValueError, match="param_name"):
            sweep("learning_rate", [0.1], BASE, MODEL, train_samples,
                  test_samples, kg, runs_per_point=1)
        assert "alpha" in SWEEPABLE

    def test_empty_grid_rejected(self):
        kg, train_samples, test_samples = tiny_corpus()
        with pytest.raises(ValueError, match="grid"):
            sweep("alpha", [], BASE, MODEL, train_samples, test_samples, kg)

    def test_runs_per_point_bound(self):
        kg, train_samples, test_samples = tiny_corpus()
        with pytest.raises(ValueError, match="runs_per_point"):
            sweep("alpha", [0.0], BASE, MODEL, train_samples, test_samples, kg,
                  runs_per_point=0)

    def test_failed_point_recorded_and_sweep_continues(self):
        kg, train_samples, test_samples = tiny_corpus()
        result = sweep(
            "alpha", [-1.0, 0.0], BASE, MODEL, train_samples, test_samples, kg,
            runs_per_point=1,
        )
        assert result.reports[0] is None
        assert result.errors[0] is not None
        assert result.reports[1] is not None
        assert result.errors[1] is None
        assert result.final_entity_loss[1] is not None

    def test_point_average_matches_manual_runs(self):
        from dataclasses import replace

        kg, train_samples, test_samples = tiny_corpus()
        encoder = HashedNgramEncoder(16)
        result = sweep(
            "substitution_rate", [0.5], BASE, MODEL, train_samples, test_samples,
            kg, encoder=encoder, ks=(1, 2), runs_per_point=2,
        )
        manual = []
        for run in range(2):
            config = replace(BASE, seed=BASE.seed + run, substitution_rate=0.5)
            checkpoint, _ = train(train_samples, kg, MODEL, config, encoder)
            manual.append(evaluate(checkpoint, test_samples, kg, (1, 2), encoder))
        report = result.reports[0]
        for k in (1, 2):
            expected = np.mean([m.recall_at[k] for m in manual])
            assert report.recall_at[k] == pytest.approx(expected, abs=1e-12)

    def test_second_point_uses_offset_seed_block(self):
        from dataclasses import replace

        kg, train_samples, test_samples = tiny_corpus()
        encoder = HashedNgramEncoder(16)
        result = sweep(
            "alpha", [0.0, 1.0], BASE, MODEL, train_samples, test_samples, kg,
            encoder=encoder, ks=(1,), runs_per_point=1,
        )
        config = replace(BASE, seed=BASE.seed + 1000, alpha=1.0)
        checkpoint, _ = train(train_samples, kg, MODEL, config, encoder)
        expected = evaluate(checkpoint, test_samples, kg, (1,), encoder)
        assert result.reports[1].recall_at[1] == pytest.approx(
            expected.recall_at[1], abs=1e-12
        )

    def test_deterministic(self):
        kg, train_samples, test_samples = tiny_corpus()
        a = sweep("alpha", [0.0, 1.0], BASE, MODEL, train_samples, test_samples,
                  kg, ks=(1,), runs_per_point=1)
        b = sweep("alpha", [0.0, 1.0], BASE, MODEL, train_samples, test_samples,
                  kg, ks=(1,), runs_per_point=1)
        assert [r.recall_at for r in a.reports] == [r.recall_at for r in b.reports]


class TestWriteSweepTable:
    def test_rows_per_grid_value_and_k(self, tmp_path):
        kg, train_samples, test_samples = tiny_corpus()
        result = sweep(
            "alpha", [-1.0, 0.0], BASE, MODEL, train_samples, test_samples, kg,
            ks=(1, 2), runs_per_point=1,
        )
        path = tmp_path / "sweep.tsv"
        write_sweep_table(result, path)
        rows = list(csv.reader(path.open(), delimiter="\t"))
        assert rows[0] == ["alpha", "k", "recall", "final_entity_loss", "error"]
        assert rows[1][0] == "-1.0" and rows[1][4]  # failed point keeps its error
        assert [r[1] for r in rows[2:]] == ["1", "2"]
        for row in rows[2:]:
            assert 0.0 <= float(row[2]) <= 1.0
            assert row[4] == ""


class TestDumpEmbeddings:
    def test_csv_matches_forward_pass(self, tmp_path):
        kg, train_samples, _ = tiny_corpus()
        checkpoint, _ = train(train_samples, kg, MODEL, BASE, HashedNgramEncoder(16))
        path = tmp_path / "emb.csv"
        assert dump_embeddings(checkpoint, kg, path) == kg.num_entities
        rows = list(csv.DictReader(path.open()))
        assert len(rows) == kg.num_entities
        expected = rgcn_forward(
            checkpoint.params, build_index(kg), checkpoint.model_config
        )
        for row in rows:
            entity_id = int(row["entity_id"])
            assert row["name"] == kg.entity_names[entity_id]
            assert int(row["is_item"]) == int(kg.is_item[entity_id])
            values = [float(row[f"x{i}"]) for i in range(MODEL.d)]
            np.testing.assert_allclose(values, expected[entity_id], rtol=1e-6)

    def test_entity_count_mismatch_rejected(self, tmp_path):
        kg = make_kg()
        other = make_kg(num_entities=9, items=(5,))
        with pytest.raises(ConfigError):
            dump_embeddings(zero_checkpoint(other), kg, tmp_path / "emb.csv")
