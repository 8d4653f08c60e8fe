"""HTTP layer: sessions, recommendation turns, entity search, failure mapping."""
import numpy as np
import pytest
from fastapi.testclient import TestClient

from dacrs.encoder import EncoderError, HashedNgramEncoder
from dacrs.errors import ConfigError
from dacrs.kg import Kg
from dacrs.model import ModelConfig, ModelParams
from dacrs.service import (
    IDLE_EVICTION_SECONDS,
    build_state,
    create_app,
    handle_recommend,
)
from dacrs.trainer import Checkpoint, TrainConfig

D_LLM = 8


def service_kg():
    return Kg(
        entity_uris=tuple(f"uri:{i}" for i in range(5)),
        entity_names=(
            "space opera",
            "gritty noir",
            "The Star Saga",
            "The Noir Affair",
            "The Quiet Story",
        ),
        is_item=np.array([False, False, True, True, True]),
        relation_names=("rel",),
        triples=np.array([[0, 0, 2], [1, 0, 3]], dtype=np.int64),
    )


def zero_checkpoint(kg):
    config = ModelConfig(d=4, d_llm=D_LLM)
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


class FakeClock:
    def __init__(self, start=1_000.0):
        self.now = start

    def __call__(self):
        return self.now


def make_service(encoder=None, clock=None, idle_seconds=IDLE_EVICTION_SECONDS):
    kg = service_kg()
    state = build_state(
        zero_checkpoint(kg),
        kg,
        encoder=encoder,
        checkpoint_hash="cafe" * 16,
        idle_seconds=idle_seconds,
        clock=clock or FakeClock(),
    )
    client = TestClient(create_app(state), raise_server_exceptions=False)
    return state, client


def open_session(client):
    response = client.post("/api/session")
    assert response.status_code == 201
    return response.json()["session_id"]


def ask(client, session_id, utterance, k=10):
    return client.post(
        "/api/recommend",
        json={"session_id": session_id, "utterance": utterance, "k": k},
    )


class TestHealth:
    def test_reports_checkpoint_and_catalog(self):
        _, client = make_service()
        body = client.get("/api/health").json()
        assert body == {
            "status": "ok",
            "checkpoint_hash": "cafe" * 16,
            "num_entities": 5,
        }


class TestSessionLifecycle:
    def test_create_returns_fresh_ids(self):
        _, client = make_service()
        first = open_session(client)
        second = open_session(client)
        assert first != second
        assert len(first) == 32  # 16 random bytes, hex

    def test_unknown_session_is_404_not_retriable(self):
        _, client = make_service()
        response = ask(client, "deadbeef", "anything")
        assert response.status_code == 404
        assert response.json() == {"error": "unknown session_id", "retriable": False}

    def test_idle_sessions_evicted(self):
        clock = FakeClock()
        state, client = make_service(clock=clock, idle_seconds=1800)
        stale = open_session(client)
        clock.now += 1801
        fresh = open_session(client)  # also triggers eviction of the stale one
        assert ask(client, stale, "hi").status_code == 404
        assert ask(client, fresh, "hi").status_code == 200
        assert stale not in state.sessions

    def test_activity_refreshes_idle_timer(self):
        clock = FakeClock()
        _, client = make_service(clock=clock, idle_seconds=1800)
        session = open_session(client)
        for _ in range(3):
            clock.now += 1000
            assert ask(client, session, "still here").status_code == 200


class TestRecommendEndpoint:
    def test_response_shape_and_tie_ranking(self):
        _, client = make_service()
        session = open_session(client)
        body = ask(client, session, "I love space opera", k=2).json()
        # zero model: every score ties at 0, ranking falls back to ascending ids
        assert [r["item_id"] for r in body["recommendations"]] == [2, 3]
        assert [r["rank"] for r in body["recommendations"]] == [1, 2]
        assert body["recommendations"][0]["name"] == "The Star Saga"
        assert all(r["score"] == 0.0 for r in body["recommendations"])
        assert body["linked_entities"] == [
            {"entity_id": 0, "name": "space opera", "is_item": False}
        ]

    def test_linking_is_case_insensitive_and_deduped(self):
        _, client = make_service()
        session = open_session(client)
        body = ask(client, session, "SPACE OPERA and more space opera").json()
        assert [e["entity_id"] for e in body["linked_entities"]] == [0]

    def test_mentioned_item_never_recommended(self):
        _, client = make_service()
        session = open_session(client)
        body = ask(client, session, "I already watched The Star Saga", k=3).json()
        assert body["linked_entities"][0]["is_item"] is True
        assert [r["item_id"] for r in body["recommendations"]] == [3, 4]

    def test_previous_recommendations_excluded_across_turns(self):
        _, client = make_service()
        session = open_session(client)
        first = ask(client, session, "something fun", k=2).json()
        assert [r["item_id"] for r in first["recommendations"]] == [2, 3]
        second = ask(client, session, "what else", k=2).json()
        assert [r["item_id"] for r in second["recommendations"]] == [4]
        third = ask(client, session, "more please", k=2).json()
        assert third["recommendations"] == []

    def test_sessions_are_isolated(self):
        _, client = make_service()
        busy = open_session(client)
        ask(client, busy, "anything", k=3)
        quiet = open_session(client)
        body = ask(client, quiet, "anything", k=2).json()
        assert [r["item_id"] for r in body["recommendations"]] == [2, 3]

    def test_dialogue_recorded_on_the_session(self):
        state, client = make_service()
        session_id = open_session(client)
        ask(client, session_id, "I love gritty noir", k=1)
        session = state.sessions[session_id]
        assert [u.speaker for u in session.utterances] == ["user", "recommender"]
        assert session.utterances[0].entities == (1,)
        assert session.utterances[1].text.startswith("Recommended: ")
        assert session.utterances[1].entities == (2,)
        assert session.entity_ids == [1]

    def test_k_must_be_positive(self):
        _, client = make_service()
        session = open_session(client)
        response = ask(client, session, "hi", k=0)
        assert response.status_code == 422
        assert response.json()["retriable"] is False

    def test_missing_fields_rejected(self):
        _, client = make_service()
        response = client.post("/api/recommend", json={"utterance": "hi"})
        assert response.status_code == 422
        assert "error" in response.json()

    def test_encoder_outage_maps_to_502_retriable(self):
        class Failing:
            provider_id = "down"

            def encode(self, text):
                raise EncoderError("provider unreachable")

        _, client = make_service(encoder=Failing())
        session = open_session(client)
        response = ask(client, session, "hello")
        assert response.status_code == 502
        body = response.json()
        assert body["retriable"] is True
        assert "provider unreachable" in body["error"]

    def test_model_numeric_failure_maps_to_500(self):
        class NanEncoder:
            provider_id = "nan"

            def encode(self, text):
                return np.full(D_LLM, np.nan)

        _, client = make_service(encoder=NanEncoder())
        session = open_session(client)
        response = ask(client, session, "hello")
        assert response.status_code == 500
        assert response.json()["retriable"] is False


class TestEntitySearch:
    def test_prefix_search_sorted_by_name(self):
        _, client = make_service()
        body = client.get("/api/entities", params={"q": "the"}).json()
        assert [m["name"] for m in body["matches"]] == [
            "The Noir Affair",
            "The Quiet Story",
            "The Star Saga",
        ]
        assert all(m["is_item"] for m in body["matches"])

    def test_limit_truncates(self):
        _, client = make_service()
        body = client.get("/api/entities", params={"q": "the", "limit": 1}).json()
        assert [m["name"] for m in body["matches"]] == ["The Noir Affair"]

    def test_empty_query_lists_everything_in_order(self):
        _, client = make_service()
        body = client.get("/api/entities").json()
        assert [m["entity_id"] for m in body["matches"]] == [1, 0, 3, 4, 2]

    def test_no_match_is_empty(self):
        _, client = make_service()
        assert client.get("/api/entities", params={"q": "zzz"}).json() == {"matches": []}

    def test_limit_validated(self):
        _, client = make_service()
        response = client.get("/api/entities", params={"q": "a", "limit": 0})
        assert response.status_code == 422


class TestCors:
    def test_disabled_by_default(self, monkeypatch):
        monkeypatch.delenv("DACRS_ALLOW_ORIGIN", raising=False)
        _, client = make_service()
        response = client.get("/api/health", headers={"Origin": "http://ui.local"})
        assert "access-control-allow-origin" not in response.headers

    def test_configured_origin_allowed(self, monkeypatch):
        monkeypatch.setenv("DACRS_ALLOW_ORIGIN", "http://ui.local")
        _, client = make_service()
        response = client.get("/api/health", headers={"Origin": "http://ui.local"})
        assert response.headers["access-control-allow-origin"] == "http://ui.local"


class TestBuildState:
    def test_entity_count_mismatch_rejected(self):
        kg = service_kg()
        small = Kg(
            entity_uris=("uri:0",),
            entity_names=("only",),
            is_item=np.array([True]),
            relation_names=("rel",),
            triples=np.zeros((0, 3), dtype=np.int64),
        )
        with pytest.raises(ConfigError):
            build_state(zero_checkpoint(kg), small)

    def test_embeddings_precomputed_and_frozen(self):
        kg = service_kg()
        state = build_state(zero_checkpoint(kg), kg)
        assert state.embeddings.shape == (5, 4)
        with pytest.raises(ValueError):
            state.embeddings[0, 0] = 1.0

    def test_default_encoder_matches_dialogue_dim(self):
        kg = service_kg()
        state = build_state(zero_checkpoint(kg), kg)
        assert isinstance(state.encoder, HashedNgramEncoder)
        assert state.encoder.dim == D_LLM


class TestHandleRecommendDirect:
    def test_returns_plain_dict_for_the_app_layer(self):
        kg = service_kg()
        state = build_state(zero_checkpoint(kg), kg)
        from dacrs.service import Session

        session = Session(session_id="s")
        body = handle_recommend(state, session, "gritty noir fan", k=1)
        assert set(body) == {"recommendations", "linked_entities"}
        assert body["recommendations"][0]["item_id"] == 2
