import numpy as np
import pytest
from fastapi.testclient import TestClient

from eslab.models import build_model
from eslab.oracle import OracleSession
from eslab.service import create_app


@pytest.fixture
def session():
    return OracleSession(build_model("mlp-small", (4,), 3, seed=0), budget=10)


@pytest.fixture
def client(session):
    return TestClient(create_app(session))


def test_query_matches_in_process(client, session, rng):
    x = rng.standard_normal((3, 4))
    expected = OracleSession(session.victim).query(x)
    r = client.post("/query", json={"x": x.tolist()})
    assert r.status_code == 200
    body = r.json()
    assert body["queries_used"] == 3
    np.testing.assert_array_equal(np.array(body["y"]), expected)


def test_info_and_cost(client, rng):
    client.post("/query", json={"x": rng.standard_normal((4, 4)).tolist()})
    assert client.get("/info").json() == {"class_count": 3, "input_shape": [4], "queries_used": 4, "budget": 10}
    assert client.get("/cost").json() == {"queries_used": 4, "price_per_1k": 0.25, "cost": 0.001}


def test_budget_is_429(client, session, rng):
    r = client.post("/query", json={"x": rng.standard_normal((11, 4)).tolist()})
    assert r.status_code == 429 and r.json()["detail"] == "budget_exhausted"
    assert session.query_count == 0


@pytest.mark.parametrize("payload", [{"x": []}, {"x": [[1, 2], [3]]}, {"y": [[1]]}, {"x": "abc"}])
def test_malformed_is_422(client, payload):
    assert client.post("/query", json=payload).status_code == 422


def test_wrong_width_is_bad_shape(client):
    r = client.post("/query", json={"x": [[1.0, 2.0]]})
    assert r.status_code == 422 and r.json()["detail"] == "bad_shape"
