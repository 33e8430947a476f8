import json

import pytest
from fastapi.testclient import TestClient

from moelab.fixtures import fixture_path
from moelab.model import canonical_json
from moelab.service import (
    app,
    handle_advise,
    handle_cost,
    handle_estimate,
    handle_fixtures,
    handle_plan_dynamic_cp,
    handle_plan_echo,
    handle_simulate,
)


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


@pytest.fixture(scope="module")
def deepseek_payload():
    with open(fixture_path("deepseek_v3.json")) as f:
        return json.load(f)


def test_estimate_endpoint_ok(client, deepseek_payload):
    r = client.post("/api/v1/estimate", json=deepseek_payload)
    assert r.status_code == 200
    body = r.json()
    assert body["schema_version"] == 1
    assert body["request_digest"]
    assert body["result"]["total"] > 0


def test_estimate_pp_mismatch_422(client, deepseek_payload):
    bad = json.loads(json.dumps(deepseek_payload))
    bad["parallel"]["ep"] = 32  # MoE block 32 != attention block 64
    r = client.post("/api/v1/estimate", json=bad)
    assert r.status_code == 422
    rules = {d["rule"] for d in r.json()["diagnostics"]}
    assert "PP mismatch" in rules or "world-size mismatch" in rules


def test_malformed_json_400(client):
    r = client.post("/api/v1/estimate", content=b"{oops",
                    headers={"content-type": "application/json"})
    assert r.status_code == 400
    assert r.json()["diagnostics"]


def test_fixtures_endpoint(client):
    r = client.get("/api/v1/fixtures")
    assert r.status_code == 200
    names = [f["name"] for f in r.json()["result"]["fixtures"]]
    assert names == ["deepseek-v3", "qwen3-235b"]


def test_simulate_endpoint_paper_layout(client):
    r = client.post("/api/v1/simulate", json={
        "layout": "Et*3|(tt|)*29m|L", "pp": 16, "vpp": 2,
        "num_microbatches": 32, "include_events": False,
    })
    assert r.status_code == 200
    res = r.json()["result"]
    assert 0 < res["bubble_ratio"] < 1
    assert res["layout_canonical"] == "Et*3|(t*2|)*29m|L"


def test_simulate_bad_layout_422(client):
    r = client.post("/api/v1/simulate", json={
        "layout": "t|t", "pp": 3, "vpp": 1, "num_microbatches": 2})
    assert r.status_code == 422


def test_plan_endpoints(client):
    r = client.post("/api/v1/plan/echo", json={"counts": [10, 2, 2, 2]})
    assert r.status_code == 200
    assert r.json()["result"]["clone_count"] == 3
    r = client.post("/api/v1/plan/dynamic-cp", json={
        "lengths": [4096, 1024, 1024], "memory_budget_tokens": 2048, "cp_max": 2})
    assert r.status_code == 200


def test_advise_endpoint(client, deepseek_payload):
    r = client.post("/api/v1/advise", json=deepseek_payload)
    assert r.status_code == 200
    assert any(rec["guideline"] == "G2" for rec in r.json()["result"])


def test_cost_endpoint(client, deepseek_payload):
    r = client.post("/api/v1/cost", json=deepseek_payload)
    assert r.status_code == 200
    assert r.json()["result"]["a2a_send_volume_bytes"] == 462422016


def test_service_matches_handlers_byte_identical(client, deepseek_payload):
    """CLI and HTTP share the handler layer; responses are byte-identical."""
    for path, handler in (
        ("/api/v1/estimate", handle_estimate),
        ("/api/v1/cost", handle_cost),
        ("/api/v1/advise", handle_advise),
    ):
        http = client.post(path, json=deepseek_payload).text
        direct = canonical_json(handler(deepseek_payload))
        assert http == direct, path
    assert client.get("/api/v1/fixtures").text == canonical_json(handle_fixtures())


def test_service_stateless_request_order_irrelevant(client, deepseek_payload):
    a1 = client.post("/api/v1/estimate", json=deepseek_payload).text
    client.post("/api/v1/plan/echo", json={"counts": [9, 1, 1, 1]})
    client.post("/api/v1/simulate", json={
        "layout": "t|t", "pp": 2, "vpp": 1, "num_microbatches": 4,
        "include_events": False})
    a2 = client.post("/api/v1/estimate", json=deepseek_payload).text
    assert a1 == a2


def test_response_echoes_request_digest(client, deepseek_payload):
    r1 = client.post("/api/v1/estimate", json=deepseek_payload).json()
    r2 = client.post("/api/v1/cost", json=deepseek_payload).json()
    assert r1["request_digest"] == r2["request_digest"]
