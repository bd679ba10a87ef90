"""HTTP surface: auth boundaries, conversation flow, review routes, SSE."""

import http.client
import threading
import time

import pytest
import uvicorn
from fastapi.testclient import TestClient

from talk2care import fixtures as bundled
from talk2care.api import Principal, create_app, tokens_from_env
from talk2care.engine import ConversationEngine
from talk2care.errors import ConfigurationError
from talk2care.gateway import ScriptedBackend
from talk2care.pipeline import ProviderPipeline

from conftest import replay_persona

JOHN = {"Authorization": "Bearer tok-john"}
MARY = {"Authorization": "Bearer tok-mary"}
DR = {"Authorization": "Bearer tok-dr"}

TOKENS = {
    "tok-john": Principal("patient", "pt-9d7f31c5"),
    "tok-mary": Principal("patient", "pt-4e1c0b2a"),
    "tok-dr": Principal("provider", "dr-lee"),
}


def make_app(store, **kwargs):
    engine = ConversationEngine(
        store, ScriptedBackend.from_entries(bundled.conversation_script("post_surgery"))
    )
    scripts = bundled.demo_process_scripts()
    pipeline = ProviderPipeline(
        store,
        backend_factory=lambda session: ScriptedBackend.from_entries(
            scripts[session.protocol_id]
        ),
    )
    return create_app(store, engine, pipeline, TOKENS, **kwargs)


@pytest.fixture
def client(loaded_store):
    with TestClient(make_app(loaded_store)) as c:
        yield c


def start_persona_session(client, headers, name="post_surgery"):
    spec = bundled.persona(name)
    r = client.post("/v1/sessions", headers=headers, json={
        "patient_id": spec["patient_id"],
        "protocol_id": spec["protocol_id"],
        "initiator": spec["initiator"],
    })
    assert r.status_code == 201, r.text
    return r.json(), spec


def complete_persona(client, headers, name="post_surgery"):
    body, spec = start_persona_session(client, headers, name)
    sid = body["session_id"]
    for utterance in spec["utterances"]:
        r = client.post(f"/v1/sessions/{sid}/turns", headers=headers,
                        json={"text": utterance})
        assert r.status_code == 200, r.text
    return sid


# -- auth ---------------------------------------------------------

def test_health_needs_no_token(client):
    r = client.get("/v1/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok"}


@pytest.mark.parametrize("headers", [
    {}, {"Authorization": "Basic dXNlcg=="}, {"Authorization": "Bearer nope"},
])
def test_missing_or_unknown_token_is_401(client, headers):
    assert client.get("/v1/sessions/x", headers=headers).status_code == 401


def test_patient_cannot_use_provider_routes(client):
    for path in ["/v1/provider/sessions", "/v1/protocols", "/v1/patients"]:
        r = client.get(path, headers=JOHN)
        assert r.status_code == 403, path


def test_patients_cannot_reach_each_others_sessions(client):
    body, _ = start_persona_session(client, JOHN)
    sid = body["session_id"]
    assert client.get(f"/v1/sessions/{sid}", headers=MARY).status_code == 403
    assert client.post(f"/v1/sessions/{sid}/turns", headers=MARY,
                       json={"text": "hi"}).status_code == 403
    # And Mary cannot open a session in John's name.
    r = client.post("/v1/sessions", headers=MARY, json={
        "patient_id": "pt-9d7f31c5", "protocol_id": "post_surgery",
    })
    assert r.status_code == 403


def test_provider_sees_any_session(client):
    body, _ = start_persona_session(client, JOHN)
    r = client.get(f"/v1/sessions/{body['session_id']}", headers=DR)
    assert r.status_code == 200


# -- session lifecycle over HTTP ----------------------------------------------

def test_create_session_defaults_initiator_to_role(client):
    r = client.post("/v1/sessions", headers=DR, json={
        "patient_id": "pt-9d7f31c5", "protocol_id": "post_surgery",
    })
    assert r.status_code == 201
    assert r.json()["initiator"] == "provider"
    # Provider-initiated sessions open with an assistant greeting.
    assert r.json()["turns"][0]["speaker"] == "assistant"


def test_create_session_rejects_bad_initiator(client):
    r = client.post("/v1/sessions", headers=DR, json={
        "patient_id": "pt-9d7f31c5", "protocol_id": "post_surgery",
        "initiator": "robot",
    })
    assert r.status_code == 422


def test_create_session_unknown_ids_404(client):
    r = client.post("/v1/sessions", headers=DR, json={
        "patient_id": "pt-ghost", "protocol_id": "post_surgery",
    })
    assert r.status_code == 404
    r = client.post("/v1/sessions", headers=DR, json={
        "patient_id": "pt-9d7f31c5", "protocol_id": "ghost",
    })
    assert r.status_code == 404


def test_unknown_session_404(client):
    assert client.get("/v1/sessions/nope", headers=DR).status_code == 404


def test_turn_round_trip(client):
    body, spec = start_persona_session(client, JOHN)
    sid = body["session_id"]
    r = client.post(f"/v1/sessions/{sid}/turns", headers=JOHN,
                    json={"text": spec["utterances"][0]})
    assert r.status_code == 200
    payload = r.json()
    assert payload["reply"]["speaker"] == "assistant"
    assert payload["session"]["turns"][-1] == payload["reply"]


def test_empty_turn_is_422(client):
    body, _ = start_persona_session(client, JOHN)
    r = client.post(f"/v1/sessions/{body['session_id']}/turns", headers=JOHN,
                    json={"text": "   "})
    assert r.status_code == 422


def test_off_script_turn_maps_backend_failure_to_502(client):
    body, _ = start_persona_session(client, JOHN)
    r = client.post(f"/v1/sessions/{body['session_id']}/turns", headers=JOHN,
                    json={"text": "this utterance is in no script"})
    assert r.status_code == 502


def test_completed_session_rejects_further_turns(client):
    sid = complete_persona(client, JOHN)
    session = client.get(f"/v1/sessions/{sid}", headers=JOHN).json()
    assert session["status"] == "completed"
    r = client.post(f"/v1/sessions/{sid}/turns", headers=JOHN, json={"text": "hello?"})
    assert r.status_code == 409
    assert client.post(f"/v1/sessions/{sid}/close", headers=JOHN).status_code == 409


def test_close_aborts_active_session(client):
    body, _ = start_persona_session(client, JOHN)
    r = client.post(f"/v1/sessions/{body['session_id']}/close", headers=JOHN)
    assert r.status_code == 200
    assert r.json()["status"] == "aborted"


# -- idempotency ---------------------------------------------------------

def test_idempotent_create_replays_cached_response(client):
    payload = {"patient_id": "pt-9d7f31c5", "protocol_id": "post_surgery"}
    key = {"Idempotency-Key": "create-1"}
    first = client.post("/v1/sessions", headers=JOHN | key, json=payload)
    second = client.post("/v1/sessions", headers=JOHN | key, json=payload)
    assert first.status_code == second.status_code == 201
    assert second.json() == first.json()
    assert "x-idempotent-replay" not in first.headers
    assert second.headers["x-idempotent-replay"] == "true"


def test_distinct_idempotency_keys_create_distinct_sessions(client):
    payload = {"patient_id": "pt-9d7f31c5", "protocol_id": "post_surgery"}
    a = client.post("/v1/sessions", headers=JOHN | {"Idempotency-Key": "a"},
                    json=payload)
    b = client.post("/v1/sessions", headers=JOHN | {"Idempotency-Key": "b"},
                    json=payload)
    assert a.json()["session_id"] != b.json()["session_id"]


def test_gets_ignore_idempotency_keys(client):
    key = {"Idempotency-Key": "g"}
    client.get("/v1/health", headers=key)
    r = client.get("/v1/health", headers=key)
    assert "x-idempotent-replay" not in r.headers


# -- provider review ---------------------------------------------------------

def process_both_personas(client, loaded_store):
    john_sid = replay_persona(loaded_store, "post_surgery").session_id
    mary_sid = replay_persona(loaded_store, "daily_care").session_id
    for sid in (john_sid, mary_sid):
        r = client.post(f"/v1/provider/sessions/{sid}/process", headers=DR)
        assert r.status_code == 200, r.text
        assert set(r.json()["stages"].values()) == {"done"}
    return john_sid, mary_sid


def test_listing_orders_risky_sessions_first(client, loaded_store):
    john_sid, mary_sid = process_both_personas(client, loaded_store)
    rows = client.get("/v1/provider/sessions", headers=DR).json()["sessions"]
    assert [r["session_id"] for r in rows] == [mary_sid, john_sid]
    mary, john = rows
    assert mary["risk_level"] == "moderate" and mary["risk_color"] == "yellow"
    assert john["risk_level"] == "low" and john["risk_color"] == "green"
    assert mary["patient_name"] and mary["turn_count"] > 0


def test_listing_filters_and_pagination(client, loaded_store):
    john_sid, mary_sid = process_both_personas(client, loaded_store)

    by_patient = client.get("/v1/provider/sessions",
                            params={"patient_id": "pt-9d7f31c5"}, headers=DR).json()
    assert [r["session_id"] for r in by_patient["sessions"]] == [john_sid]

    by_risk = client.get("/v1/provider/sessions", params={"risk": "moderate"},
                         headers=DR).json()
    assert [r["session_id"] for r in by_risk["sessions"]] == [mary_sid]

    page = client.get("/v1/provider/sessions",
                      params={"limit": 1, "offset": 1}, headers=DR).json()
    assert page["total"] == 2
    assert [r["session_id"] for r in page["sessions"]] == [john_sid]

    bad = client.get("/v1/provider/sessions", params={"status": "bogus"}, headers=DR)
    assert bad.status_code == 422


def test_done_flow_and_filter(client, loaded_store):
    john_sid, mary_sid = process_both_personas(client, loaded_store)
    r = client.post(f"/v1/provider/sessions/{john_sid}/done", headers=DR)
    assert r.status_code == 200 and r.json()["done"] is True
    # Marking done twice is a conflict, not a silent success.
    assert client.post(f"/v1/provider/sessions/{john_sid}/done",
                       headers=DR).status_code == 409

    open_rows = client.get("/v1/provider/sessions", params={"done": "false"},
                           headers=DR).json()["sessions"]
    assert [r["session_id"] for r in open_rows] == [mary_sid]


def test_detail_carries_all_artifacts(client, loaded_store):
    john_sid, _ = process_both_personas(client, loaded_store)
    detail = client.get(f"/v1/provider/sessions/{john_sid}", headers=DR).json()
    assert detail["session"]["status"] == "completed"
    assert detail["patient"]["patient_id"] == "pt-9d7f31c5"
    assert detail["protocol"]["protocol_id"] == "post_surgery"
    assert detail["summary"]["chief_concern"]
    assert detail["highlights"]["spans"]
    assert detail["risk"]["level"] == "low"
    assert detail["risk"]["color"] == "green"
    assert detail["done"] is False
    assert detail["processing"]["version"] == 1
    # Spans must point at real offsets in the returned transcript.
    for span in detail["highlights"]["spans"]:
        turn = detail["session"]["turns"][span["turn_index"]]
        assert turn["text"][span["char_start"]:span["char_end"]] == span["quote"]


def test_actions_validate_kind(client, loaded_store):
    sid = replay_persona(loaded_store, "post_surgery").session_id
    good = client.post(f"/v1/provider/sessions/{sid}/actions", headers=DR,
                       json={"kind": "note", "body": "check the wound photo"})
    assert good.status_code == 201
    assert good.json()["author"] == "dr-lee"

    bad = client.post(f"/v1/provider/sessions/{sid}/actions", headers=DR,
                      json={"kind": "teleport"})
    assert bad.status_code == 422
    assert "note" in bad.json()["detail"]

    detail = client.get(f"/v1/provider/sessions/{sid}", headers=DR).json()
    assert [a["kind"] for a in detail["actions"]] == ["note"]


def test_process_is_idempotent_and_force_reruns(client, loaded_store):
    sid = replay_persona(loaded_store, "post_surgery").session_id
    first = client.post(f"/v1/provider/sessions/{sid}/process", headers=DR).json()
    again = client.post(f"/v1/provider/sessions/{sid}/process", headers=DR).json()
    forced = client.post(f"/v1/provider/sessions/{sid}/process?force=true",
                         headers=DR).json()
    assert first["version"] == again["version"] == 1
    assert forced["version"] == 2


def test_processing_active_session_is_409(client):
    body, _ = start_persona_session(client, JOHN)
    r = client.post(f"/v1/provider/sessions/{body['session_id']}/process", headers=DR)
    assert r.status_code == 409


# -- administration ---------------------------------------------------------

def test_protocol_round_trip_over_http(client):
    protocol = client.get("/v1/protocols/post_surgery", headers=DR).json()
    protocol["task_summary"] = "Adjusted wording."
    r = client.put("/v1/protocols/post_surgery", headers=DR, json=protocol)
    assert r.status_code == 200
    assert client.get("/v1/protocols/post_surgery",
                      headers=DR).json()["task_summary"] == "Adjusted wording."
    names = [p["protocol_id"] for p in
             client.get("/v1/protocols", headers=DR).json()["protocols"]]
    assert "post_surgery" in names and "daily_care" in names


def test_put_protocol_rejects_malformed_payload(client):
    r = client.put("/v1/protocols/broken", headers=DR, json={"nope": 1})
    assert r.status_code == 422


def test_patient_admin_round_trip(client):
    patient = client.get("/v1/patients/pt-9d7f31c5", headers=DR).json()
    patient["conditions"] = ["knee surgery", "hypertension"]
    assert client.put("/v1/patients/pt-9d7f31c5", headers=DR,
                      json=patient).status_code == 200
    fetched = client.get("/v1/patients/pt-9d7f31c5", headers=DR).json()
    assert fetched["conditions"] == ["knee surgery", "hypertension"]


def test_openapi_and_docs_are_served(client):
    spec = client.get("/v1/openapi")
    assert spec.status_code == 200
    assert "/v1/sessions" in spec.json()["paths"]
    assert client.get("/v1/docs").status_code == 200


# -- token config ---------------------------------------------------------

def test_tokens_from_env(monkeypatch):
    monkeypatch.setenv("AUTH_TOKENS", '{"patients": {"t1": "pt-1"}, '
                                      '"providers": {"t2": "dr-x"}}')
    tokens = tokens_from_env()
    assert tokens["t1"] == Principal("patient", "pt-1")
    assert tokens["t2"] == Principal("provider", "dr-x")

    monkeypatch.setenv("AUTH_TOKENS", "{broken")
    with pytest.raises(ConfigurationError):
        tokens_from_env()

    monkeypatch.delenv("AUTH_TOKENS")
    assert tokens_from_env() == {}


# -- notifications stream ---------------------------------------------------------

class LiveServer:
    """Real uvicorn instance; the test client cannot consume endless streams."""

    def __init__(self, app):
        self._server = uvicorn.Server(uvicorn.Config(
            app, host="127.0.0.1", port=0, log_level="warning",
        ))
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    def __enter__(self):
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server did not start")
            time.sleep(0.01)
        self.port = self._server.servers[0].sockets[0].getsockname()[1]
        return self

    def __exit__(self, *exc):
        self._server.should_exit = True
        self._thread.join(timeout=10)

    def sse(self, headers=None):
        conn = http.client.HTTPConnection("127.0.0.1", self.port, timeout=5)
        conn.request("GET", "/v1/provider/notifications",
                     headers={**DR, **(headers or {})})
        return conn, conn.getresponse()


def read_until(response, marker: str, timeout: float = 5.0) -> list[str]:
    lines = []
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        line = response.readline().decode()
        if not line:
            break
        lines.append(line)
        if marker in line:
            return lines
    raise AssertionError(f"never saw {marker!r}; got {lines!r}")


def test_notifications_stream_live_and_replay(loaded_store):
    app = make_app(loaded_store, auto_process=True, heartbeat_s=0.2)
    with LiveServer(app) as server, TestClient(app) as client:
        conn, resp = server.sse()
        assert resp.status == 200
        assert resp.getheader("content-type").startswith("text/event-stream")
        read_until(resp, ": connected")
        # Heartbeats flow while nothing happens.
        read_until(resp, ": keep-alive", timeout=2.0)

        # Finishing a conversation fires exactly one processed event.
        sid = complete_persona(client, JOHN)
        lines = read_until(resp, "data: ")
        assert any(line.startswith("id: 1") for line in lines)
        assert any("session_processed" in line for line in lines)
        data_line = next(line for line in lines if line.startswith("data: "))
        assert sid in data_line and '"risk_level": "low"' in data_line
        conn.close()

        # A reconnecting client replays what it missed by last seen id.
        conn, resp = server.sse(headers={"Last-Event-ID": "0"})
        lines = read_until(resp, "data: ")
        assert any(line.startswith("id: 1") for line in lines)
        conn.close()

        # And a client that saw event 1 already gets silence, then heartbeats.
        conn, resp = server.sse(headers={"Last-Event-ID": "1"})
        lines = read_until(resp, ": keep-alive", timeout=2.0)
        assert not any(line.startswith("data: ") for line in lines)
        conn.close()


def test_notifications_require_provider_role(client):
    r = client.get("/v1/provider/notifications", headers=JOHN)
    assert r.status_code == 403
