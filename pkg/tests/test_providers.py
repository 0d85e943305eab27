from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from councilsim.errors import ConfigError, PreconditionError, ProtocolError, ProviderError
from councilsim.providers import (
    CachedProvider,
    Endpoint,
    GenerationRequest,
    HttpProvider,
    Router,
    ScriptedProvider,
    cache_key,
)


class FakeBackend:
    """Local HTTP server speaking the four supported wire formats."""

    def __init__(self):
        self.requests = []
        self.fail_next = 0
        self.status = 200
        self.raw_body = None
        self.delay = 0.0
        self.active = 0
        self.peak = 0
        self._lock = threading.Lock()
        backend = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with backend._lock:
                    backend.requests.append((self.path, dict(self.headers), body))
                    backend.active += 1
                    backend.peak = max(backend.peak, backend.active)
                    fail = backend.fail_next > 0
                    backend.fail_next -= 1 if fail else 0
                time.sleep(backend.delay)
                with backend._lock:
                    backend.active -= 1
                if fail:
                    self._send(503, b'{"error": "busy"}')
                elif backend.status != 200:
                    self._send(backend.status, b'{"error": "bad request"}')
                elif backend.raw_body is not None:
                    self._send(200, backend.raw_body)
                else:
                    self._send(200, json.dumps(backend.reply(self.path, body)).encode())

            def _send(self, code, payload):
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def reply(self, path, body):
        text = f"echo {body['model']}"
        if path == "/api/chat":
            return {"message": {"role": "assistant", "content": text}, "prompt_eval_count": 5, "eval_count": 2}
        if path == "/v1/chat/completions":
            return {"choices": [{"message": {"content": text}}], "usage": {"prompt_tokens": 5, "completion_tokens": 2}}
        if path == "/v1/messages":
            return {"content": [{"type": "text", "text": text}], "usage": {"input_tokens": 5, "output_tokens": 2}}
        return {"text": text}

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def backend():
    b = FakeBackend()
    yield b
    b.close()


def req(**kw):
    base = dict(model="m1", system="be brief", user="hello", temperature=0.2, seed=7, max_tokens=16)
    base.update(kw)
    return GenerationRequest(**base)


@pytest.mark.parametrize(
    "adapter, path",
    [("ollama", "/api/chat"), ("openai", "/v1/chat/completions"), ("anthropic", "/v1/messages"), ("generic", "")],
)
def test_adapters_round_trip(backend, adapter, path):
    provider = HttpProvider(Endpoint("ep", backend.url, adapter), backoff=0)
    resp = provider.generate(req())
    assert resp.text == "echo m1"
    sent_path, _, body = backend.requests[-1]
    assert sent_path == (path or "/")
    assert body["model"] == "m1"
    if adapter == "ollama":
        assert body["options"] == {"temperature": 0.2, "num_predict": 16, "seed": 7}
        assert body["messages"][0] == {"role": "system", "content": "be brief"}
    if adapter == "anthropic":
        assert body["system"] == "be brief" and body["messages"] == [{"role": "user", "content": "hello"}]
    if adapter != "generic":
        assert (resp.prompt_tokens, resp.completion_tokens) == (5, 2)


def test_retries_transient_failures(backend):
    backend.fail_next = 2
    provider = HttpProvider(Endpoint("ep", backend.url, "openai"), attempts=3, backoff=0)
    assert provider.generate(req()).text == "echo m1"
    assert len(backend.requests) == 3


def test_gives_up_after_attempts(backend):
    backend.fail_next = 5
    provider = HttpProvider(Endpoint("ep", backend.url, "openai"), attempts=2, backoff=0)
    with pytest.raises(ProviderError):
        provider.generate(req())
    assert len(backend.requests) == 2


def test_client_error_is_not_retried(backend):
    backend.status = 400
    provider = HttpProvider(Endpoint("ep", backend.url, "openai"), attempts=3, backoff=0)
    with pytest.raises(ProviderError) as info:
        provider.generate(req())
    assert not isinstance(info.value, ProtocolError)
    assert len(backend.requests) == 1


@pytest.mark.parametrize("raw", [b"not json", b'{"choices": []}', b'{"unexpected": 1}'])
def test_malformed_payload_is_protocol_error(backend, raw):
    backend.raw_body = raw
    provider = HttpProvider(Endpoint("ep", backend.url, "openai"), backoff=0)
    with pytest.raises(ProtocolError):
        provider.generate(req())


def test_unreachable_endpoint():
    provider = HttpProvider(Endpoint("ep", "http://127.0.0.1:9", "ollama"), attempts=2, backoff=0, timeout=2)
    with pytest.raises(ProviderError):
        provider.generate(req())


def test_in_flight_cap(backend):
    backend.delay = 0.05
    provider = HttpProvider(Endpoint("ep", backend.url, "generic"), max_in_flight=2, backoff=0)
    with ThreadPoolExecutor(max_workers=6) as pool:
        list(pool.map(lambda i: provider.generate(req(user=f"u{i}")), range(8)))
    assert backend.peak <= 2
    assert len(backend.requests) == 8


def test_auth_header_from_env(backend, monkeypatch):
    monkeypatch.setenv("FAKE_TOKEN", "s3cret")
    HttpProvider(Endpoint("ep", backend.url, "openai", "FAKE_TOKEN"), backoff=0).generate(req())
    HttpProvider(Endpoint("ep", backend.url, "anthropic", "FAKE_TOKEN"), backoff=0).generate(req())
    openai_headers = backend.requests[0][1]
    anthropic_headers = backend.requests[1][1]
    assert openai_headers["Authorization"] == "Bearer s3cret"
    assert anthropic_headers["x-api-key"] == "s3cret"
    assert anthropic_headers["anthropic-version"]


def test_missing_auth_env(backend, monkeypatch):
    monkeypatch.delenv("NOPE_TOKEN", raising=False)
    with pytest.raises(ConfigError):
        HttpProvider(Endpoint("ep", backend.url, "openai", "NOPE_TOKEN")).generate(req())


def test_unknown_adapter():
    with pytest.raises(ConfigError):
        Endpoint("ep", "http://x", "smoke-signals")


# -- cache --------------------------------------------------------------------


def test_cache_replays_without_live_calls(backend, tmp_path):
    live = HttpProvider(Endpoint("ep", backend.url, "ollama"), backoff=0)
    cached = CachedProvider(live, tmp_path)
    first = cached.generate(req())
    files = sorted(tmp_path.rglob("*.json"))
    blob = files[0].read_bytes()
    # a fresh cache object over the same directory must not touch the network
    replay = CachedProvider(live, tmp_path)
    backend.close()
    second = replay.generate(req())
    assert second == first
    assert replay.hits == 1 and replay.misses == 0
    assert len(backend.requests) == 1
    assert files[0].read_bytes() == blob


def test_cache_key_ignores_context_and_field_order():
    a = req(context={"role": "x"})
    b = GenerationRequest(max_tokens=16, seed=7, temperature=0.2, user="hello", system="be brief", model="m1")
    assert cache_key(a) == cache_key(b)


def test_cache_key_sensitive_to_temperature():
    assert cache_key(req(temperature=0.2)) != cache_key(req(temperature=0.3))


def test_cache_keys_distinct_over_corpus():
    corpus = [req(user=f"prompt {i}", seed=i % 3, model=f"m{i % 2}") for i in range(10)]
    assert len({cache_key(r) for r in corpus}) == 10


# -- scripted -----------------------------------------------------------------


def test_request_validation():
    with pytest.raises(PreconditionError):
        req(user="  ")
    with pytest.raises(PreconditionError):
        req(temperature=-1)


def test_scripted_rules_match_context():
    provider = ScriptedProvider(
        [
            {"match": {"role": "Guardian", "run": 3, "phase": "evaluation"}, "text": "FIRST: A for {role}"},
            {"match": {"role": ["Driver", "Minimalist"]}, "texts": ["even", "odd"], "cycle": "run"},
        ],
        fallback="fallback {phase}",
    )
    assert provider.generate(req(context={"role": "Guardian", "run": 3, "phase": "evaluation"})).text == "FIRST: A for Guardian"
    assert provider.generate(req(context={"role": "Guardian", "run": "3", "phase": "evaluation"})).text == "FIRST: A for Guardian"
    assert provider.generate(req(context={"role": "Driver", "run": 5})).text == "odd"
    assert provider.generate(req(context={"role": "Minimalist", "run": 4})).text == "even"
    assert provider.generate(req(context={"role": "Guardian", "run": 4, "phase": "debate"})).text == "fallback debate"
    assert provider.calls == 5


def test_scripted_without_match_raises():
    with pytest.raises(ProviderError):
        ScriptedProvider([]).generate(req(context={"role": "x"}))


def test_router_dispatch():
    a, b = ScriptedProvider(lambda r: "a"), ScriptedProvider(lambda r: "b")
    router = Router({"one": a, "two": b})
    assert router.for_endpoint("two") is b
    with pytest.raises(ConfigError):
        router.for_endpoint("three")
