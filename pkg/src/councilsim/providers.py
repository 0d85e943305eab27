"""Text-generation backends.

Every backend exposes ``generate(request) -> GenerationResponse`` and a
``provider_id`` attribute. ``GenerationRequest.context`` carries routing tags
(role, phase, run, attempt, ...) used by scripted backends and logs; it is
never sent over the wire and never enters the cache key.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import string
import tempfile
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import requests

from councilsim.core import canonical_json
from councilsim.errors import ConfigError, PreconditionError, ProtocolError, ProviderError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationRequest:
    model: str
    system: str
    user: str
    temperature: float = 0.7
    seed: int | None = None
    max_tokens: int = 1024
    context: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.system.strip() or not self.user.strip():
            raise PreconditionError("system and user prompts must be non-empty")
        if self.temperature < 0:
            raise PreconditionError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise PreconditionError("max_tokens must be positive")

    def wire_body(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "system": self.system,
            "user": self.user,
            "temperature": self.temperature,
            "seed": self.seed,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    provider_id: str
    model: str
    latency: float = 0.0
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class Provider(Protocol):
    provider_id: str

    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


def cache_key(request: GenerationRequest) -> str:
    """Content hash over the fields that determine a completion."""
    return hashlib.sha256(canonical_json(request.wire_body()).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# scripted backend


class _Formatter(string.Formatter):
    def get_value(self, key, args, kwargs):  # type: ignore[override]
        if isinstance(key, str):
            return kwargs.get(key, "{" + key + "}")
        return super().get_value(key, args, kwargs)


def _matches(rule: Mapping[str, Any], context: Mapping[str, Any]) -> bool:
    for key, want in rule.items():
        have = context.get(key)
        if isinstance(want, list):
            if have not in want and str(have) not in [str(w) for w in want]:
                return False
        elif have != want and str(have) != str(want):
            return False
    return True


class ScriptedProvider:
    """Deterministic backend answering from an ordered list of rules.

    A rule is ``{"match": {...}, "text": "..."}``; the first rule whose match
    keys all equal the request context wins. Match values may be lists (any
    member matches). ``text`` is formatted with the context, so ``{role}`` or
    ``{run}`` expand. A rule may give ``texts`` plus ``cycle`` (a context key
    holding an integer) to rotate through several answers. A callable may be
    supplied instead of rules.
    """

    def __init__(
        self,
        rules: Sequence[Mapping[str, Any]] | Callable[[GenerationRequest], str] = (),
        *,
        provider_id: str = "scripted",
        fallback: str | None = None,
    ):
        self.provider_id = provider_id
        self._fn = rules if callable(rules) else None
        self._rules = [] if callable(rules) else [dict(r) for r in rules]
        self._fallback = fallback
        self._lock = threading.Lock()
        self.calls = 0
        self.requests: list[GenerationRequest] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike[str], **kwargs: Any) -> ScriptedProvider:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["rules"], fallback=data.get("fallback"), **kwargs)

    def lookup(self, request: GenerationRequest) -> str:
        if self._fn is not None:
            return self._fn(request)
        ctx = dict(request.context)
        ctx.setdefault("model", request.model)
        for rule in self._rules:
            if _matches(rule.get("match", {}), ctx):
                if "texts" in rule:
                    texts = rule["texts"]
                    text = texts[int(ctx.get(rule.get("cycle", "run"), 0)) % len(texts)]
                else:
                    text = rule["text"]
                return _Formatter().format(text, **ctx)
        if self._fallback is not None:
            return _Formatter().format(self._fallback, **ctx)
        raise ProviderError(f"script has no entry for context {ctx}")

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        text = self.lookup(request)
        with self._lock:
            self.calls += 1
            self.requests.append(request)
        return GenerationResponse(text=text, provider_id=self.provider_id, model=request.model)


# --------------------------------------------------------------------------
# HTTP backends


def _adapter_generic(req: GenerationRequest) -> tuple[str, dict[str, Any]]:
    return "", req.wire_body()


def _adapter_ollama(req: GenerationRequest) -> tuple[str, dict[str, Any]]:
    options: dict[str, Any] = {"temperature": req.temperature, "num_predict": req.max_tokens}
    if req.seed is not None:
        options["seed"] = req.seed
    return "/api/chat", {
        "model": req.model,
        "stream": False,
        "messages": [
            {"role": "system", "content": req.system},
            {"role": "user", "content": req.user},
        ],
        "options": options,
    }


def _adapter_openai(req: GenerationRequest) -> tuple[str, dict[str, Any]]:
    body: dict[str, Any] = {
        "model": req.model,
        "messages": [
            {"role": "system", "content": req.system},
            {"role": "user", "content": req.user},
        ],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    }
    if req.seed is not None:
        body["seed"] = req.seed
    return "/v1/chat/completions", body


def _adapter_anthropic(req: GenerationRequest) -> tuple[str, dict[str, Any]]:
    return "/v1/messages", {
        "model": req.model,
        "system": req.system,
        "messages": [{"role": "user", "content": req.user}],
        "temperature": min(req.temperature, 1.0),
        "max_tokens": req.max_tokens,
    }


def _extract_text(kind: str, payload: Any) -> tuple[str, int | None, int | None]:
    try:
        if kind == "generic":
            return str(payload["text"]), payload.get("prompt_tokens"), payload.get("completion_tokens")
        if kind == "ollama":
            return (
                str(payload["message"]["content"]),
                payload.get("prompt_eval_count"),
                payload.get("eval_count"),
            )
        if kind == "openai":
            usage = payload.get("usage") or {}
            return (
                str(payload["choices"][0]["message"]["content"] or ""),
                usage.get("prompt_tokens"),
                usage.get("completion_tokens"),
            )
        if kind == "anthropic":
            usage = payload.get("usage") or {}
            text = "".join(b.get("text", "") for b in payload["content"] if b.get("type") == "text")
            return text, usage.get("input_tokens"), usage.get("output_tokens")
    except (KeyError, IndexError, TypeError, AttributeError) as exc:
        raise ProtocolError(f"malformed {kind} payload: {exc!r}") from None
    raise ConfigError(f"unknown adapter kind {kind!r}")


ADAPTERS: dict[str, Callable[[GenerationRequest], tuple[str, dict[str, Any]]]] = {
    "generic": _adapter_generic,
    "ollama": _adapter_ollama,
    "openai": _adapter_openai,
    "anthropic": _adapter_anthropic,
}


@dataclass(frozen=True)
class Endpoint:
    id: str
    base_url: str
    adapter: str = "generic"
    auth_env: str | None = None

    def __post_init__(self) -> None:
        if self.adapter not in ADAPTERS:
            raise ConfigError(f"endpoint {self.id!r}: unknown adapter {self.adapter!r}")

    @classmethod
    def from_dict(cls, endpoint_id: str, d: Mapping[str, Any]) -> Endpoint:
        return cls(
            id=endpoint_id,
            base_url=d["base_url"],
            adapter=d.get("adapter", "generic"),
            auth_env=d.get("auth_env"),
        )


class HttpProvider:
    """JSON-over-HTTP backend with retries and a per-endpoint in-flight cap."""

    def __init__(
        self,
        endpoint: Endpoint,
        *,
        attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 300.0,
        max_in_flight: int = 2,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.provider_id = endpoint.id
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._session = session or requests.Session()
        self.calls = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.endpoint.auth_env:
            token = os.environ.get(self.endpoint.auth_env)
            if not token:
                raise ConfigError(f"env var {self.endpoint.auth_env} is not set")
            if self.endpoint.adapter == "anthropic":
                headers["x-api-key"] = token
            else:
                headers["Authorization"] = f"Bearer {token}"
        if self.endpoint.adapter == "anthropic":
            headers["anthropic-version"] = "2023-06-01"
        return headers

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        path, body = ADAPTERS[self.endpoint.adapter](request)
        url = self.endpoint.base_url.rstrip("/") + path
        headers = self._headers()
        last: Exception | None = None
        for attempt in range(self.attempts):
            start = time.monotonic()
            try:
                with self._slots:
                    self.calls += 1
                    resp = self._session.post(url, json=body, headers=headers, timeout=self.timeout)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise requests.HTTPError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                if resp.status_code >= 400:
                    raise ProviderError(f"{url} rejected request: HTTP {resp.status_code}: {resp.text[:500]}")
                try:
                    payload = resp.json()
                except ValueError:
                    raise ProtocolError(f"{url} returned non-JSON body") from None
                text, p_tok, c_tok = _extract_text(self.endpoint.adapter, payload)
                return GenerationResponse(
                    text=text,
                    provider_id=self.provider_id,
                    model=request.model,
                    latency=time.monotonic() - start,
                    prompt_tokens=p_tok,
                    completion_tokens=c_tok,
                )
            except requests.RequestException as exc:
                last = exc
                log.warning("%s attempt %d/%d failed: %s", url, attempt + 1, self.attempts, exc)
                if attempt + 1 < self.attempts:
                    time.sleep(self.backoff * 2**attempt)
        raise ProviderError(f"{url} failed after {self.attempts} attempts: {last}")


# --------------------------------------------------------------------------
# replay cache


class CachedProvider:
    """Content-addressed, append-only response cache in front of another provider."""

    def __init__(self, inner: Provider, directory: str | os.PathLike[str]):
        self.inner = inner
        self.provider_id = inner.provider_id
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.json"

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        key = cache_key(request)
        path = self._path(key)
        if path.exists():
            data = json.loads(path.read_text(encoding="utf-8"))
            with self._lock:
                self.hits += 1
            return GenerationResponse(**data["response"])
        response = self.inner.generate(request)
        with self._lock:
            self.misses += 1
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = canonical_json(
            {"key": key, "request": request.wire_body(), "response": response}, indent=2
        )
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(blob)
        os.replace(tmp, path)
        return response


class Router:
    """Dispatches requests to a provider chosen by endpoint id."""

    def __init__(self, providers: Mapping[str, Provider], default: str | None = None):
        self.providers = dict(providers)
        self.default = default

    def for_endpoint(self, endpoint: str) -> Provider:
        if endpoint in self.providers:
            return self.providers[endpoint]
        if self.default is not None:
            return self.providers[self.default]
        raise ConfigError(f"no provider configured for endpoint {endpoint!r}")
