"""Chat-completions client for vision and text endpoints, with offline mocks.

Every endpoint, mock or live, goes through :class:`EndpointClient`; mocks are
``httpx.MockTransport`` handlers that speak the same wire format, so retry,
rate limiting and request capture behave identically.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
import uuid
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .dataset import ImagePayload, normalize_ws
from .errors import ConfigError, PermanentError, TransientError

logger = logging.getLogger(__name__)

REFUSAL_SENTENCE = "I'm sorry, but I cannot answer this question based on the information provided."
RETRYABLE_STATUS = {429}
FINISH_REASONS = ("stop", "length", "content_filter")


@dataclass(frozen=True)
class GenerationParams:
    max_output_tokens: int = 512
    decoding: str = "greedy"
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if self.decoding != "greedy":
            raise ValueError("only greedy decoding is supported")

    def to_dict(self) -> dict:
        return {
            "max_output_tokens": self.max_output_tokens,
            "decoding": self.decoding,
            "stop_sequences": list(self.stop_sequences),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "GenerationParams":
        d = dict(d or {})
        if "stop_sequences" in d:
            d["stop_sequences"] = tuple(d["stop_sequences"])
        return cls(**d)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class EndpointConfig:
    name: str
    modality: str = "text"  # "vision" or "text"
    base_url: str = ""
    model_id: str = ""
    credential: str | None = None  # env var holding the bearer token
    params: GenerationParams = field(default_factory=GenerationParams)
    timeout: float = 60.0
    max_retries: int = 3
    rate_limit: float = 60.0  # requests per minute
    route: str = "/chat/completions"
    mock: str | None = None
    backoff_base: float = 1.0
    max_tokens_field: str = "max_tokens"

    def __post_init__(self):
        if self.modality not in ("vision", "text"):
            raise ConfigError(f"endpoint {self.name}: modality must be vision or text")
        if self.max_retries < 0:
            raise ConfigError(f"endpoint {self.name}: max_retries must be >= 0")
        if self.rate_limit <= 0:
            raise ConfigError(f"endpoint {self.name}: rate_limit must be > 0")
        if not self.mock and not self.base_url:
            raise ConfigError(f"endpoint {self.name}: base_url required for non-mock endpoints")
        if not self.model_id:
            object.__setattr__(self, "model_id", f"mock:{self.mock}" if self.mock else self.name)

    @property
    def url(self) -> str:
        if self.mock:
            return f"http://mock.{_host_safe(self.name)}.invalid{self.route}"
        return self.base_url.rstrip("/") + self.route

    def fingerprint(self) -> dict:
        """Identity of the endpoint for run manifests; never includes secrets."""
        return {
            "name": self.name,
            "modality": self.modality,
            "model_id": self.model_id,
            "base_url": self.base_url,
            "mock": self.mock,
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EndpointConfig":
        d = dict(d)
        d["params"] = GenerationParams.from_dict(d.get("params"))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"endpoint {d.get('name')}: unknown keys {sorted(unknown)}")
        if "name" not in d:
            raise ConfigError("endpoint entry without a name")
        return cls(**d)


def _host_safe(name: str) -> str:
    return re.sub(r"[^a-z0-9-]", "-", name.lower()) or "x"


def mock_endpoint(name: str, spec: str, modality: str = "text", **kw) -> EndpointConfig:
    kw.setdefault("rate_limit", 1e7)
    kw.setdefault("backoff_base", 0.0)
    return EndpointConfig(name=name, modality=modality, mock=spec, **kw)


@dataclass(frozen=True)
class ModelReply:
    text: str
    finish_reason: str
    latency: float
    request_id: str


class TokenBucket:
    """Per-endpoint limiter: ``rate_per_minute`` refill, ``capacity`` burst."""

    def __init__(self, rate_per_minute: float, capacity: float = 1.0,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = rate_per_minute / 60.0
        self.capacity = capacity
        self.tokens = capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            now = self._clock()
            self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
            self._last = now
            self.tokens -= 1.0
            wait = -self.tokens / self.rate if self.tokens < 0 else 0.0
        if wait > 0:
            self._sleep(wait)
        return wait


def question_hash(question_text: str) -> str:
    return hashlib.sha256(normalize_ws(question_text).encode("utf-8")).hexdigest()


def _request_parts(body: dict) -> tuple[str, list[bytes]]:
    texts, images = [], []
    for msg in body.get("messages", []):
        content = msg.get("content")
        if isinstance(content, str):
            texts.append(content)
            continue
        for part in content or []:
            if part.get("type") == "text":
                texts.append(part["text"])
            elif part.get("type") == "image_url":
                url = part["image_url"]["url"]
                images.append(base64.b64decode(url.partition(",")[2]))
    return "\n".join(texts), images


def _question_from_prompt(text: str) -> str | None:
    idx = text.rfind("Question: ")
    if idx < 0:
        return None
    return text[idx + len("Question: "):].split("\n", 1)[0]


def _description_from_prompt(text: str) -> str:
    start = text.find("Description: ")
    if start < 0:
        return text
    start += len("Description: ")
    end = text.find("\nQuestion: ", start)
    return text[start:] if end < 0 else text[start:end]


class MockBackend:
    """Deterministic stand-in for a model endpoint.

    Specs: ``echo`` (reply = request text), ``echo-description`` (reply = the
    Description block of a reasoning prompt), ``fixed:<text>``,
    ``keyed:<json-file>`` (map from image sha256 digest or question hash to
    reply text; ``"*"`` is the fallback), ``refuse``.
    """

    def __init__(self, spec: str, mapping: dict[str, str] | None = None):
        self.spec = spec
        kind, _, arg = spec.partition(":")
        self.kind = kind
        self.arg = arg
        self.mapping = mapping
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        if kind == "keyed" and mapping is None:
            if not arg:
                raise ConfigError("keyed mock needs a map file: keyed:<path>")
            try:
                self.mapping = json.loads(Path(arg).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read keyed mock map {arg}: {exc}") from None
        elif kind not in ("echo", "echo-description", "fixed", "refuse", "keyed"):
            raise ConfigError(f"unknown mock spec {spec!r}")

    def reply(self, text: str, images: Sequence[bytes]) -> tuple[str, str]:
        if self.kind == "echo":
            return text, "stop"
        if self.kind == "echo-description":
            return _description_from_prompt(text), "stop"
        if self.kind == "fixed":
            return self.arg, "stop"
        if self.kind == "refuse":
            return REFUSAL_SENTENCE, "stop"
        keys = [hashlib.sha256(img).hexdigest() for img in images]
        q = _question_from_prompt(text)
        if q is not None:
            keys.append(question_hash(q))
        keys.append(question_hash(text))
        for key in keys:
            if key in self.mapping:
                return self.mapping[key], "stop"
        if "*" in self.mapping:
            return self.mapping["*"], "stop"
        return "", "keyed-miss"

    def __call__(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        with self._lock:
            self.requests.append(body)
            n = len(self.requests)
        text, finish = self.reply(*_request_parts(body))
        payload = {
            "id": f"mock-{n}",
            "object": "chat.completion",
            "model": body.get("model"),
            "choices": [
                {"index": 0, "message": {"role": "assistant", "content": text},
                 "finish_reason": finish}
            ],
        }
        return httpx.Response(200, json=payload)


def make_mock(spec: str, mapping: dict[str, str] | None = None) -> MockBackend:
    return MockBackend(spec, mapping)


def _redact(body: dict) -> dict:
    body = copy.deepcopy(body)
    for msg in body.get("messages", []):
        if isinstance(msg.get("content"), list):
            for part in msg["content"]:
                if part.get("type") == "image_url":
                    url = part["image_url"]["url"]
                    part["image_url"]["url"] = url[:40] + f"...<{len(url)} chars>"
    return body


class EndpointClient:
    """Thread-safe client shared by all pipeline workers."""

    def __init__(self, transports: dict[str, httpx.BaseTransport] | None = None,
                 sleep: Callable[[float], None] = time.sleep, seed: int | None = None):
        self._transports = dict(transports or {})
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._http: dict[str, httpx.Client] = {}
        self._buckets: dict[str, TokenBucket] = {}
        self._no_temperature: set[str] = set()
        self.mocks: dict[str, MockBackend] = {}
        self.request_counts: Counter[str] = Counter()
        self.warnings: list[str] = []

    def _setup(self, ep: EndpointConfig) -> tuple[httpx.Client, TokenBucket]:
        with self._lock:
            if ep.name not in self._http:
                transport = self._transports.get(ep.name)
                if transport is None and ep.mock:
                    backend = make_mock(ep.mock)
                    self.mocks[ep.name] = backend
                    transport = httpx.MockTransport(backend)
                self._http[ep.name] = httpx.Client(transport=transport, timeout=ep.timeout)
                self._buckets[ep.name] = TokenBucket(ep.rate_limit, sleep=self._sleep)
            return self._http[ep.name], self._buckets[ep.name]

    def close(self) -> None:
        with self._lock:
            for c in self._http.values():
                c.close()
            self._http.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def perceive(self, endpoint: EndpointConfig, image: ImagePayload | Sequence[ImagePayload],
                 instruction: str) -> ModelReply:
        if endpoint.modality != "vision":
            raise ConfigError(f"endpoint {endpoint.name} is not a vision endpoint")
        images = [image] if isinstance(image, ImagePayload) else list(image)
        content = [{"type": "text", "text": instruction}]
        content += [{"type": "image_url", "image_url": {"url": img.data_url()}} for img in images]
        return self._chat(endpoint, content)

    def complete(self, endpoint: EndpointConfig, prompt: str) -> ModelReply:
        # vision endpoints accept text-only requests too (decoupled self-runs)
        return self._chat(endpoint, prompt)

    def build_body(self, endpoint: EndpointConfig, content) -> dict:
        params = endpoint.params
        body = {
            "model": endpoint.model_id,
            "messages": [{"role": "user", "content": content}],
            endpoint.max_tokens_field: params.max_output_tokens,
        }
        if endpoint.name not in self._no_temperature:
            body["temperature"] = 0
        if params.stop_sequences:
            body["stop"] = list(params.stop_sequences)
        return body

    def _headers(self, endpoint: EndpointConfig) -> dict:
        headers = {"Content-Type": "application/json"}
        if endpoint.credential:
            token = os.environ.get(endpoint.credential)
            if not token:
                raise ConfigError(
                    f"endpoint {endpoint.name}: environment variable {endpoint.credential} is not set"
                )
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _chat(self, endpoint: EndpointConfig, content) -> ModelReply:
        http, bucket = self._setup(endpoint)
        headers = self._headers(endpoint)
        attempt = 0
        while True:
            body = self.build_body(endpoint, content)
            if logger.isEnabledFor(logging.DEBUG):
                logger.debug("POST %s %s", endpoint.url, json.dumps(_redact(body))[:2000])
            bucket.acquire()
            with self._lock:
                self.request_counts[endpoint.name] += 1
            started = time.monotonic()
            try:
                resp = http.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout)
                resp.read()
            except httpx.TimeoutException as exc:
                error: Exception = TransientError(f"{endpoint.name}: timeout ({exc})")
            except httpx.TransportError as exc:
                error = TransientError(f"{endpoint.name}: connection error ({exc!r})")
            else:
                latency = time.monotonic() - started
                status = resp.status_code
                if status == 200:
                    try:
                        return _parse_reply(resp, latency)
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        error = TransientError(f"{endpoint.name}: malformed reply ({exc})")
                elif status in RETRYABLE_STATUS or status >= 500:
                    error = TransientError(f"{endpoint.name}: HTTP {status}")
                elif status == 400 and "temperature" in body and "temperature" in resp.text.lower():
                    msg = f"{endpoint.name} rejected temperature=0; using the endpoint default decoding"
                    logger.warning(msg)
                    with self._lock:
                        self._no_temperature.add(endpoint.name)
                        self.warnings.append(msg)
                    continue
                else:
                    raise PermanentError(f"{endpoint.name}: HTTP {status}: {resp.text[:300]}")
            if attempt >= endpoint.max_retries:
                raise error
            delay = endpoint.backoff_base * (2 ** attempt)
            with self._lock:
                delay *= self._rng.uniform(0.8, 1.2)
            logger.warning("%s; retry %d/%d in %.2fs", error, attempt + 1, endpoint.max_retries, delay)
            if delay > 0:
                self._sleep(delay)
            attempt += 1


def _parse_reply(resp: httpx.Response, latency: float) -> ModelReply:
    payload = resp.json()
    choice = payload["choices"][0]
    content = choice["message"].get("content")
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    text = (content or "").rstrip()
    finish = choice.get("finish_reason") or "other"
    if text == "" and finish == "stop":
        finish = "empty"
    request_id = payload.get("id") or resp.headers.get("x-request-id") or uuid.uuid4().hex
    return ModelReply(text=text, finish_reason=finish, latency=latency, request_id=request_id)

