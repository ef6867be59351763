"""Pluggable clients for every external model the pipeline consults.

Each client role has a protocol, a deterministic mock grounded in the
toy world, and an HTTP adapter speaking a small JSON contract:

    POST /caption    {image_b64, n}            -> {captions: [...]}
    POST /encode     {images: [...]}           -> {latent: [...]}
    POST /summarize  {images: [...], prompt}   -> {caption} | {flag: "content_policy_violation"}
    POST /statements {question, options: [...]}-> {statements: [...]}
    POST /embed      {text} | {image_b64}      -> {vector: [...]}

Endpoints come from ``DIFFURANK_ENDPOINT_<CLIENT>`` and the key from
``DIFFURANK_API_KEY``.  A summarizer policy violation is a distinct
outcome, never an exception.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .render import decode_view_tokens
from .scoring import ObjectLatent, Source
from .toy.world import (
    ATTRIBUTE_SLOTS,
    TOKEN_INDEX,
    ToyWorld,
    corrupt_tokens,
    parse_tokens,
    render_caption,
)

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1
_CAPTIONER_TAG = 0x4001
_EMBED_HASH_TAG = 0x4002

CONTENT_POLICY_VIOLATION = "content_policy_violation"
MAX_SUMMARY_IMAGES = 6
DEFAULT_ENCODER_VIEWS = 20
DEFAULT_VLM_PROMPT = (
    "Renderings show different angles of the same set of 3D objects. "
    "Concisely describe 3D object (distinct features, objects, structures, "
    "material, color, etc) as a caption"
)

ENDPOINT_ENV_PREFIX = "DIFFURANK_ENDPOINT_"
API_KEY_ENV = "DIFFURANK_API_KEY"


class ClientError(RuntimeError):
    pass


class ClientTimeoutError(ClientError):
    pass


class ClientAuthError(ClientError):
    pass


class ClientHttpError(ClientError):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class ClientProtocolError(ClientError):
    """Response did not match the wire contract; carries the raw body."""

    def __init__(self, message: str, raw_body: str = ""):
        super().__init__(message)
        self.raw_body = raw_body


@dataclass(frozen=True)
class VlmResult:
    caption: str | None
    policy_violation: bool = False


class CaptionerClient(Protocol):
    def caption_view(self, image_ref: str, n: int) -> list[str]: ...


class LatentEncoderClient(Protocol):
    def encode(self, transparent_view_refs: Sequence[str]) -> ObjectLatent: ...


class VlmSummarizerClient(Protocol):
    def summarize(self, image_refs: Sequence[str], prompt: str = DEFAULT_VLM_PROMPT) -> VlmResult: ...


class StatementConverterClient(Protocol):
    def to_statements(self, question: str, options: Sequence[str]) -> list[str]: ...


class EmbedderClient(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...
    def embed_image(self, image_ref: str) -> np.ndarray: ...


class SafetyScreenClient(Protocol):
    """Interface stub for external NSFW/face screening; no model ships here."""

    def screen(self, image_refs: Sequence[str]) -> list[bool]: ...


def _object_id_from_ref(image_ref: str) -> str:
    # Mock render layout is <root>/<object_id>/<view_id>.png
    return Path(image_ref).parent.name


def _ordered_slot_tokens(tokens_by_slot: dict[str, str]) -> list[str]:
    return [tokens_by_slot[slot] for slot in ATTRIBUTE_SLOTS if slot in tokens_by_slot]


# ---------------------------------------------------------------------------
# Mocks
# ---------------------------------------------------------------------------


@dataclass
class MockCaptioner:
    """Captions mock renders by decoding their encoded attribute tokens.

    Corruption (when error_rate > 0) reuses the toy captioner's seeded
    per-mention replacement, so caption noise is reproducible per seed and
    call order.
    """

    error_rate: float = 0.0
    seed: int = 0
    calls: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(
            np.random.SeedSequence([self.seed & _SEED_MASK, _CAPTIONER_TAG])
        )

    def caption_view(self, image_ref: str, n: int) -> list[str]:
        if n < 1:
            raise ValueError("n must be >= 1")
        self.calls += 1
        tokens = _ordered_slot_tokens(decode_view_tokens(image_ref))
        return [
            render_caption(corrupt_tokens(tokens, self.error_rate, self.rng))
            for _ in range(n)
        ]


def mock_captioner(world: ToyWorld, seed: int | None = None) -> MockCaptioner:
    """Captioner wired to the world's error rate (seed defaults to the world's)."""
    return MockCaptioner(
        error_rate=world.error_rate, seed=world.seed if seed is None else seed
    )


@dataclass
class MockLatentEncoder:
    world: ToyWorld
    expected_views: int = DEFAULT_ENCODER_VIEWS
    calls: int = 0

    def encode(self, transparent_view_refs: Sequence[str]) -> ObjectLatent:
        if len(transparent_view_refs) != self.expected_views:
            raise ValueError(
                f"encoder requires exactly {self.expected_views} transparent views, "
                f"got {len(transparent_view_refs)}"
            )
        object_ids = {_object_id_from_ref(ref) for ref in transparent_view_refs}
        if len(object_ids) != 1:
            raise ValueError(f"views span multiple objects: {sorted(object_ids)}")
        self.calls += 1
        object_id = object_ids.pop()
        obj = self.world.objects_by_id.get(object_id)
        if obj is None:
            raise ValueError(f"unknown object '{object_id}'")
        return ObjectLatent(object_id=object_id, vector=obj.latent.vector, source=Source.ENCODER)


@dataclass
class MockVlmSummarizer:
    """Composes a caption from the union of attributes visible in its inputs."""

    policy_violation_ids: frozenset[str] = frozenset()
    max_images: int | None = MAX_SUMMARY_IMAGES
    calls: int = 0

    def summarize(self, image_refs: Sequence[str], prompt: str = DEFAULT_VLM_PROMPT) -> VlmResult:
        if not image_refs:
            raise ValueError("summarize requires at least one image")
        if self.max_images is not None and len(image_refs) > self.max_images:
            raise ValueError(
                f"summarize accepts at most {self.max_images} images, got {len(image_refs)}"
            )
        self.calls += 1
        object_id = _object_id_from_ref(image_refs[0])
        if object_id in self.policy_violation_ids:
            return VlmResult(caption=None, policy_violation=True)
        union: dict[str, str] = {}
        for ref in image_refs:
            union.update(decode_view_tokens(ref))
        return VlmResult(caption=render_caption(_ordered_slot_tokens(union)))


@dataclass
class MockStatementConverter:
    """Fixture-driven converter; falls back to restating the option text."""

    mapping: dict[tuple[str, tuple[str, ...]], list[str]] = field(default_factory=dict)
    calls: int = 0

    def to_statements(self, question: str, options: Sequence[str]) -> list[str]:
        self.calls += 1
        key = (question, tuple(options))
        if key in self.mapping:
            statements = list(self.mapping[key])
            if len(statements) != len(options):
                raise ValueError("fixture statement count does not match options")
            return statements
        return [str(option) for option in options]


def _hash_unit_vector(text: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(
        np.random.SeedSequence([int.from_bytes(digest, "big"), _EMBED_HASH_TAG])
    )
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


@dataclass
class MockEmbedder:
    """Unit-norm embeddings over the toy token space.

    Texts and decodable images map to the normalized sum of their attribute
    tokens' world embeddings, so a caption and a view mentioning the same
    attributes land on the same point.  Token-free texts get a stable
    hash-seeded direction.
    """

    world: ToyWorld
    calls: int = 0

    def _from_tokens(self, tokens: Sequence[str], fallback_key: str) -> np.ndarray:
        vec = np.zeros(self.world.dim)
        for token in tokens:
            vec += self.world.embeddings[TOKEN_INDEX[token]]
        norm = float(np.linalg.norm(vec))
        if norm < 1e-12:
            return _hash_unit_vector(fallback_key, self.world.dim)
        return vec / norm

    def embed_text(self, text: str) -> np.ndarray:
        self.calls += 1
        return self._from_tokens(parse_tokens(text), f"text:{text}")

    def embed_image(self, image_ref: str) -> np.ndarray:
        self.calls += 1
        tokens = _ordered_slot_tokens(decode_view_tokens(image_ref))
        return self._from_tokens(tokens, f"image:{image_ref}")

    def embed_latent(self, vector: np.ndarray) -> np.ndarray:
        vec = np.asarray(vector, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm < 1e-12:
            raise ValueError("cannot embed a zero latent")
        return vec / norm


@dataclass
class MockSafetyScreen:
    flagged_refs: frozenset[str] = frozenset()
    calls: int = 0

    def screen(self, image_refs: Sequence[str]) -> list[bool]:
        self.calls += 1
        return [ref in self.flagged_refs for ref in image_refs]


# ---------------------------------------------------------------------------
# HTTP adapter
# ---------------------------------------------------------------------------


class RateLimiter:
    """Minimum-interval limiter shared by one endpoint's calls."""

    def __init__(self, requests_per_second: float):
        if requests_per_second <= 0:
            raise ValueError("requests_per_second must be positive")
        self._interval = 1.0 / requests_per_second
        self._lock = threading.Lock()
        self._next_allowed = 0.0

    def acquire(self) -> None:
        with self._lock:
            now = time.monotonic()
            wait = self._next_allowed - now
            if wait > 0:
                time.sleep(wait)
                now = time.monotonic()
            self._next_allowed = now + self._interval


@dataclass
class HttpClientConfig:
    endpoint: str
    api_key: str | None = None
    timeout: float = 10.0
    max_retries: int = 3
    backoff_base: float = 0.1
    rate_limit_rps: float | None = None

    @classmethod
    def from_env(cls, client_name: str, **overrides) -> "HttpClientConfig":
        env_var = ENDPOINT_ENV_PREFIX + client_name.upper()
        endpoint = os.environ.get(env_var)
        if not endpoint:
            raise ClientError(f"environment variable {env_var} is not set")
        return cls(endpoint=endpoint, api_key=os.environ.get(API_KEY_ENV), **overrides)


class _HttpJsonClient:
    def __init__(self, config: HttpClientConfig):
        self.config = config
        self._limiter = (
            RateLimiter(config.rate_limit_rps) if config.rate_limit_rps else None
        )

    def post(self, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        headers = {
            "Content-Type": "application/json",
            "Idempotency-Key": str(uuid.uuid4()),
        }
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"

        last_error: ClientError | None = None
        for attempt in range(self.config.max_retries + 1):
            if self._limiter is not None:
                self._limiter.acquire()
            if attempt > 0:
                time.sleep(self.config.backoff_base * (2 ** (attempt - 1)))
                logger.info(
                    "retrying %s (attempt %d/%d)",
                    self.config.endpoint, attempt, self.config.max_retries,
                )
            request = urllib.request.Request(
                self.config.endpoint, data=body, headers=headers, method="POST"
            )
            try:
                with urllib.request.urlopen(request, timeout=self.config.timeout) as response:
                    raw = response.read().decode("utf-8")
                try:
                    return json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise ClientProtocolError(
                        f"malformed JSON from {self.config.endpoint}", raw_body=raw
                    ) from exc
            except urllib.error.HTTPError as exc:
                status = exc.code
                detail = exc.read().decode("utf-8", errors="replace")
                if status in (401, 403):
                    raise ClientAuthError(f"auth failure ({status}) from {self.config.endpoint}")
                if 500 <= status < 600:
                    last_error = ClientHttpError(status, f"server error {status}: {detail}")
                    continue
                raise ClientHttpError(status, f"http error {status}: {detail}")
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, TimeoutError):
                    last_error = ClientTimeoutError(f"timeout contacting {self.config.endpoint}")
                    continue
                last_error = ClientError(f"connection error: {exc.reason}")
                continue
            except TimeoutError:
                last_error = ClientTimeoutError(f"timeout contacting {self.config.endpoint}")
                continue
        assert last_error is not None
        raise last_error

    @staticmethod
    def encode_image(image_ref: str) -> str:
        with open(image_ref, "rb") as fh:
            return base64.b64encode(fh.read()).decode("ascii")


class HttpCaptioner(_HttpJsonClient):
    def __init__(self, config: HttpClientConfig, decode_options: dict | None = None):
        super().__init__(config)
        # Passed through opaquely; the backend owns sampling/beam settings.
        self.decode_options = dict(decode_options or {})

    def caption_view(self, image_ref: str, n: int) -> list[str]:
        payload = {"image_b64": self.encode_image(image_ref), "n": n}
        if self.decode_options:
            payload["options"] = self.decode_options
        response = self.post(payload)
        captions = response.get("captions")
        if not isinstance(captions, list) or len(captions) != n:
            raise ClientProtocolError(
                f"expected {n} captions, got {captions!r}", raw_body=json.dumps(response)
            )
        return [str(c) for c in captions]


class HttpLatentEncoder(_HttpJsonClient):
    def __init__(self, config: HttpClientConfig, expected_views: int = DEFAULT_ENCODER_VIEWS):
        super().__init__(config)
        self.expected_views = expected_views

    def encode(self, transparent_view_refs: Sequence[str]) -> ObjectLatent:
        if len(transparent_view_refs) != self.expected_views:
            raise ValueError(
                f"encoder requires exactly {self.expected_views} transparent views, "
                f"got {len(transparent_view_refs)}"
            )
        response = self.post(
            {"images": [self.encode_image(ref) for ref in transparent_view_refs]}
        )
        latent = response.get("latent")
        if not isinstance(latent, list) or not latent:
            raise ClientProtocolError("missing latent in response", raw_body=json.dumps(response))
        object_id = _object_id_from_ref(transparent_view_refs[0])
        return ObjectLatent(object_id=object_id, vector=np.asarray(latent, dtype=np.float64),
                            source=Source.ENCODER)


class HttpVlmSummarizer(_HttpJsonClient):
    def __init__(self, config: HttpClientConfig, max_images: int | None = MAX_SUMMARY_IMAGES):
        super().__init__(config)
        self.max_images = max_images
        # Backend-reported token usage, kept as telemetry only (never enforced).
        self.last_usage: dict | None = None

    def summarize(self, image_refs: Sequence[str], prompt: str = DEFAULT_VLM_PROMPT) -> VlmResult:
        if self.max_images is not None and len(image_refs) > self.max_images:
            raise ValueError(
                f"summarize accepts at most {self.max_images} images, got {len(image_refs)}"
            )
        response = self.post(
            {"images": [self.encode_image(ref) for ref in image_refs], "prompt": prompt}
        )
        usage = response.get("usage")
        self.last_usage = dict(usage) if isinstance(usage, dict) else None
        if response.get("flag") == CONTENT_POLICY_VIOLATION:
            return VlmResult(caption=None, policy_violation=True)
        caption = response.get("caption")
        if not isinstance(caption, str):
            raise ClientProtocolError("missing caption in response", raw_body=json.dumps(response))
        return VlmResult(caption=caption)


class HttpStatementConverter(_HttpJsonClient):
    def to_statements(self, question: str, options: Sequence[str]) -> list[str]:
        response = self.post({"question": question, "options": list(options)})
        statements = response.get("statements")
        if not isinstance(statements, list) or len(statements) != len(options):
            raise ClientProtocolError(
                f"expected {len(options)} statements, got {statements!r}",
                raw_body=json.dumps(response),
            )
        return [str(s) for s in statements]


class HttpEmbedder(_HttpJsonClient):
    def _to_unit(self, response: dict) -> np.ndarray:
        vector = response.get("vector")
        if not isinstance(vector, list) or not vector:
            raise ClientProtocolError("missing vector in response", raw_body=json.dumps(response))
        vec = np.asarray(vector, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if not np.isfinite(norm) or norm < 1e-12:
            raise ClientProtocolError("embedding is not normalizable", raw_body=json.dumps(response))
        return vec / norm

    def embed_text(self, text: str) -> np.ndarray:
        return self._to_unit(self.post({"text": text}))

    def embed_image(self, image_ref: str) -> np.ndarray:
        return self._to_unit(self.post({"image_b64": self.encode_image(image_ref)}))
