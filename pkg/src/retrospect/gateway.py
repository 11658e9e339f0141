"""Pluggable chat-completion gateway with multimodal messages.

Three backends share one interface:

* :class:`LiveGateway` speaks JSON-over-HTTP to an OpenAI-style
  chat-completions endpoint with inline base64 images.
* :class:`ReplayGateway` serves responses from a fixture journal keyed
  by request digest; it is a pure function of (fixture, request), which
  makes whole pipeline runs deterministic and bit-identical.
* :class:`RecordingGateway` performs the live call and appends the
  result to a fixture journal for later replay.

The fixture journal is append-only JSON Lines; each entry holds the
request digest, a short human-readable request summary, and the
response text.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Union

import httpx

from .errors import RetrospectError
from .model import ImageBlob, content_hash

logger = logging.getLogger(__name__)

DEFAULT_MAX_OUTPUT_TOKENS = 4096
ENDPOINT_ENV_VAR = "RETROSPECT_GATEWAY_URL"
API_KEY_ENV_VAR = "RETROSPECT_GATEWAY_KEY"


class Role(Enum):
    SYSTEM = "system"
    USER = "user"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    image: ImageBlob
    media_type: str = "image/png"


MessagePart = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    parts: tuple[MessagePart, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ValueError("message has no parts")


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    model_tag: str
    temperature: float = 0.0
    max_output: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("request has no messages")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class BackendKind(Enum):
    LIVE = "live"
    REPLAY = "replay"


@dataclass(frozen=True)
class CompletionResult:
    text: str
    request_digest: str
    backend: BackendKind


class NoFixtureEntry(RetrospectError):
    """Replay miss: the fixture journal has no entry for this request."""

    def __init__(self, digest: str, summary: str):
        super().__init__(f"no fixture entry for digest {digest} ({summary})")
        self.digest = digest


class TransportError(RetrospectError):
    """Live call failed after bounded retries (or with a non-retryable status)."""


class BudgetExceeded(RetrospectError):
    """The provider stopped generating because the token budget ran out."""


def request_digest(request: CompletionRequest) -> str:
    """Stable content hash of a request.

    Depends only on model tag, temperature, max_output, message roles,
    text parts, and image content hashes; identical requests hash
    identically across runs and platforms.
    """
    payload = {
        "model_tag": request.model_tag,
        "temperature": float(request.temperature),
        "max_output": request.max_output,
        "messages": [
            {
                "role": message.role.value,
                "parts": [
                    {"text": part.text} if isinstance(part, TextPart) else {"image_sha256": part.image.sha256}
                    for part in message.parts
                ],
            }
            for message in request.messages
        ],
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return content_hash(canonical.encode("utf-8"))


def summarize_request(request: CompletionRequest) -> str:
    """Short single-line description of a request, for fixture journals and logs."""
    first_text = ""
    image_count = 0
    for message in request.messages:
        for part in message.parts:
            if isinstance(part, TextPart) and not first_text:
                first_text = " ".join(part.text.split())
            elif isinstance(part, ImagePart):
                image_count += 1
    if len(first_text) > 100:
        first_text = first_text[:97] + "..."
    summary = f"{request.model_tag}: {first_text}"
    if image_count:
        summary += f" [+{image_count} image(s)]"
    return summary


class Gateway(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResult: ...


# --- fixture journal -------------------------------------------------------


def append_fixture_entry(path: str | Path, request: CompletionRequest, response_text: str) -> None:
    """Append one (digest, summary, response) record to a fixture journal."""
    entry = {
        "digest": request_digest(request),
        "model_tag": request.model_tag,
        "summary": summarize_request(request),
        "response": response_text,
    }
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(entry, ensure_ascii=False) + "\n")


def load_fixture(path: str | Path) -> dict[str, str]:
    """Load a fixture journal into a digest -> response mapping (last entry wins)."""
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RetrospectError(f"corrupt fixture entry at {path}:{line_no}: {exc}") from exc
            entries[record["digest"]] = record["response"]
    return entries


class ReplayGateway:
    """Deterministic backend serving fixture responses keyed by request digest."""

    def __init__(self, fixture: str | Path | Mapping[str, str]):
        if isinstance(fixture, (str, Path)):
            self._entries = load_fixture(fixture)
        else:
            self._entries = dict(fixture)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[CompletionRequest, str]]) -> "ReplayGateway":
        return cls({request_digest(request): text for request, text in pairs})

    def complete(self, request: CompletionRequest) -> CompletionResult:
        digest = request_digest(request)
        try:
            text = self._entries[digest]
        except KeyError:
            raise NoFixtureEntry(digest, summarize_request(request)) from None
        return CompletionResult(text=text, request_digest=digest, backend=BackendKind.REPLAY)


# --- live HTTP backend -----------------------------------------------------

_RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


def _wire_messages(request: CompletionRequest) -> list[dict]:
    messages = []
    for message in request.messages:
        content = []
        for part in message.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                encoded = base64.b64encode(part.image.data).decode("ascii")
                content.append(
                    {"type": "image_url", "image_url": {"url": f"data:{part.media_type};base64,{encoded}"}}
                )
        messages.append({"role": message.role.value, "content": content})
    return messages


class LiveGateway:
    """HTTP chat-completions backend with bounded retries.

    Retries (up to ``max_attempts``, exponential backoff) apply to
    transport faults and retryable statuses only; the content of a
    successful response is never judged here.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        *,
        client: httpx.Client | None = None,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 120.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self._api_key = api_key
        self._client = client or httpx.Client(timeout=timeout)
        self._max_attempts = max_attempts
        self._backoff_base = backoff_base
        self._sleep = sleep

    @classmethod
    def from_env(cls, **kwargs) -> "LiveGateway":
        """Build from ``RETROSPECT_GATEWAY_URL`` / ``RETROSPECT_GATEWAY_KEY``."""
        endpoint = os.environ.get(ENDPOINT_ENV_VAR)
        if not endpoint:
            raise RetrospectError(f"{ENDPOINT_ENV_VAR} is not set")
        return cls(endpoint, os.environ.get(API_KEY_ENV_VAR), **kwargs)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        body = {
            "model": request.model_tag,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
            "messages": _wire_messages(request),
        }
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"

        last_fault: str = "no attempt made"
        for attempt in range(self._max_attempts):
            if attempt:
                self._sleep(self._backoff_base * 2 ** (attempt - 1))
            try:
                response = self._client.post(self.endpoint, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_fault = f"transport fault: {exc}"
                logger.warning("gateway attempt %d/%d failed: %s", attempt + 1, self._max_attempts, exc)
                continue
            if response.status_code in _RETRYABLE_STATUS:
                last_fault = f"status {response.status_code}"
                logger.warning(
                    "gateway attempt %d/%d got status %d", attempt + 1, self._max_attempts, response.status_code
                )
                continue
            if response.status_code != 200:
                raise TransportError(f"gateway returned status {response.status_code}: {response.text[:200]}")
            return self._parse_response(request, response)
        raise TransportError(f"gateway failed after {self._max_attempts} attempts ({last_fault})")

    def _parse_response(self, request: CompletionRequest, response: httpx.Response) -> CompletionResult:
        try:
            data = response.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (json.JSONDecodeError, LookupError, TypeError) as exc:
            raise TransportError(f"malformed gateway response: {exc}") from exc
        if choice.get("finish_reason") == "length":
            raise BudgetExceeded(f"completion truncated at max_output={request.max_output}")
        return CompletionResult(text=text, request_digest=request_digest(request), backend=BackendKind.LIVE)


class RecordingGateway:
    """Live backend that journals every completion for later replay."""

    def __init__(self, live: LiveGateway, fixture_path: str | Path):
        self._live = live
        self._path = Path(fixture_path)
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        result = self._live.complete(request)
        with self._lock:
            append_fixture_entry(self._path, request, result.text)
        return result
