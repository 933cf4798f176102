"""Chat endpoint client with an append-only response cache.

Requests follow the chat-completions shape (model, messages with interleaved
text and base64 PNG images, temperature 0). Every request is canonicalized
and hashed; the cache maps that digest to the raw response text. A frozen
cache replays without network and errors on a miss, which is what makes runs
reproducible and testable offline.

Endpoint, model name, and credential come from the environment:
PATHNAV_ENDPOINT, PATHNAV_MODEL, PATHNAV_API_KEY.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import time
from pathlib import Path

import numpy as np
from PIL import Image

from pathnav.errors import CacheMissError, TransportError
from pathnav.prompts import PromptBundle

ENV_ENDPOINT = "PATHNAV_ENDPOINT"
ENV_MODEL = "PATHNAV_MODEL"
ENV_API_KEY = "PATHNAV_API_KEY"


def encode_image(arr: np.ndarray) -> str:
    """PNG-encode an RGB array and return a data URL."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr)).save(buf, format="PNG")
    b64 = base64.b64encode(buf.getvalue()).decode("ascii")
    return f"data:image/png;base64,{b64}"


def build_request(bundle: PromptBundle, model: str, temperature: float = 0.0) -> dict:
    """Chat-completions request body for one prompt bundle."""
    content = [{"type": "text", "text": bundle.user_text}]
    for img in bundle.images:
        content.append({"type": "image_url", "image_url": {"url": encode_image(img)}})
    return {
        "model": model,
        "temperature": temperature,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {"role": "user", "content": content},
        ],
    }


def request_digest(request: dict) -> str:
    """SHA-256 of the canonicalized (sorted-key, tight-separator) request JSON."""
    canon = json.dumps(request, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only JSONL of {digest, response} records.

    Single-writer, multi-reader: appends are serialized with a lock; readers
    see the in-memory map loaded at open plus this process's appends. A
    `<path>.frozen` marker (written by `freeze`) makes the cache read-only.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._map: dict[str, str] = {}
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._map[rec["digest"]] = rec["response"]

    @property
    def frozen(self) -> bool:
        return self.path.with_suffix(self.path.suffix + ".frozen").exists()

    def freeze(self) -> str:
        """Mark the cache read-only and record its content digest."""
        digest = self.content_digest()
        marker = self.path.with_suffix(self.path.suffix + ".frozen")
        marker.write_text(digest + "\n")
        return digest

    def content_digest(self) -> str:
        h = hashlib.sha256()
        if self.path.exists():
            with open(self.path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
        return h.hexdigest()

    def __len__(self) -> int:
        return len(self._map)

    def get(self, digest: str) -> str | None:
        return self._map.get(digest)

    def append(self, digest: str, response: str) -> None:
        if self.frozen:
            raise CacheMissError(f"cache {self.path} is frozen; refusing to append")
        with self._lock:
            self._map[digest] = response
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {"digest": digest, "response": response}, sort_keys=True
                    )
                    + "\n"
                )


class HttpChatClient:
    """Thin POST wrapper over a chat-completions-style HTTPS endpoint."""

    def __init__(self, endpoint: str, api_key: str = "", timeout: float = 120.0, attempts: int = 3):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self.attempts = attempts

    @classmethod
    def from_env(cls) -> "HttpChatClient":
        endpoint = os.environ.get(ENV_ENDPOINT, "")
        if not endpoint:
            raise TransportError(
                f"no chat endpoint configured: set {ENV_ENDPOINT} (and "
                f"{ENV_MODEL}, {ENV_API_KEY}) or run with a frozen cache"
            )
        return cls(endpoint=endpoint, api_key=os.environ.get(ENV_API_KEY, ""))

    def complete(self, request: dict) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        for attempt in range(self.attempts):
            try:
                resp = requests.post(
                    self.endpoint, json=request, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                body = resp.json()
                return body["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - uniform retry surface
                last = exc
                if attempt + 1 < self.attempts:
                    time.sleep(1.5 * (attempt + 1))
        raise TransportError(f"chat endpoint failed after {self.attempts} attempts: {last}")


class CachingChatClient:
    """Read-through cache in front of an (optional) HTTP client.

    With no inner client, or with a frozen cache, a miss raises
    CacheMissError immediately with an actionable message; nothing touches
    the network. `network_calls` counts actual endpoint round trips.
    """

    def __init__(self, cache: ResponseCache, inner: HttpChatClient | None = None, model: str = ""):
        self.cache = cache
        self.inner = inner
        self.model = model or os.environ.get(ENV_MODEL, "default")
        self.network_calls = 0

    def complete_bundle(self, bundle: PromptBundle) -> str:
        request = build_request(bundle, self.model)
        digest = request_digest(request)
        hit = self.cache.get(digest)
        if hit is not None:
            return hit
        if self.inner is None or self.cache.frozen:
            raise CacheMissError(
                f"request {digest[:12]}... not in cache {self.cache.path} and no "
                "live endpoint is available (cache frozen or offline run); "
                "populate the cache or configure the endpoint environment"
            )
        response = self.inner.complete(request)
        self.network_calls += 1
        self.cache.append(digest, response)
        return response


class SequenceChatClient:
    """Returns canned responses in order; for tests and mock policies."""

    def __init__(self, responses: list[str]):
        self.responses = list(responses)
        self.calls = 0

    def complete_bundle(self, bundle: PromptBundle) -> str:
        if self.calls >= len(self.responses):
            raise TransportError("sequence client exhausted")
        out = self.responses[self.calls]
        self.calls += 1
        return out
