"""Pluggable vision-analysis providers.

The server asks a provider for natural-language context on a stored image
given an operator prompt. The mock is deterministic and models the observed
provider latency; the remote client posts to a configured HTTP endpoint.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass

import httpx

logger = logging.getLogger(__name__)

DEFAULT_ANALYSIS_LATENCY_MS = 2_100.0


@dataclass(frozen=True)
class AnalysisResult:
    text: str
    latency_ms: float


class AnalysisProvider:
    """request() may be slow; callers run it off the uplink path."""

    latency_ms: float = DEFAULT_ANALYSIS_LATENCY_MS

    def request(self, image_ref: str, prompt: str) -> AnalysisResult:
        raise NotImplementedError


class MockProvider(AnalysisProvider):
    """Deterministic template echo: same (image_ref, prompt) -> same text."""

    def __init__(self, latency_ms: float = DEFAULT_ANALYSIS_LATENCY_MS):
        self.latency_ms = latency_ms

    def request(self, image_ref: str, prompt: str) -> AnalysisResult:
        tag = hashlib.sha256(f"{image_ref}|{prompt}".encode()).hexdigest()[:8]
        text = (
            f"[analysis {tag}] {prompt} "
            f"Assessment based on image {image_ref}: subject matches the requested "
            f"criteria; no additional hazards identified in frame."
        )
        return AnalysisResult(text=text, latency_ms=self.latency_ms)


class RemoteProvider(AnalysisProvider):
    """HTTP client for an external vision-language endpoint.

    POSTs {"image_ref": ..., "prompt": ...} and expects {"text": ...}.
    Configured by URL and API key, normally from the environment.
    """

    def __init__(self, url: str, api_key: str = "", timeout_s: float = 30.0,
                 transport: httpx.BaseTransport | None = None):
        self.url = url
        self.latency_ms = DEFAULT_ANALYSIS_LATENCY_MS
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout_s, headers=headers, transport=transport)

    def request(self, image_ref: str, prompt: str) -> AnalysisResult:
        resp = self._client.post(self.url, json={"image_ref": image_ref, "prompt": prompt})
        resp.raise_for_status()
        doc = resp.json()
        if "text" not in doc:
            raise ValueError(f"provider response missing 'text': {doc!r}")
        try:
            elapsed = resp.elapsed.total_seconds() * 1000.0
        except RuntimeError:
            elapsed = 0.0
        return AnalysisResult(text=str(doc["text"]), latency_ms=elapsed)

    def close(self) -> None:
        self._client.close()


def provider_from_env(env: dict[str, str] | None = None) -> AnalysisProvider:
    """Select the provider from SKYWATCH_PROVIDER (mock | remote)."""
    env = dict(os.environ) if env is None else env
    kind = env.get("SKYWATCH_PROVIDER", "mock").lower()
    latency = float(env.get("SKYWATCH_PROVIDER_LATENCY_MS", DEFAULT_ANALYSIS_LATENCY_MS))
    if kind == "mock":
        return MockProvider(latency_ms=latency)
    if kind == "remote":
        url = env.get("SKYWATCH_PROVIDER_URL", "")
        if not url:
            raise ValueError("SKYWATCH_PROVIDER_URL required for the remote provider")
        return RemoteProvider(url=url, api_key=env.get("SKYWATCH_PROVIDER_KEY", ""))
    raise ValueError(f"unknown provider kind {kind!r}")
