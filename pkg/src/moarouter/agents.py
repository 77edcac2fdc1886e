"""Agent backends: deterministic mocks, a hash-embedding text agent, and an
HTTP adapter for remote endpoints.

All agents map a fixed-dimension input vector to an AgentOutput. Mock agents
are pure functions of (input, layer, seed) so repeated calls are bit-identical;
the HTTP adapter speaks a small JSON protocol and converts every failure mode
into AgentUnavailableError after its retries are exhausted.
"""
from __future__ import annotations

import hashlib
import json
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
import requests

from .errors import AgentUnavailableError, ConfigError, ShapeError
from .numkit import Array, as_f64
from .router import AgentOutput

AGENT_KINDS = ("mock_linear", "mock_noisy", "text_echo", "http")


@dataclass(frozen=True)
class EmbeddingConfig:
    """Feature-hashed bag-of-tokens embedding: lowercase fold, whitespace
    tokens, hash -> (index mod dim, sign bit), accumulate, L2-normalize."""

    dim: int
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError(f"embedding dim must be >= 1, got {self.dim}")


def embed_text(cfg: EmbeddingConfig, text: str) -> Array:
    cfg.validate()
    vec = np.zeros(cfg.dim)
    key = cfg.seed.to_bytes(8, "little", signed=True)
    for token in text.lower().split():
        digest = hashlib.blake2b(token.encode("utf-8"), key=key, digest_size=16).digest()
        index = int.from_bytes(digest[:8], "little") % cfg.dim
        sign = 1.0 if digest[8] & 1 else -1.0
        vec[index] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


@dataclass(frozen=True)
class AgentSpec:
    """Declarative description of one agent. `dim` is the shared agent vector
    dimension; kind-specific fields are ignored by other kinds."""

    id: str
    kind: str
    dim: int
    # mock kinds
    weight: Array | None = None        # (dim, dim); derived from init_seed when absent
    bias: Array | None = None          # (dim,)
    noise_std: float = 0.0
    seed: int = 0
    init_seed: int | None = None
    latency_ms: float = 0.0            # artificial fixed latency per call
    # text / http kinds
    embed_seed: int = 0
    endpoint: str | None = None
    timeout_ms: float = 1000.0
    retries: int = 1
    auth_header: str | None = None


def _derive_affine(dim: int, init_seed: int) -> tuple[Array, Array]:
    rng = np.random.default_rng(init_seed)
    scale = 1.0 / np.sqrt(dim)
    return rng.uniform(-scale, scale, (dim, dim)), rng.uniform(-0.25, 0.25, dim)


def _check_input(x: Array, dim: int, agent_id: str) -> Array:
    x = as_f64(x)
    if x.shape != (dim,):
        raise ShapeError(f"agent '{agent_id}': input has shape {x.shape}, expected {(dim,)}")
    return x


class _MockLinearAgent:
    def __init__(self, spec: AgentSpec, index: int):
        if spec.weight is not None:
            w = as_f64(spec.weight)
            b = as_f64(spec.bias) if spec.bias is not None else np.zeros(spec.dim)
        else:
            w, b = _derive_affine(spec.dim, spec.init_seed if spec.init_seed is not None else index)
        if w.shape != (spec.dim, spec.dim) or b.shape != (spec.dim,):
            raise ConfigError(
                f"agent '{spec.id}': affine map shapes {w.shape}/{b.shape} do not match dim {spec.dim}"
            )
        self.spec = spec
        self.index = index
        self.w = w
        self.b = b

    def _map(self, x: Array, layer: int) -> Array:
        return self.w @ x + self.b

    def invoke(self, x: Array, layer: int, prior_text: list[str] | None = None) -> AgentOutput:
        x = _check_input(x, self.spec.dim, self.spec.id)
        start = time.perf_counter()
        if self.spec.latency_ms > 0.0:
            time.sleep(self.spec.latency_ms / 1000.0)
        vec = self._map(x, layer)
        elapsed = (time.perf_counter() - start) * 1000.0
        return AgentOutput(vec=vec, agent_index=self.index, text=None, latency_ms=elapsed)


class _MockNoisyAgent(_MockLinearAgent):
    def _map(self, x: Array, layer: int) -> Array:
        clean = super()._map(x, layer)
        if self.spec.noise_std == 0.0:
            return clean
        # Noise must be a pure function of (seed, layer, input) for purity.
        digest = hashlib.blake2b(x.tobytes(), digest_size=8).digest()
        entropy = [self.spec.seed, layer, int.from_bytes(digest, "little")]
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
        return clean + rng.normal(0.0, self.spec.noise_std, clean.shape)


class _TextEchoAgent:
    def __init__(self, spec: AgentSpec, index: int):
        self.spec = spec
        self.index = index
        self.embed_cfg = EmbeddingConfig(dim=spec.dim, seed=spec.embed_seed)

    def invoke(self, x: Array, layer: int, prior_text: list[str] | None = None) -> AgentOutput:
        x = _check_input(x, self.spec.dim, self.spec.id)
        start = time.perf_counter()
        if self.spec.latency_ms > 0.0:
            time.sleep(self.spec.latency_ms / 1000.0)
        summary = " ".join(f"{v:.3f}" for v in x)
        pieces = [f"{self.spec.id} layer{layer} sees {summary}"]
        if prior_text:
            pieces.extend(prior_text)
        text = " :: ".join(pieces)
        vec = embed_text(self.embed_cfg, text)
        elapsed = (time.perf_counter() - start) * 1000.0
        return AgentOutput(vec=vec, agent_index=self.index, text=text, latency_ms=elapsed)


class _HttpAgent:
    """POSTs {"prompt", "layer", "prior_responses", "request_id"} and expects
    {"text", "embedding"?}. Anything other than a 200 with well-formed JSON
    carrying "text" counts as a failure; failures are retried `retries` times
    before raising AgentUnavailableError."""

    def __init__(self, spec: AgentSpec, index: int):
        if not spec.endpoint:
            raise ConfigError(f"agent '{spec.id}': http kind requires an endpoint")
        self.spec = spec
        self.index = index
        self.embed_cfg = EmbeddingConfig(dim=spec.dim, seed=spec.embed_seed)
        # One session per agent: connection reuse without cross-request state.
        self._session = requests.Session()
        self._lock = threading.Lock()

    def invoke(self, x: Array, layer: int, prior_text: list[str] | None = None) -> AgentOutput:
        x = _check_input(x, self.spec.dim, self.spec.id)
        payload = {
            "prompt": json.dumps([float(v) for v in x]),
            "layer": layer,
            "prior_responses": list(prior_text or []),
            "request_id": uuid.uuid4().hex,
        }
        headers = {}
        if self.spec.auth_header:
            headers["Authorization"] = self.spec.auth_header
        timeout_s = self.spec.timeout_ms / 1000.0
        attempts = self.spec.retries + 1
        start = time.perf_counter()
        last_error = "no attempt made"
        for _ in range(attempts):
            try:
                with self._lock:
                    resp = self._session.post(
                        self.spec.endpoint, json=payload, headers=headers, timeout=timeout_s
                    )
            except requests.RequestException as exc:
                last_error = f"{type(exc).__name__}"
                continue
            if resp.status_code != 200:
                last_error = f"status {resp.status_code}"
                continue
            try:
                body = resp.json()
            except ValueError:
                last_error = "malformed JSON body"
                continue
            if not isinstance(body, dict) or not isinstance(body.get("text"), str):
                last_error = "response missing 'text'"
                continue
            text = body["text"]
            if body.get("embedding") is not None:
                emb = body["embedding"]
                if not isinstance(emb, list) or len(emb) != self.spec.dim:
                    last_error = f"embedding length != {self.spec.dim}"
                    continue
                vec = np.array(emb, dtype=np.float64)
            else:
                vec = embed_text(self.embed_cfg, text)
            elapsed = (time.perf_counter() - start) * 1000.0
            return AgentOutput(vec=vec, agent_index=self.index, text=text, latency_ms=elapsed)
        raise AgentUnavailableError(
            self.spec.id, f"agent '{self.spec.id}': {last_error} after {attempts} attempts"
        )


_AGENT_CLASSES = {
    "mock_linear": _MockLinearAgent,
    "mock_noisy": _MockNoisyAgent,
    "text_echo": _TextEchoAgent,
    "http": _HttpAgent,
}


def build_agent(spec: AgentSpec, index: int = 0):
    if spec.kind not in _AGENT_CLASSES:
        raise ConfigError(f"agent '{spec.id}': unknown kind '{spec.kind}'")
    if spec.dim < 1:
        raise ConfigError(f"agent '{spec.id}': dim must be >= 1")
    return _AGENT_CLASSES[spec.kind](spec, index)


def invoke(spec: AgentSpec, x: Array, layer: int, prior_text: list[str] | None = None) -> AgentOutput:
    """One-shot invocation of an agent described by `spec`."""
    if layer < 1:
        raise ShapeError(f"layer must be >= 1, got {layer}")
    return build_agent(spec).invoke(x, layer, prior_text)


@dataclass
class AgentPool:
    """Ordered, immutable collection of built agents; index i is the agent's
    position in the configured spec list and is what gate vectors refer to."""

    specs: list[AgentSpec]
    agents: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def dim(self) -> int:
        return self.specs[0].dim

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.specs]

    def invoke(self, index: int, x: Array, layer: int, prior_text: list[str] | None = None) -> AgentOutput:
        return self.agents[index].invoke(x, layer, prior_text)


def build_pool(specs: list[AgentSpec]) -> AgentPool:
    if not specs:
        raise ConfigError("agent pool: need at least one agent")
    seen: set[str] = set()
    dim = specs[0].dim
    for spec in specs:
        if spec.id in seen:
            raise ConfigError(f"agent pool: duplicate agent id '{spec.id}'")
        seen.add(spec.id)
        if spec.dim != dim:
            raise ConfigError(
                f"agent pool: agent '{spec.id}' has dim {spec.dim}, pool dim is {dim}"
            )
    agents = [build_agent(spec, index) for index, spec in enumerate(specs)]
    return AgentPool(specs=list(specs), agents=agents)
