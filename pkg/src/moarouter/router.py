"""The recurrent gating router: fusion of agent outputs, LSTM recurrence,
softmax gate over agents, weighted aggregation, top-k selection, and weights
file (de)serialization.

A single parameter set serves dense and sparse execution: non-invoked agents
enter fusion as zero vectors and their gate mass is renormalized over the
invoked set.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DeserializationError, ParameterError, ShapeError
from .numkit import (
    Array,
    GATE_NAMES,
    LstmParams,
    LstmState,
    as_f64,
    init_lstm_params,
    lstm_forward,
    softmax,
    zeros_lstm_params,
)

WEIGHTS_VERSION = "1"


@dataclass(frozen=True)
class RouterParams:
    """All learnable router parameters. Immutable after construction and safe
    to share across concurrent pipeline runs."""

    n_agents: int
    agent_dim: int
    w_fusion: Array   # (d_z, n_agents * agent_dim)
    b_fusion: Array   # (d_z,)
    lstm: LstmParams  # d_z -> d_h
    w_gate: Array     # (n_agents, d_h)
    b_gate: Array     # (n_agents,)

    @property
    def d_z(self) -> int:
        return self.w_fusion.shape[0]

    @property
    def d_h(self) -> int:
        return self.w_gate.shape[1]

    def validate(self) -> None:
        n, d = self.n_agents, self.agent_dim
        if n < 1 or d < 1:
            raise ShapeError(f"router params: n_agents={n}, agent_dim={d} must be positive")
        if self.w_fusion.ndim != 2 or self.w_fusion.shape[1] != n * d:
            raise ShapeError(
                f"w_fusion: expected {self.w_fusion.shape[0]} x {n * d}, got {self.w_fusion.shape}"
            )
        if self.b_fusion.shape != (self.d_z,):
            raise ShapeError(f"b_fusion: expected {(self.d_z,)}, got {self.b_fusion.shape}")
        self.lstm.validate()
        if self.lstm.input_dim != self.d_z:
            raise ShapeError(f"lstm input dim {self.lstm.input_dim} != d_z {self.d_z}")
        if self.w_gate.shape != (n, self.lstm.hidden_dim):
            raise ShapeError(
                f"w_gate: expected {(n, self.lstm.hidden_dim)}, got {self.w_gate.shape}"
            )
        if self.b_gate.shape != (n,):
            raise ShapeError(f"b_gate: expected {(n,)}, got {self.b_gate.shape}")
        for name, arr in self._named_arrays():
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name}: contains non-finite entries")

    def _named_arrays(self):
        yield "w_fusion", self.w_fusion
        yield "b_fusion", self.b_fusion
        for g in GATE_NAMES:
            yield f"lstm.w_{g}", getattr(self.lstm, f"w_{g}")
            yield f"lstm.u_{g}", getattr(self.lstm, f"u_{g}")
            yield f"lstm.b_{g}", getattr(self.lstm, f"b_{g}")
        yield "w_gate", self.w_gate
        yield "b_gate", self.b_gate


def init_router_params(
    n_agents: int,
    agent_dim: int,
    d_z: int | None = None,
    d_h: int | None = None,
    seed: int = 0,
) -> RouterParams:
    """Seeded uniform(-1/sqrt(fan_in), +...) init; d_z and d_h default to agent_dim."""
    d_z = agent_dim if d_z is None else d_z
    d_h = agent_dim if d_h is None else d_h
    rng = np.random.default_rng(seed)
    s_f = 1.0 / np.sqrt(n_agents * agent_dim)
    s_g = 1.0 / np.sqrt(d_h)
    params = RouterParams(
        n_agents=n_agents,
        agent_dim=agent_dim,
        w_fusion=rng.uniform(-s_f, s_f, (d_z, n_agents * agent_dim)),
        b_fusion=np.zeros(d_z),
        lstm=init_lstm_params(d_z, d_h, rng),
        w_gate=rng.uniform(-s_g, s_g, (n_agents, d_h)),
        b_gate=np.zeros(n_agents),
    )
    params.validate()
    return params


def zeros_router_params(
    n_agents: int, agent_dim: int, d_z: int | None = None, d_h: int | None = None
) -> RouterParams:
    d_z = agent_dim if d_z is None else d_z
    d_h = agent_dim if d_h is None else d_h
    return RouterParams(
        n_agents=n_agents,
        agent_dim=agent_dim,
        w_fusion=np.zeros((d_z, n_agents * agent_dim)),
        b_fusion=np.zeros(d_z),
        lstm=zeros_lstm_params(d_z, d_h),
        w_gate=np.zeros((n_agents, d_h)),
        b_gate=np.zeros(n_agents),
    )


# Flat-vector layout used by optimizers and the finite-difference oracle.
# Order: w_fusion, b_fusion, lstm (w, u, b per gate i, f, o, c), w_gate, b_gate.

def params_to_vec(p: RouterParams) -> Array:
    parts = [arr.ravel() for _, arr in p._named_arrays()]
    return np.concatenate(parts)


def vec_to_params(vec: Array, like: RouterParams) -> RouterParams:
    vec = as_f64(vec)
    pieces: dict[str, Array] = {}
    offset = 0
    for name, arr in like._named_arrays():
        size = arr.size
        pieces[name] = vec[offset:offset + size].reshape(arr.shape)
        offset += size
    if offset != vec.size:
        raise ShapeError(f"vec_to_params: expected {offset} entries, got {vec.size}")
    lstm = LstmParams(**{
        f"{kind}_{g}": pieces[f"lstm.{kind}_{g}"] for g in GATE_NAMES for kind in ("w", "u", "b")
    })
    return RouterParams(
        n_agents=like.n_agents,
        agent_dim=like.agent_dim,
        w_fusion=pieces["w_fusion"],
        b_fusion=pieces["b_fusion"],
        lstm=lstm,
        w_gate=pieces["w_gate"],
        b_gate=pieces["b_gate"],
    )


def flat_coordinate_name(p: RouterParams, index: int) -> str:
    """Human-readable name of one coordinate of the flat parameter vector."""
    offset = 0
    for name, arr in p._named_arrays():
        if index < offset + arr.size:
            local = np.unravel_index(index - offset, arr.shape)
            suffix = "[" + ",".join(str(i) for i in local) + "]"
            return name + suffix
        offset += arr.size
    raise ParameterError(f"flat index {index} out of range")


@dataclass(frozen=True)
class AgentOutput:
    """One agent's response: a fixed-dimension vector plus optional text."""

    vec: Array
    agent_index: int
    text: str | None = None
    latency_ms: float = 0.0


@dataclass(frozen=True)
class SparsePlan:
    """Top-k selection over a gate vector: which agents to invoke and their
    renormalized weights (aligned with `selected`, ascending agent index)."""

    k: int
    selected: tuple[int, ...]
    renormalized_weights: Array


def validate_gate(g: Array, n: int | None = None) -> Array:
    g = as_f64(g)
    if g.ndim != 1 or g.size == 0:
        raise ShapeError(f"gate vector must be 1-d and non-empty, got shape {g.shape}")
    if n is not None and g.shape != (n,):
        raise ShapeError(f"gate vector: expected length {n}, got {g.shape[0]}")
    if np.any(g < 0.0):
        raise ShapeError("gate vector has negative entries")
    if abs(float(g.sum()) - 1.0) > 1e-9:
        raise ShapeError(f"gate vector sums to {g.sum():.12f}, expected 1")
    return g


def fuse_stack(params: RouterParams, vecs: Array) -> Array:
    """Fusion over an (n_agents, agent_dim) stack: concatenate then project."""
    vecs = as_f64(vecs)
    if vecs.shape != (params.n_agents, params.agent_dim):
        raise ShapeError(
            f"fuse: expected {(params.n_agents, params.agent_dim)} agent stack, got {vecs.shape}"
        )
    return params.w_fusion @ vecs.ravel() + params.b_fusion


def fuse(params: RouterParams, outputs: Sequence[AgentOutput]) -> Array:
    """Fusion over per-agent outputs ordered by agent index; non-invoked agents
    must be passed as zero vectors so the projection shape stays fixed."""
    if len(outputs) != params.n_agents:
        raise ShapeError(f"fuse: expected {params.n_agents} outputs, got {len(outputs)}")
    stack = np.empty((params.n_agents, params.agent_dim))
    for pos, out in enumerate(outputs):
        if out.agent_index != pos:
            raise ShapeError(
                f"fuse: output at position {pos} has agent_index {out.agent_index}"
            )
        v = as_f64(out.vec)
        if v.shape != (params.agent_dim,):
            raise ShapeError(
                f"fuse: agent {pos} vector has shape {v.shape}, expected {(params.agent_dim,)}"
            )
        stack[pos] = v
    return fuse_stack(params, stack)


def recur(params: RouterParams, z: Array, state: LstmState) -> LstmState:
    """LSTM step carrying routing history across layers."""
    new_state, _ = lstm_forward(params.lstm, z, state)
    return new_state


def gate(params: RouterParams, h: Array) -> Array:
    h = as_f64(h)
    if h.shape != (params.d_h,):
        raise ShapeError(f"gate: h has shape {h.shape}, expected {(params.d_h,)}")
    return softmax(params.w_gate @ h + params.b_gate)


def aggregate(g: Array, outputs: Sequence[AgentOutput]) -> Array:
    """Weighted sum of agent vectors under gate weights g."""
    g = validate_gate(g)
    if len(outputs) != g.shape[0]:
        raise ShapeError(f"aggregate: {len(outputs)} outputs for gate of length {g.shape[0]}")
    dim = as_f64(outputs[0].vec).shape[0]
    y = np.zeros(dim)
    for weight, out in zip(g, outputs):
        v = as_f64(out.vec)
        if v.shape != (dim,):
            raise ShapeError(f"aggregate: agent {out.agent_index} vector has shape {v.shape}")
        y = y + weight * v
    return y


def sparse_select(g: Array, k: int) -> SparsePlan:
    """Top-k gate entries; ties broken toward the lower agent index; selected
    weights renormalized to sum 1."""
    g = validate_gate(g)
    n = g.shape[0]
    if not (1 <= k <= n):
        raise ParameterError(f"sparse_select: k={k} out of range [1, {n}]")
    ranking = rank_agents(g)
    selected = tuple(sorted(ranking[:k]))
    weights = g[list(selected)]
    total = float(weights.sum())
    renorm = weights / total if total > 0 else np.full(k, 1.0 / k)
    return SparsePlan(k=k, selected=selected, renormalized_weights=renorm)


def rank_agents(g: Array) -> list[int]:
    """Agent indices by descending gate weight; equal weights rank by index."""
    g = as_f64(g)
    return sorted(range(g.shape[0]), key=lambda i: (-g[i], i))


def masked_renormalized(g: Array, selected: Sequence[int]) -> Array:
    """Full-length gate with mass renormalized over `selected`, zero elsewhere."""
    g = as_f64(g)
    out = np.zeros_like(g)
    idx = list(selected)
    total = float(g[idx].sum())
    if total > 0:
        out[idx] = g[idx] / total
    else:
        out[idx] = 1.0 / len(idx)
    return out


def router_forward(
    params: RouterParams, outputs: Sequence[AgentOutput], state: LstmState
) -> tuple[Array, Array, LstmState]:
    """fuse -> recur -> gate -> aggregate, composed exactly in that order."""
    z = fuse(params, outputs)
    new_state = recur(params, z, state)
    g = gate(params, new_state.h)
    y = aggregate(g, outputs)
    return y, g, new_state


# --- weights file -----------------------------------------------------------

def _mat_to_json(m: Array) -> dict:
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": m.ravel().tolist()}


def _mat_from_json(obj, name: str, rows: int | None = None, cols: int | None = None) -> Array:
    if not isinstance(obj, dict):
        raise DeserializationError(f"{name}: expected an object with rows/cols/data")
    for key in ("rows", "cols", "data"):
        if key not in obj:
            raise DeserializationError(f"{name}: missing '{key}'")
    r, c, data = obj["rows"], obj["cols"], obj["data"]
    if not (isinstance(r, int) and isinstance(c, int) and r > 0 and c > 0):
        raise DeserializationError(f"{name}: rows/cols must be positive integers")
    if not isinstance(data, list) or len(data) != r * c:
        raise DeserializationError(
            f"{name}: expected {r * c} data values, got {len(data) if isinstance(data, list) else type(data).__name__}"
        )
    if rows is not None and r != rows:
        raise DeserializationError(f"{name}: expected {rows} rows, got {r}")
    if cols is not None and c != cols:
        raise DeserializationError(f"{name}: expected {cols} cols, got {c}")
    m = np.array(data, dtype=np.float64).reshape(r, c)
    if not np.all(np.isfinite(m)):
        raise DeserializationError(f"{name}: contains non-finite values")
    return m


def _vec_from_json(obj, name: str, dim: int) -> Array:
    if not isinstance(obj, list) or len(obj) != dim:
        raise DeserializationError(f"{name}: expected an array of {dim} floats")
    v = np.array(obj, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DeserializationError(f"{name}: contains non-finite values")
    return v


def save_params(params: RouterParams, path: str | os.PathLike) -> None:
    """Write the weights file (JSON, floats at full round-trip precision)."""
    doc = {
        "version": WEIGHTS_VERSION,
        "n_agents": params.n_agents,
        "agent_dim": params.agent_dim,
        "d_z": params.d_z,
        "d_h": params.d_h,
        "w_fusion": _mat_to_json(params.w_fusion),
        "b_fusion": params.b_fusion.tolist(),
        "lstm": {
            **{f"w_{g}": _mat_to_json(getattr(params.lstm, f"w_{g}")) for g in GATE_NAMES},
            **{f"u_{g}": _mat_to_json(getattr(params.lstm, f"u_{g}")) for g in GATE_NAMES},
            **{f"b_{g}": getattr(params.lstm, f"b_{g}").tolist() for g in GATE_NAMES},
        },
        "w_gate": _mat_to_json(params.w_gate),
        "b_gate": params.b_gate.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_params(path: str | os.PathLike) -> RouterParams:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DeserializationError(f"weights file: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise DeserializationError("weights file: top level must be an object")
    version = doc.get("version")
    if version != WEIGHTS_VERSION:
        raise DeserializationError(
            f"version: expected '{WEIGHTS_VERSION}', got {version!r}"
        )
    for key in ("n_agents", "agent_dim", "d_z", "d_h"):
        if not isinstance(doc.get(key), int) or doc[key] < 1:
            raise DeserializationError(f"{key}: expected a positive integer")
    n, d, d_z, d_h = doc["n_agents"], doc["agent_dim"], doc["d_z"], doc["d_h"]
    lstm_doc = doc.get("lstm")
    if not isinstance(lstm_doc, dict):
        raise DeserializationError("lstm: expected an object")
    lstm = LstmParams(
        **{f"w_{g}": _mat_from_json(lstm_doc.get(f"w_{g}"), f"lstm.w_{g}", d_h, d_z) for g in GATE_NAMES},
        **{f"u_{g}": _mat_from_json(lstm_doc.get(f"u_{g}"), f"lstm.u_{g}", d_h, d_h) for g in GATE_NAMES},
        **{f"b_{g}": _vec_from_json(lstm_doc.get(f"b_{g}"), f"lstm.b_{g}", d_h) for g in GATE_NAMES},
    )
    params = RouterParams(
        n_agents=n,
        agent_dim=d,
        w_fusion=_mat_from_json(doc.get("w_fusion"), "w_fusion", d_z, n * d),
        b_fusion=_vec_from_json(doc.get("b_fusion"), "b_fusion", d_z),
        lstm=lstm,
        w_gate=_mat_from_json(doc.get("w_gate"), "w_gate", n, d_h),
        b_gate=_vec_from_json(doc.get("b_gate"), "b_gate", n),
    )
    try:
        params.validate()
    except ShapeError as exc:
        raise DeserializationError(str(exc)) from exc
    return params


def params_equal(a: RouterParams, b: RouterParams) -> bool:
    if a.n_agents != b.n_agents or a.agent_dim != b.agent_dim:
        return False
    return all(
        np.array_equal(arr_a, arr_b)
        for (_, arr_a), (_, arr_b) in zip(a._named_arrays(), b._named_arrays())
    )
