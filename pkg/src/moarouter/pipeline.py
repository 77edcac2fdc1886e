"""Layered orchestration of an agent pool under a routing mode.

Modes:
  dense           invoke every agent at every layer, gate from the recurrent
                  state, aggregate all outputs (n * L calls)
  sparse          layer 1 invokes everyone; from layer 2 on, the gate computed
                  from the previous layer's hidden state selects top-k agents
                  before invocation (n + (L-1) * k calls)
  static_moa      uniform aggregation, no recurrence and no learned gate
  linear_ablation the recurrence is replaced by a stateless tanh projection
                  (the LSTM candidate block), isolating the value of memory

Within a layer agent calls fan out concurrently up to a limit and join before
fusion; layers are strictly sequential because the recurrence forbids
pipelining. Failed agents contribute zero vectors and their gate mass is
renormalized over the surviving set; in sparse mode a failed selected agent is
replaced by the next-ranked candidate when one exists.
"""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .agents import AgentPool
from .errors import AgentUnavailableError, ConfigError, DeserializationError, ParameterError
from .numkit import Array, LstmState, as_f64, lstm_forward, zeros_lstm_state
from .router import (
    AgentOutput,
    RouterParams,
    aggregate,
    fuse,
    gate,
    masked_renormalized,
    rank_agents,
    sparse_select,
)

MODES = ("dense", "sparse", "static_moa", "linear_ablation")

REPORT_SCHEMA = 1

TRACE_CSV_COLUMNS = ("layer", "agent_index", "invoked", "gate_weight", "latency_ms")


@dataclass(frozen=True)
class PipelineConfig:
    pool: AgentPool
    params: RouterParams | None
    layers: int
    mode: str = "dense"
    k: int | None = None
    concurrency: int = 8
    layer_pools: list[AgentPool] | None = None  # optional per-layer override

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"pipeline mode must be one of {MODES}, got '{self.mode}'")
        if self.layers < 1:
            raise ConfigError(f"pipeline layers must be >= 1, got {self.layers}")
        if self.concurrency < 1:
            raise ConfigError(f"pipeline concurrency must be >= 1, got {self.concurrency}")
        n = self.pool.n
        if self.mode == "sparse":
            if self.k is None or not (1 <= self.k <= n):
                raise ConfigError(f"sparse mode: k={self.k} out of range [1, {n}]")
        if self.mode != "static_moa":
            if self.params is None:
                raise ConfigError(f"mode '{self.mode}' requires router params")
            if self.params.n_agents != n:
                raise ConfigError(
                    f"router params expect {self.params.n_agents} agents, pool has {n}"
                )
            if self.params.agent_dim != self.pool.dim:
                raise ConfigError(
                    f"router params expect agent_dim {self.params.agent_dim}, pool dim is {self.pool.dim}"
                )
        if self.layer_pools is not None:
            if len(self.layer_pools) != self.layers:
                raise ConfigError(
                    f"layer_pools: expected {self.layers} pools, got {len(self.layer_pools)}"
                )
            for li, lp in enumerate(self.layer_pools):
                if lp.n != n or lp.dim != self.pool.dim:
                    raise ConfigError(f"layer_pools[{li}]: pool shape differs from the base pool")

    def pool_for_layer(self, layer: int) -> AgentPool:
        if self.layer_pools is not None:
            return self.layer_pools[layer - 1]
        return self.pool


@dataclass
class LayerTrace:
    layer: int
    invoked: tuple[int, ...]            # indices dispatched this layer
    failed: tuple[int, ...]             # subset of invoked that errored
    gate: Array                         # full gate over all n agents
    agg_weights: Array                  # weights actually used for aggregation
    latencies_ms: dict[int, float]      # per dispatched agent
    y: Array
    state_h: Array
    selected_text: str | None = None


@dataclass
class RunReport:
    mode: str
    n_agents: int
    layers: int
    k: int | None
    concurrency: int
    final_vec: Array
    final_text: str | None
    traces: list[LayerTrace]
    total_calls: int
    wall_time_ms: float
    metadata: dict = field(default_factory=dict)


def _invoke_set(
    pool: AgentPool,
    indices: list[int],
    x: Array,
    layer: int,
    prior_text: list[str],
    concurrency: int,
) -> dict[int, AgentOutput | AgentUnavailableError]:
    """Fan out invocations for `indices`, joining before return. Results are
    keyed by agent index so completion order never affects downstream math."""

    def call(i: int):
        try:
            return pool.invoke(i, x, layer, prior_text)
        except AgentUnavailableError as exc:
            return exc

    if concurrency == 1 or len(indices) == 1:
        return {i: call(i) for i in indices}
    with ThreadPoolExecutor(max_workers=min(concurrency, len(indices))) as pool_exec:
        results = list(pool_exec.map(call, indices))
    return dict(zip(indices, results))


def _layer_outputs(
    n: int, dim: int, results: dict[int, AgentOutput | AgentUnavailableError]
) -> tuple[list[AgentOutput], list[int], dict[int, float]]:
    """Ordered outputs with zero-vector placeholders for agents that were not
    dispatched or failed. Returns (outputs, failed indices, latencies)."""
    outputs: list[AgentOutput] = []
    failed: list[int] = []
    latencies: dict[int, float] = {}
    for i in range(n):
        res = results.get(i)
        if res is None:
            outputs.append(AgentOutput(vec=np.zeros(dim), agent_index=i))
        elif isinstance(res, AgentUnavailableError):
            failed.append(i)
            outputs.append(AgentOutput(vec=np.zeros(dim), agent_index=i))
        else:
            latencies[i] = res.latency_ms
            outputs.append(res)
    return outputs, failed, latencies


def _effective_weights(g: Array, usable: list[int], n: int) -> Array:
    """Gate weights restricted to `usable` agents. The gate is left untouched
    when every agent is usable so dense aggregation stays bit-exact."""
    if len(usable) == n:
        return g
    if not usable:
        raise AgentUnavailableError("*", "all agents failed in one layer")
    return masked_renormalized(g, usable)


def _pick_text(outputs: list[AgentOutput], weights: Array, usable: list[int]) -> str | None:
    best, best_w = None, -1.0
    for i in usable:
        if outputs[i].text is not None and weights[i] > best_w:
            best, best_w = outputs[i].text, float(weights[i])
    return best


def _texts_of(outputs: list[AgentOutput], usable: list[int]) -> list[str]:
    return [outputs[i].text for i in usable if outputs[i].text is not None]


def run_dense(cfg: PipelineConfig, x: Array) -> RunReport:
    """Every agent at every layer; gate follows the recurrence."""
    cfg.validate()
    if cfg.mode not in ("dense",):
        raise ConfigError(f"run_dense called with mode '{cfg.mode}'")
    return _run_recurrent(cfg, x, sparse_k=None)


def run_sparse(cfg: PipelineConfig, x: Array) -> RunReport:
    """Layer 1 invokes all agents; later layers invoke only the top-k agents
    predicted by the gate of the previous hidden state."""
    cfg.validate()
    if cfg.mode != "sparse":
        raise ConfigError(f"run_sparse called with mode '{cfg.mode}'")
    return _run_recurrent(cfg, x, sparse_k=cfg.k)


def _run_recurrent(cfg: PipelineConfig, x: Array, sparse_k: int | None) -> RunReport:
    params = cfg.params
    n, dim = cfg.pool.n, cfg.pool.dim
    x_cur = as_f64(x)
    state = zeros_lstm_state(params.d_h)
    prior_text: list[str] = []
    prev_gate: Array | None = None
    traces: list[LayerTrace] = []
    total_calls = 0
    started = time.perf_counter()

    for layer in range(1, cfg.layers + 1):
        pool = cfg.pool_for_layer(layer)
        if sparse_k is not None and layer >= 2:
            plan = sparse_select(prev_gate, sparse_k)
            dispatch = list(plan.selected)
            fallback = [i for i in rank_agents(prev_gate) if i not in plan.selected]
        else:
            dispatch = list(range(n))
            fallback = []

        results = _invoke_set(pool, dispatch, x_cur, layer, prior_text, cfg.concurrency)
        attempted = list(dispatch)
        # Sparse failure policy: replace each failed selected agent with the
        # next-ranked unselected agent while any remain.
        wanted = len(dispatch)
        while fallback:
            ok = sum(1 for i in attempted if not isinstance(results[i], AgentUnavailableError))
            if ok >= wanted:
                break
            replacements = fallback[: wanted - ok]
            fallback = fallback[wanted - ok:]
            extra = _invoke_set(pool, replacements, x_cur, layer, prior_text, cfg.concurrency)
            results.update(extra)
            attempted.extend(replacements)

        total_calls += len(attempted)
        outputs, failed, latencies = _layer_outputs(n, dim, results)
        usable = [i for i in attempted if i not in failed]

        z = fuse(params, outputs)
        state, _ = lstm_forward(params.lstm, z, state)
        g = gate(params, state.h)
        eff = _effective_weights(g, sorted(usable), n)
        y = aggregate(eff, outputs)

        traces.append(LayerTrace(
            layer=layer,
            invoked=tuple(sorted(attempted)),
            failed=tuple(sorted(failed)),
            gate=g,
            agg_weights=eff,
            latencies_ms=latencies,
            y=y,
            state_h=state.h.copy(),
            selected_text=_pick_text(outputs, eff, sorted(usable)),
        ))
        prior_text = _texts_of(outputs, sorted(usable))
        prev_gate = g
        x_cur = y

    wall = (time.perf_counter() - started) * 1000.0
    return RunReport(
        mode=cfg.mode, n_agents=n, layers=cfg.layers, k=sparse_k,
        concurrency=cfg.concurrency, final_vec=x_cur,
        final_text=traces[-1].selected_text, traces=traces,
        total_calls=total_calls, wall_time_ms=wall,
    )


def run_static_moa(cfg: PipelineConfig, x: Array) -> RunReport:
    """Uniform aggregation at every layer; no state, no learned gate."""
    cfg.validate()
    if cfg.mode != "static_moa":
        raise ConfigError(f"run_static_moa called with mode '{cfg.mode}'")
    n, dim = cfg.pool.n, cfg.pool.dim
    x_cur = as_f64(x)
    prior_text: list[str] = []
    traces: list[LayerTrace] = []
    total_calls = 0
    started = time.perf_counter()
    uniform = np.ones(n) / n

    for layer in range(1, cfg.layers + 1):
        pool = cfg.pool_for_layer(layer)
        dispatch = list(range(n))
        results = _invoke_set(pool, dispatch, x_cur, layer, prior_text, cfg.concurrency)
        total_calls += n
        outputs, failed, latencies = _layer_outputs(n, dim, results)
        usable = [i for i in dispatch if i not in failed]
        eff = _effective_weights(uniform, usable, n)
        y = aggregate(eff, outputs)
        traces.append(LayerTrace(
            layer=layer, invoked=tuple(dispatch), failed=tuple(sorted(failed)),
            gate=uniform.copy(), agg_weights=eff, latencies_ms=latencies, y=y,
            state_h=np.zeros(0), selected_text=_pick_text(outputs, eff, usable),
        ))
        prior_text = _texts_of(outputs, usable)
        x_cur = y

    wall = (time.perf_counter() - started) * 1000.0
    return RunReport(
        mode=cfg.mode, n_agents=n, layers=cfg.layers, k=None,
        concurrency=cfg.concurrency, final_vec=x_cur,
        final_text=traces[-1].selected_text, traces=traces,
        total_calls=total_calls, wall_time_ms=wall,
    )


def run_linear_ablation(cfg: PipelineConfig, x: Array) -> RunReport:
    """Dense schedule, but the recurrence is replaced by the stateless map
    h = tanh(W z + b) built from the LSTM candidate block, so no information
    is carried between layers."""
    cfg.validate()
    if cfg.mode != "linear_ablation":
        raise ConfigError(f"run_linear_ablation called with mode '{cfg.mode}'")
    params = cfg.params
    n, dim = cfg.pool.n, cfg.pool.dim
    x_cur = as_f64(x)
    prior_text: list[str] = []
    traces: list[LayerTrace] = []
    total_calls = 0
    started = time.perf_counter()

    for layer in range(1, cfg.layers + 1):
        pool = cfg.pool_for_layer(layer)
        dispatch = list(range(n))
        results = _invoke_set(pool, dispatch, x_cur, layer, prior_text, cfg.concurrency)
        total_calls += n
        outputs, failed, latencies = _layer_outputs(n, dim, results)
        usable = [i for i in dispatch if i not in failed]
        z = fuse(params, outputs)
        h = np.tanh(params.lstm.w_c @ z + params.lstm.b_c)
        g = gate(params, h)
        eff = _effective_weights(g, usable, n)
        y = aggregate(eff, outputs)
        traces.append(LayerTrace(
            layer=layer, invoked=tuple(dispatch), failed=tuple(sorted(failed)),
            gate=g, agg_weights=eff, latencies_ms=latencies, y=y,
            state_h=h, selected_text=_pick_text(outputs, eff, usable),
        ))
        prior_text = _texts_of(outputs, usable)
        x_cur = y

    wall = (time.perf_counter() - started) * 1000.0
    return RunReport(
        mode=cfg.mode, n_agents=n, layers=cfg.layers, k=None,
        concurrency=cfg.concurrency, final_vec=x_cur,
        final_text=traces[-1].selected_text, traces=traces,
        total_calls=total_calls, wall_time_ms=wall,
    )


_RUNNERS = {
    "dense": run_dense,
    "sparse": run_sparse,
    "static_moa": run_static_moa,
    "linear_ablation": run_linear_ablation,
}


def run(cfg: PipelineConfig, x: Array) -> RunReport:
    cfg.validate()
    return _RUNNERS[cfg.mode](cfg, x)


def account_calls(report: RunReport) -> dict:
    """Call accounting relative to a dense run of the same shape."""
    per_layer = [len(t.invoked) for t in report.traces]
    dense = report.n_agents * report.layers
    return {
        "calls": report.total_calls,
        "calls_per_layer": per_layer,
        "relative_to_dense": report.total_calls / dense,
    }


# --- report serialization ----------------------------------------------------

def report_to_dict(report: RunReport) -> dict:
    return {
        "report_schema": REPORT_SCHEMA,
        "mode": report.mode,
        "n_agents": report.n_agents,
        "layers": report.layers,
        "k": report.k,
        "concurrency": report.concurrency,
        "final_vec": report.final_vec.tolist(),
        "final_text": report.final_text,
        "total_calls": report.total_calls,
        "wall_time_ms": report.wall_time_ms,
        "metadata": report.metadata,
        "traces": [
            {
                "layer": t.layer,
                "invoked": list(t.invoked),
                "failed": list(t.failed),
                "gate": t.gate.tolist(),
                "agg_weights": t.agg_weights.tolist(),
                "latencies_ms": {str(i): v for i, v in t.latencies_ms.items()},
                "y": t.y.tolist(),
                "state_h": t.state_h.tolist(),
                "selected_text": t.selected_text,
            }
            for t in report.traces
        ],
    }


def save_report(report: RunReport, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh)


def _need(doc: dict, key: str, kinds, where: str):
    if key not in doc:
        raise DeserializationError(f"{where}{key}: missing")
    val = doc[key]
    if kinds is not None and not isinstance(val, kinds):
        raise DeserializationError(f"{where}{key}: wrong type {type(val).__name__}")
    return val


def report_from_dict(doc: dict) -> RunReport:
    if not isinstance(doc, dict):
        raise DeserializationError("report: top level must be an object")
    schema = doc.get("report_schema")
    if schema != REPORT_SCHEMA:
        raise DeserializationError(f"report_schema: expected {REPORT_SCHEMA}, got {schema!r}")
    traces = []
    raw_traces = _need(doc, "traces", list, "")
    for ti, t in enumerate(raw_traces):
        where = f"traces[{ti}]."
        traces.append(LayerTrace(
            layer=_need(t, "layer", int, where),
            invoked=tuple(_need(t, "invoked", list, where)),
            failed=tuple(_need(t, "failed", list, where)),
            gate=np.array(_need(t, "gate", list, where), dtype=np.float64),
            agg_weights=np.array(_need(t, "agg_weights", list, where), dtype=np.float64),
            latencies_ms={int(k): float(v) for k, v in _need(t, "latencies_ms", dict, where).items()},
            y=np.array(_need(t, "y", list, where), dtype=np.float64),
            state_h=np.array(_need(t, "state_h", list, where), dtype=np.float64),
            selected_text=t.get("selected_text"),
        ))
    return RunReport(
        mode=_need(doc, "mode", str, ""),
        n_agents=_need(doc, "n_agents", int, ""),
        layers=_need(doc, "layers", int, ""),
        k=doc.get("k"),
        concurrency=_need(doc, "concurrency", int, ""),
        final_vec=np.array(_need(doc, "final_vec", list, ""), dtype=np.float64),
        final_text=doc.get("final_text"),
        traces=traces,
        total_calls=_need(doc, "total_calls", int, ""),
        wall_time_ms=float(_need(doc, "wall_time_ms", (int, float), "")),
        metadata=doc.get("metadata", {}),
    )


def load_report(path: str | os.PathLike) -> RunReport:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DeserializationError(f"report file: malformed JSON ({exc})") from exc
    return report_from_dict(doc)


def write_trace_csv(report: RunReport, path: str | os.PathLike) -> None:
    """Per (layer, agent) rows: layer, agent_index, invoked, gate_weight,
    latency_ms (empty when the agent was not dispatched)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_CSV_COLUMNS)
        for t in report.traces:
            for i in range(report.n_agents):
                invoked = i in t.invoked
                latency = t.latencies_ms.get(i)
                writer.writerow([
                    t.layer, i, str(invoked).lower(),
                    f"{t.gate[i]:.17g}",
                    "" if latency is None else f"{latency:.6g}",
                ])


def reports_equivalent(a: RunReport, b: RunReport, tol: float = 0.0) -> bool:
    """Structural equality ignoring wall-clock fields. tol=0 demands bit
    equality of all numeric payloads."""
    if (a.n_agents, a.layers) != (b.n_agents, b.layers):
        return False
    if len(a.traces) != len(b.traces):
        return False
    def close(u: Array, v: Array) -> bool:
        if u.shape != v.shape:
            return False
        return np.array_equal(u, v) if tol == 0.0 else bool(np.max(np.abs(u - v)) <= tol)
    if not close(a.final_vec, b.final_vec):
        return False
    for ta, tb in zip(a.traces, b.traces):
        if ta.invoked != tb.invoked or ta.failed != tb.failed:
            return False
        if not (close(ta.gate, tb.gate) and close(ta.y, tb.y) and close(ta.agg_weights, tb.agg_weights)):
            return False
    return True
