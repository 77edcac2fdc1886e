"""Synthetic task suites, distance-based win-rate judging between pipeline
modes, and call/latency tables contrasting sparse and dense execution.

Judging is exact: the output closer (L2) to a known target wins, ties split
0.5/0.5. All randomness flows from one top-level seed recorded in the report.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .agents import AgentSpec, build_pool
from .errors import ConfigError, DeserializationError, ParameterError
from .numkit import Array, as_f64
from .pipeline import PipelineConfig, run

BENCH_SCHEMA = 1

GENERATORS = ("linear_skill", "clustered")

TIE_EPS = 1e-9

BENCH_CSV_COLUMNS = (
    "suite", "mode", "n", "k", "layers", "seed", "tasks",
    "mean_distance", "win_count", "calls", "mean_wall_ms",
)

TIMING_CSV_COLUMNS = ("n", "mode_label", "relative_time", "call_ratio")


@dataclass(frozen=True)
class SyntheticTask:
    x: Array
    target: Array
    difficulty: float | None = None
    best_agent: int | None = None


@dataclass
class ModeStats:
    mode: str
    mean_distance: float
    win_count: float      # ties contribute 0.5, so this is an exact half-integer
    calls: int
    mean_wall_ms: float


@dataclass
class BenchResult:
    suite: str
    n: int
    k: int | None
    layers: int
    seed: int
    tasks: int
    stats: list[ModeStats] = field(default_factory=list)


@dataclass(frozen=True)
class TimingRow:
    n: int
    mode_label: str
    relative_time: float
    call_ratio: float


def skill_directions(n_agents: int, dim: int, seed: int) -> Array:
    """Unit direction per agent; tasks belong to the agent whose direction
    best aligns with the input. argmax of a linear score keeps the regions
    learnable by a softmax gate."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    dirs = rng.normal(0.0, 1.0, (n_agents, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def region_of(x: Array, directions: Array) -> int:
    return int(np.argmax(directions @ x))


def _skill_affine(dim: int, agent_seed: int) -> tuple[Array, Array]:
    """A distinct idempotent affine map per agent: projection onto a random
    subspace plus an offset in its orthogonal complement. Idempotence keeps
    the per-region best agent optimal at every aggregation depth, so routing
    quality stays measurable in multi-layer runs."""
    rng = np.random.default_rng(np.random.SeedSequence([agent_seed, 101]))
    q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (dim, dim)))
    rank = max(1, dim // 2)
    basis = q[:, :rank]
    proj = basis @ basis.T
    offset = (np.eye(dim) - proj) @ rng.uniform(-1.0, 1.0, dim)
    return proj, offset


def make_linear_skill_specs(n_agents: int, dim: int, seed: int) -> list[AgentSpec]:
    """Mock agents with distinct seeded idempotent affine maps; the task
    generator below derives targets from the same maps, so per region one
    agent is exact."""
    specs = []
    for i in range(n_agents):
        w, b = _skill_affine(dim, seed * 1000 + i)
        specs.append(AgentSpec(id=f"skill{i}", kind="mock_linear", dim=dim, weight=w, bias=b))
    return specs


def _affine_of(spec: AgentSpec):
    return spec.weight, spec.bias


def gen_tasks(
    count: int,
    dim: int,
    seed: int,
    generator: str = "linear_skill",
    n_agents: int | None = None,
) -> list[SyntheticTask]:
    """Deterministic task suites.

    linear_skill: inputs are uniform in [-1, 1]^dim and partitioned into
    n_agents regions by their first coordinate; the target of a region-r task
    is agent r's affine map applied to the input, so that agent is exactly
    optimal there. clustered: inputs scatter around uniform cluster centers in
    [-1, 1]^dim and the target is the center, so every target has max-norm
    at most 1.
    """
    if count < 1:
        raise ParameterError(f"gen_tasks: count must be >= 1, got {count}")
    if generator not in GENERATORS:
        raise ParameterError(f"gen_tasks: unknown generator '{generator}'")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    tasks: list[SyntheticTask] = []
    if generator == "linear_skill":
        if n_agents is None or n_agents < 1:
            raise ParameterError("gen_tasks: linear_skill requires n_agents >= 1")
        maps = [_affine_of(s) for s in make_linear_skill_specs(n_agents, dim, seed)]
        for _ in range(count):
            x = rng.uniform(-1.0, 1.0, dim)
            region = min(int((x[0] + 1.0) / 2.0 * n_agents), n_agents - 1)
            w, b = maps[region]
            tasks.append(SyntheticTask(x=x, target=w @ x + b, best_agent=region))
        return tasks
    n_clusters = 5
    centers = rng.uniform(-0.9, 0.9, (n_clusters, dim))
    for _ in range(count):
        c = int(rng.integers(n_clusters))
        noise = rng.uniform(-0.1, 0.1, dim)
        x = centers[c] + noise
        tasks.append(SyntheticTask(
            x=x, target=centers[c].copy(), difficulty=float(np.linalg.norm(noise)),
        ))
    return tasks


def judge(a: Array, b: Array, target: Array) -> str:
    """'A', 'B', or 'tie' by L2 distance to the target."""
    a, b, target = as_f64(a), as_f64(b), as_f64(target)
    if a.shape != target.shape or b.shape != target.shape:
        raise ParameterError(
            f"judge: shapes {a.shape}, {b.shape} must match target {target.shape}"
        )
    da = float(np.linalg.norm(a - target))
    db = float(np.linalg.norm(b - target))
    if abs(da - db) < TIE_EPS:
        return "tie"
    return "A" if da < db else "B"


RunFn = Callable[[SyntheticTask], Array]


def win_rate(mode_x: RunFn, mode_y: RunFn, tasks: Sequence[SyntheticTask]) -> float:
    """Fraction of tasks won by mode_x; ties count 0.5.

    Wins are tallied in half-units, so win_rate(x, y) + win_rate(y, x) is
    exactly 1.0 whenever len(tasks) is a power of two (the quotient is then
    dyadic and floating-point division is exact).
    """
    if not tasks:
        raise ParameterError("win_rate: no tasks")
    halves = 0
    for idx, task in enumerate(tasks):
        try:
            out_x = mode_x(task)
            out_y = mode_y(task)
        except Exception as exc:
            raise RuntimeError(f"win_rate: run failed on task {idx}: {exc}") from exc
        verdict = judge(out_x, out_y, task.target)
        if verdict == "A":
            halves += 2
        elif verdict == "tie":
            halves += 1
    return halves / (2 * len(tasks))


def pipeline_runner(cfg: PipelineConfig) -> RunFn:
    return lambda task: run(cfg, task.x).final_vec


def bench_pair(
    suite: str,
    cfg_x: PipelineConfig,
    cfg_y: PipelineConfig,
    tasks: Sequence[SyntheticTask],
    seed: int,
) -> BenchResult:
    """Head-to-head comparison of two pipeline configurations on one suite."""
    if not tasks:
        raise ConfigError("bench_pair: no tasks")
    stats = []
    halves = {0: 0, 1: 0}
    dists: dict[int, list[float]] = {0: [], 1: []}
    walls: dict[int, list[float]] = {0: [], 1: []}
    calls = {0: 0, 1: 0}
    for task in tasks:
        reports = [run(cfg_x, task.x), run(cfg_y, task.x)]
        for side, rep in enumerate(reports):
            dists[side].append(float(np.linalg.norm(rep.final_vec - task.target)))
            walls[side].append(rep.wall_time_ms)
            calls[side] += rep.total_calls
        verdict = judge(reports[0].final_vec, reports[1].final_vec, task.target)
        if verdict == "A":
            halves[0] += 2
        elif verdict == "B":
            halves[1] += 2
        else:
            halves[0] += 1
            halves[1] += 1
    for side, cfg in ((0, cfg_x), (1, cfg_y)):
        stats.append(ModeStats(
            mode=cfg.mode,
            mean_distance=float(np.mean(dists[side])),
            win_count=halves[side] / 2.0,
            calls=calls[side],
            mean_wall_ms=float(np.mean(walls[side])),
        ))
    return BenchResult(
        suite=suite, n=cfg_x.pool.n, k=cfg_x.k if cfg_x.mode == "sparse" else cfg_y.k,
        layers=cfg_x.layers, seed=seed, tasks=len(tasks), stats=stats,
    )


def default_k_rule(n: int) -> int:
    return max(1, (n + 1) // 2)


def timing_table(
    n_values: Sequence[int],
    k_rule: Callable[[int], int] = default_k_rule,
    layers: int = 4,
    latency_ms: float = 5.0,
    concurrency: int = 1,
    seed: int = 0,
) -> list[TimingRow]:
    """Measured wall-time ratios next to exact call ratios.

    Per n: 'multiple_proposer' compares the sparse run against the dense run
    at the same n; 'single_proposer' compares a one-agent dense run against
    the same baseline. With serial execution and a fixed per-call latency the
    wall-time ratio tracks the call ratio.
    """
    rows: list[TimingRow] = []
    for n in n_values:
        k = min(k_rule(n), n)
        specs = [
            AgentSpec(id=f"timed{i}", kind="mock_linear", dim=4,
                      init_seed=seed * 100 + i, latency_ms=latency_ms)
            for i in range(n)
        ]
        pool = build_pool(specs)
        from .router import init_router_params

        params = init_router_params(n, 4, seed=seed)
        x = np.full(4, 0.1)
        dense_cfg = PipelineConfig(pool=pool, params=params, layers=layers,
                                   mode="dense", concurrency=concurrency)
        sparse_cfg = PipelineConfig(pool=pool, params=params, layers=layers,
                                    mode="sparse", k=k, concurrency=concurrency)
        dense_rep = run(dense_cfg, x)
        sparse_rep = run(sparse_cfg, x)

        single_pool = build_pool(specs[:1])
        single_params = init_router_params(1, 4, seed=seed)
        single_rep = run(PipelineConfig(pool=single_pool, params=single_params,
                                        layers=layers, mode="dense",
                                        concurrency=concurrency), x)

        base = dense_rep.wall_time_ms
        dense_calls = n * layers
        rows.append(TimingRow(
            n=n, mode_label="multiple_proposer",
            relative_time=sparse_rep.wall_time_ms / base,
            call_ratio=sparse_rep.total_calls / dense_calls,
        ))
        rows.append(TimingRow(
            n=n, mode_label="single_proposer",
            relative_time=single_rep.wall_time_ms / base,
            call_ratio=single_rep.total_calls / dense_calls,
        ))
    return rows


# --- report emission ----------------------------------------------------------

def _bench_rows(result: BenchResult) -> list[dict]:
    return [
        {
            "suite": result.suite, "mode": s.mode, "n": result.n, "k": result.k,
            "layers": result.layers, "seed": result.seed, "tasks": result.tasks,
            "mean_distance": s.mean_distance, "win_count": s.win_count,
            "calls": s.calls, "mean_wall_ms": s.mean_wall_ms,
        }
        for s in result.stats
    ]


def _timing_rows(rows: Sequence[TimingRow]) -> list[dict]:
    return [
        {"n": r.n, "mode_label": r.mode_label, "relative_time": r.relative_time,
         "call_ratio": r.call_ratio}
        for r in rows
    ]


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return "" if value is None else str(value)


def emit_report(
    result: BenchResult | Sequence[TimingRow],
    path: str | os.PathLike,
    format: str = "json",
) -> None:
    """Write a benchmark or timing report. JSON keeps full float precision;
    csv and markdown render floats with 6 significant digits."""
    if isinstance(result, BenchResult):
        rows, columns, kind = _bench_rows(result), BENCH_CSV_COLUMNS, "bench"
    else:
        rows, columns, kind = _timing_rows(result), TIMING_CSV_COLUMNS, "timing"
    if format == "json":
        doc = {"bench_schema": BENCH_SCHEMA, "kind": kind, "rows": rows}
        if isinstance(result, BenchResult):
            doc["seed"] = result.seed
        with open(path, "w") as fh:
            json.dump(doc, fh)
    elif format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(row[c]) for c in columns])
    elif format == "markdown":
        with open(path, "w") as fh:
            fh.write("| " + " | ".join(columns) + " |\n")
            fh.write("|" + "|".join(" --- " for _ in columns) + "|\n")
            for row in rows:
                fh.write("| " + " | ".join(_fmt(row[c]) for c in columns) + " |\n")
    else:
        raise ParameterError(f"emit_report: unknown format '{format}'")


def load_bench_json(path: str | os.PathLike) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DeserializationError(f"bench file: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise DeserializationError("bench file: top level must be an object")
    if doc.get("bench_schema") != BENCH_SCHEMA:
        raise DeserializationError(
            f"bench_schema: expected {BENCH_SCHEMA}, got {doc.get('bench_schema')!r}"
        )
    if not isinstance(doc.get("rows"), list):
        raise DeserializationError("rows: missing or not a list")
    return doc
