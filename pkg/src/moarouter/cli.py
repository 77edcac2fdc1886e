"""Command-line entry point: train / run / bench / gradcheck / compare over a
single JSON config file. Flag overrides win over file values; every command
echoes its effective configuration as one machine-readable line on startup.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 agent failure beyond the fallback policy, 5 gradient mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bench as bn
from . import pipeline as pl
from .agents import EmbeddingConfig, build_pool, embed_text
from .config import RunConfig, load_config
from .errors import (
    AgentUnavailableError,
    ConfigError,
    DeserializationError,
    NumericError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)
from .losses import LossConfig, TrainSample, router_loss_grad, unrolled_loss
from .numkit import finite_diff_grad
from .router import (
    RouterParams,
    flat_coordinate_name,
    init_router_params,
    load_params,
    params_to_vec,
    save_params,
    vec_to_params,
    zeros_router_params,
)
from .train import TrainConfig, make_fixed_loss_dataset, make_region_dataset, train_router

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_AGENT = 4
EXIT_GRADCHECK = 5

GRADCHECK_TOL = 1e-5

log = logging.getLogger("moarouter")


def _echo_effective(cfg: RunConfig, overrides: dict) -> None:
    line = {"effective_config": cfg.effective_dict()}
    if overrides:
        line["overrides"] = overrides
    print(json.dumps(line, separators=(",", ":")))


def _out_dir(default: str) -> str:
    return os.environ.get("MOAROUTER_OUT_DIR", default)


def _require_section(cfg: RunConfig, name: str) -> None:
    if name not in cfg.present_sections:
        raise ConfigError(f"{name}: section required by this command is missing")


def _build_pool(cfg: RunConfig):
    if not cfg.agents:
        raise ConfigError("agents: section must list at least one agent")
    return build_pool(cfg.agents)


def _router_dims(cfg: RunConfig, pool) -> tuple[int, int, int | None, int | None]:
    n = cfg.router.n_agents or (pool.n if pool is not None else None)
    d = cfg.router.agent_dim or (pool.dim if pool is not None else None)
    if n is None or d is None:
        raise ConfigError("router: n_agents and agent_dim required when no agents are configured")
    return n, d, cfg.router.d_z, cfg.router.d_h


def _load_or_init_params(cfg: RunConfig, pool, zero_init: bool = False) -> RouterParams:
    n, d, d_z, d_h = _router_dims(cfg, pool)
    if zero_init:
        return zeros_router_params(n, d, d_z, d_h)
    if cfg.router.weights_path:
        params = load_params(cfg.router.weights_path)
        if params.n_agents != n or params.agent_dim != d:
            raise ConfigError(
                f"router.weights_path: weights are for {params.n_agents} agents of dim "
                f"{params.agent_dim}, config expects {n} agents of dim {d}"
            )
        return params
    return init_router_params(n, d, d_z, d_h, seed=cfg.router.init_seed)


def _loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(lam=cfg.loss.lam, gamma=cfg.loss.gamma, entropy_mode=cfg.loss.entropy_mode)


def _train_dataset(cfg: RunConfig, pool, agent_dim: int) -> list[TrainSample]:
    ds = cfg.train.dataset
    if ds.kind == "fixed_losses":
        return make_fixed_loss_dataset(ds.losses, count=ds.count, agent_dim=agent_dim, seed=ds.seed)
    if pool is None:
        raise ConfigError("train.dataset: linear_skill dataset requires an agents section")
    return make_region_dataset(pool, count=ds.count, seed=ds.seed)


def cmd_train(cfg: RunConfig, args) -> int:
    _require_section(cfg, "train")
    pool = build_pool(cfg.agents) if cfg.agents else None
    if cfg.train.dataset.kind == "fixed_losses":
        n = len(cfg.train.dataset.losses)
        d = cfg.router.agent_dim or (pool.dim if pool else 4)
    else:
        if pool is None:
            raise ConfigError("train.dataset: linear_skill dataset requires an agents section")
        n, d = pool.n, pool.dim
    params0 = (
        _load_or_init_params(cfg, pool)
        if pool is not None and pool.n == n
        else init_router_params(n, d, cfg.router.d_z, cfg.router.d_h, seed=cfg.router.init_seed)
    )
    dataset = _train_dataset(cfg, pool, d)
    tcfg = TrainConfig(
        learning_rate=cfg.train.learning_rate,
        steps=cfg.train.steps,
        batch_size=cfg.train.batch_size,
        optimizer=cfg.train.optimizer,
        seed=cfg.train.seed,
        unroll_layers=cfg.train.unroll_layers,
    )
    result = train_router(params0, dataset, tcfg, _loss_config(cfg), pool=pool)
    out_dir = _out_dir(".")
    weights_path = os.path.join(out_dir, cfg.train.weights_out)
    curve_path = os.path.join(out_dir, cfg.train.curve_out)
    save_params(result.params, weights_path)
    result.write_curve_csv(curve_path)
    print(json.dumps({
        "trained": True,
        "weights": weights_path,
        "curve": curve_path,
        "final_mean_loss": result.curve[-1]["mean_loss"],
    }))
    return EXIT_OK


def _parse_input(raw: str, dim: int) -> np.ndarray:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, list):
        vec = np.array(data, dtype=np.float64)
        if vec.shape != (dim,):
            raise ConfigError(f"--input: expected {dim} numbers, got {vec.shape[0]}")
        return vec
    return embed_text(EmbeddingConfig(dim=dim, seed=0), raw)


def cmd_run(cfg: RunConfig, args) -> int:
    pool = _build_pool(cfg)
    mode = args.mode or cfg.pipeline.mode
    layers = args.layers or cfg.pipeline.layers
    k = args.k if args.k is not None else cfg.pipeline.k
    params = None
    if mode != "static_moa":
        params = _load_or_init_params(cfg, pool, zero_init=args.zero_init)
    pcfg = pl.PipelineConfig(
        pool=pool, params=params, layers=layers, mode=mode, k=k,
        concurrency=cfg.pipeline.concurrency,
    )
    pcfg.validate()
    x = _parse_input(args.input, pool.dim)
    report = pl.run(pcfg, x)
    if args.report:
        pl.save_report(report, args.report)
    out = {"final_vec": report.final_vec.tolist(), "total_calls": report.total_calls}
    if report.final_text is not None:
        out["final_text"] = report.final_text
    print(json.dumps(out))
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    _require_section(cfg, "bench")
    b = cfg.bench
    out_dir = _out_dir(b.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    dim = cfg.router.agent_dim or 4
    train_section = cfg.train
    results = []
    for seed in b.seeds:
        specs = bn.make_linear_skill_specs(b.n_agents, dim, seed)
        pool = build_pool(specs)
        dataset = make_region_dataset(pool, count=128, seed=seed)
        tcfg = TrainConfig(
            learning_rate=train_section.learning_rate if train_section else 0.5,
            steps=train_section.steps if train_section else 300,
            batch_size=train_section.batch_size if train_section else 16,
            optimizer=train_section.optimizer if train_section else "sgd",
            seed=seed,
        )
        params0 = init_router_params(b.n_agents, dim, seed=cfg.router.init_seed + seed)
        trained = train_router(params0, dataset, tcfg, _loss_config(cfg), pool=pool).params
        tasks = bn.gen_tasks(b.tasks, dim, seed, "linear_skill", n_agents=b.n_agents)
        sparse_cfg = pl.PipelineConfig(pool=pool, params=trained, layers=b.layers,
                                       mode="sparse", k=b.k,
                                       concurrency=cfg.pipeline.concurrency)
        dense_cfg = pl.PipelineConfig(pool=pool, params=trained, layers=b.layers,
                                      mode="dense", concurrency=cfg.pipeline.concurrency)
        results.append(bn.bench_pair("linear_skill", sparse_cfg, dense_cfg, tasks, seed))

    for idx, result in enumerate(results):
        stem = os.path.join(out_dir, f"bench_seed{result.seed}")
        bn.emit_report(result, stem + ".json", "json")
        bn.emit_report(result, stem + ".csv", "csv")
    timing = bn.timing_table(
        b.timing_n_values, layers=b.timing_layers, latency_ms=b.timing_latency_ms,
        concurrency=1, seed=b.seeds[0],
    )
    bn.emit_report(timing, os.path.join(out_dir, "timing.json"), "json")
    bn.emit_report(timing, os.path.join(out_dir, "timing.csv"), "csv")

    sparse_wins = sum(r.stats[0].win_count for r in results)
    total = sum(r.tasks for r in results)
    print(json.dumps({
        "bench_schema": bn.BENCH_SCHEMA,
        "suites": len(results),
        "sparse_win_rate_vs_dense": sparse_wins / total,
        "out_dir": out_dir,
    }))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    _require_section(cfg, "loss")
    _require_section(cfg, "router")
    n = cfg.router.n_agents or 3
    d = cfg.router.agent_dim or 4
    lcfg = _loss_config(cfg)
    worst_rel = 0.0
    worst_coord = ""
    layer_counts = (1, 3)
    for seed in range(5):
        for layers in layer_counts:
            params = init_router_params(n, d, cfg.router.d_z, cfg.router.d_h,
                                        seed=cfg.router.init_seed + seed)
            rng = np.random.default_rng(seed + 1)
            vecs = rng.normal(0.0, 1.0, (n, d))
            losses = rng.uniform(0.0, 2.0, n)
            sample = TrainSample(x=np.zeros(d), agent_losses=losses, agent_vecs=vecs)
            _, grads, _ = router_loss_grad(params, sample, None, lcfg, layers=layers)
            analytic = params_to_vec(grads)
            if args.corrupt:
                analytic = analytic.copy()
                analytic[0] += args.corrupt
            theta = params_to_vec(params)

            def objective(t):
                return unrolled_loss(vec_to_params(t, params), vecs, losses, lcfg,
                                     layers=layers)[0]

            fd = finite_diff_grad(objective, theta, 1e-5)
            denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(fd)), 1e-300)
            rel = float(np.linalg.norm(analytic - fd)) / denom
            if rel > worst_rel:
                worst_rel = rel
                coord_errs = np.abs(analytic - fd) / np.maximum(
                    np.maximum(np.abs(analytic), np.abs(fd)), 1.0
                )
                worst_coord = flat_coordinate_name(params, int(np.argmax(coord_errs)))
    print(json.dumps({
        "max_relative_error": worst_rel,
        "tolerance": GRADCHECK_TOL,
        "worst_coordinate": worst_coord,
    }))
    return EXIT_OK if worst_rel < GRADCHECK_TOL else EXIT_GRADCHECK


def cmd_compare(cfg: RunConfig, args) -> int:
    pool = _build_pool(cfg)
    modes = [m.strip() for m in args.modes.split(",")]
    if len(modes) != 2:
        raise ConfigError(f"--modes: expected two comma-separated modes, got '{args.modes}'")
    params = _load_or_init_params(cfg, pool)
    layers = cfg.pipeline.layers
    configs = []
    for mode in modes:
        configs.append(pl.PipelineConfig(
            pool=pool,
            params=None if mode == "static_moa" else params,
            layers=layers,
            mode=mode,
            k=cfg.pipeline.k,
            concurrency=cfg.pipeline.concurrency,
        ))
        configs[-1].validate()
    count = cfg.bench.tasks if cfg.bench else 64
    seed = cfg.bench.seeds[0] if cfg.bench and cfg.bench.seeds else 1
    tasks = bn.gen_tasks(count, pool.dim, seed, "linear_skill", n_agents=pool.n)
    rate = bn.win_rate(bn.pipeline_runner(configs[0]), bn.pipeline_runner(configs[1]), tasks)
    print(json.dumps({"modes": modes, "tasks": count, "win_rate_first_vs_second": rate}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moarouter",
        description="Recurrent gating router for layered mixture-of-agents pipelines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("-c", "--config", required=True, help="path to the JSON config file")

    p_train = sub.add_parser("train", help="fit router weights on the configured dataset")
    add_config(p_train)

    p_run = sub.add_parser("run", help="run the pipeline on one input")
    add_config(p_run)
    p_run.add_argument("--input", required=True, help="JSON array of floats, or free text")
    p_run.add_argument("--mode", choices=pl.MODES, help="override pipeline.mode")
    p_run.add_argument("--k", type=int, help="override pipeline.k")
    p_run.add_argument("--layers", type=int, help="override pipeline.layers")
    p_run.add_argument("--report", help="write the run report JSON here")
    p_run.add_argument("--zero-init", action="store_true",
                       help="use all-zero router weights instead of a weights file")

    p_bench = sub.add_parser("bench", help="run the benchmark suite and timing table")
    add_config(p_bench)

    p_grad = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    add_config(p_grad)
    p_grad.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)

    p_cmp = sub.add_parser("compare", help="win rate between two modes on a synthetic suite")
    add_config(p_cmp)
    p_cmp.add_argument("--modes", required=True, help="two comma-separated modes, e.g. sparse,dense")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "run": cmd_run,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def _overrides_of(args) -> dict:
    keys = ("mode", "k", "layers", "zero_init", "modes", "corrupt")
    out = {}
    for key in keys:
        val = getattr(args, key, None)
        if val not in (None, False, 0.0):
            out[key] = val
    return out


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("MOAROUTER_LOG_LEVEL", "WARNING").upper(),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        _echo_effective(cfg, _overrides_of(args))
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, DeserializationError, ParameterError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (AgentUnavailableError, NumericError) as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_AGENT


if __name__ == "__main__":
    sys.exit(main())
