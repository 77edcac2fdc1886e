"""Declarative run configuration: one JSON document with agents / router /
pipeline / loss / train / bench sections, schema-checked before any execution.
Unknown keys are rejected with their location so typos fail fast.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .agents import AGENT_KINDS, AgentSpec
from .errors import ConfigError

_AGENT_KEYS = {
    "id", "kind", "dim", "weight", "bias", "noise_std", "seed", "init_seed",
    "latency_ms", "embed_seed", "endpoint", "timeout_ms", "retries", "auth_header",
}
_ROUTER_KEYS = {"n_agents", "agent_dim", "d_z", "d_h", "init_seed", "weights_path"}
_PIPELINE_KEYS = {"layers", "mode", "k", "concurrency"}
_LOSS_KEYS = {"lambda", "gamma", "entropy_mode"}
_TRAIN_KEYS = {
    "optimizer", "learning_rate", "steps", "batch_size", "seed", "unroll_layers",
    "dataset", "weights_out", "curve_out",
}
_DATASET_KEYS = {"kind", "losses", "count", "seed"}
_BENCH_KEYS = {
    "suite", "tasks", "seeds", "n_agents", "k", "layers", "out_dir",
    "timing_n_values", "timing_latency_ms", "timing_layers",
}
_TOP_KEYS = {"agents", "router", "pipeline", "loss", "train", "bench"}


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{where}{key}: unknown key")


def _expect(doc: dict, key: str, kinds, where: str, default=None, required=False):
    if key not in doc:
        if required:
            raise ConfigError(f"{where}{key}: missing required key")
        return default
    val = doc[key]
    if kinds is not None and not isinstance(val, kinds):
        raise ConfigError(f"{where}{key}: expected {kinds}, got {type(val).__name__}")
    return val


@dataclass
class DatasetConfig:
    kind: str = "fixed_losses"
    losses: list[float] = field(default_factory=lambda: [1.0, 0.2, 0.8])
    count: int = 16
    seed: int = 5


@dataclass
class RouterSection:
    n_agents: int | None = None
    agent_dim: int | None = None
    d_z: int | None = None
    d_h: int | None = None
    init_seed: int = 0
    weights_path: str | None = None


@dataclass
class PipelineSection:
    layers: int = 1
    mode: str = "dense"
    k: int | None = None
    concurrency: int = 8


@dataclass
class LossSection:
    lam: float = 0.0
    gamma: float = 0.0
    entropy_mode: str = "bonus"


@dataclass
class TrainSection:
    optimizer: str = "sgd"
    learning_rate: float = 0.5
    steps: int = 500
    batch_size: int = 0
    seed: int = 7
    unroll_layers: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    weights_out: str = "weights.json"
    curve_out: str = "curve.csv"


@dataclass
class BenchSection:
    suite: str = "linear_skill"
    tasks: int = 200
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    n_agents: int = 6
    k: int = 3
    layers: int = 3
    out_dir: str = "."
    timing_n_values: list[int] = field(default_factory=lambda: [1, 2, 3, 6])
    timing_latency_ms: float = 5.0
    timing_layers: int = 4


@dataclass
class RunConfig:
    agents: list[AgentSpec] = field(default_factory=list)
    router: RouterSection = field(default_factory=RouterSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection | None = None
    bench: BenchSection | None = None
    present_sections: set = field(default_factory=set)

    def effective_dict(self) -> dict:
        """Flat echo of every effective value, for the startup line."""
        doc = {
            "agents": [
                {"id": s.id, "kind": s.kind, "dim": s.dim} for s in self.agents
            ],
            "router": vars(self.router).copy(),
            "pipeline": vars(self.pipeline).copy(),
            "loss": vars(self.loss).copy(),
        }
        if self.train is not None:
            t = vars(self.train).copy()
            t["dataset"] = vars(self.train.dataset).copy()
            doc["train"] = t
        if self.bench is not None:
            doc["bench"] = vars(self.bench).copy()
        return doc


def _parse_agent(doc: dict, idx: int) -> AgentSpec:
    where = f"agents[{idx}]."
    if not isinstance(doc, dict):
        raise ConfigError(f"agents[{idx}]: expected an object")
    _reject_unknown(doc, _AGENT_KEYS, where)
    agent_id = _expect(doc, "id", str, where, required=True)
    kind = _expect(doc, "kind", str, where, required=True)
    if kind not in AGENT_KINDS:
        raise ConfigError(f"{where}kind: '{kind}' is not one of {AGENT_KINDS}")
    dim = _expect(doc, "dim", int, where, required=True)
    weight = _expect(doc, "weight", list, where)
    bias = _expect(doc, "bias", list, where)
    return AgentSpec(
        id=agent_id,
        kind=kind,
        dim=dim,
        weight=None if weight is None else np.array(weight, dtype=np.float64),
        bias=None if bias is None else np.array(bias, dtype=np.float64),
        noise_std=float(_expect(doc, "noise_std", (int, float), where, default=0.0)),
        seed=_expect(doc, "seed", int, where, default=0),
        init_seed=_expect(doc, "init_seed", int, where),
        latency_ms=float(_expect(doc, "latency_ms", (int, float), where, default=0.0)),
        embed_seed=_expect(doc, "embed_seed", int, where, default=0),
        endpoint=_expect(doc, "endpoint", str, where),
        timeout_ms=float(_expect(doc, "timeout_ms", (int, float), where, default=1000.0)),
        retries=_expect(doc, "retries", int, where, default=1),
        auth_header=_expect(doc, "auth_header", str, where),
    )


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    _reject_unknown(doc, _TOP_KEYS, "")
    cfg = RunConfig(present_sections=set(doc.keys()))

    agents_doc = _expect(doc, "agents", list, "", default=[])
    cfg.agents = [_parse_agent(a, i) for i, a in enumerate(agents_doc)]

    if "router" in doc:
        r = _expect(doc, "router", dict, "", required=True)
        _reject_unknown(r, _ROUTER_KEYS, "router.")
        cfg.router = RouterSection(
            n_agents=_expect(r, "n_agents", int, "router."),
            agent_dim=_expect(r, "agent_dim", int, "router."),
            d_z=_expect(r, "d_z", int, "router."),
            d_h=_expect(r, "d_h", int, "router."),
            init_seed=_expect(r, "init_seed", int, "router.", default=0),
            weights_path=_expect(r, "weights_path", str, "router."),
        )
    if "pipeline" in doc:
        p = _expect(doc, "pipeline", dict, "", required=True)
        _reject_unknown(p, _PIPELINE_KEYS, "pipeline.")
        cfg.pipeline = PipelineSection(
            layers=_expect(p, "layers", int, "pipeline.", default=1),
            mode=_expect(p, "mode", str, "pipeline.", default="dense"),
            k=_expect(p, "k", int, "pipeline."),
            concurrency=_expect(p, "concurrency", int, "pipeline.", default=8),
        )
    if "loss" in doc:
        lo = _expect(doc, "loss", dict, "", required=True)
        _reject_unknown(lo, _LOSS_KEYS, "loss.")
        cfg.loss = LossSection(
            lam=float(_expect(lo, "lambda", (int, float), "loss.", default=0.0)),
            gamma=float(_expect(lo, "gamma", (int, float), "loss.", default=0.0)),
            entropy_mode=_expect(lo, "entropy_mode", str, "loss.", default="bonus"),
        )
    if "train" in doc:
        t = _expect(doc, "train", dict, "", required=True)
        _reject_unknown(t, _TRAIN_KEYS, "train.")
        dataset = DatasetConfig()
        if "dataset" in t:
            d = _expect(t, "dataset", dict, "train.", required=True)
            _reject_unknown(d, _DATASET_KEYS, "train.dataset.")
            kind = _expect(d, "kind", str, "train.dataset.", default="fixed_losses")
            if kind not in ("fixed_losses", "linear_skill"):
                raise ConfigError(f"train.dataset.kind: unknown kind '{kind}'")
            dataset = DatasetConfig(
                kind=kind,
                losses=[float(v) for v in _expect(d, "losses", list, "train.dataset.",
                                                  default=[1.0, 0.2, 0.8])],
                count=_expect(d, "count", int, "train.dataset.", default=16),
                seed=_expect(d, "seed", int, "train.dataset.", default=5),
            )
        steps = _expect(t, "steps", int, "train.", default=500)
        if steps < 1:
            raise ConfigError(f"train.steps: must be >= 1, got {steps}")
        cfg.train = TrainSection(
            optimizer=_expect(t, "optimizer", str, "train.", default="sgd"),
            learning_rate=float(_expect(t, "learning_rate", (int, float), "train.", default=0.5)),
            steps=steps,
            batch_size=_expect(t, "batch_size", int, "train.", default=0),
            seed=_expect(t, "seed", int, "train.", default=7),
            unroll_layers=_expect(t, "unroll_layers", int, "train.", default=1),
            dataset=dataset,
            weights_out=_expect(t, "weights_out", str, "train.", default="weights.json"),
            curve_out=_expect(t, "curve_out", str, "train.", default="curve.csv"),
        )
    if "bench" in doc:
        b = _expect(doc, "bench", dict, "", required=True)
        _reject_unknown(b, _BENCH_KEYS, "bench.")
        cfg.bench = BenchSection(
            suite=_expect(b, "suite", str, "bench.", default="linear_skill"),
            tasks=_expect(b, "tasks", int, "bench.", default=200),
            seeds=_expect(b, "seeds", list, "bench.", default=[1, 2, 3]),
            n_agents=_expect(b, "n_agents", int, "bench.", default=6),
            k=_expect(b, "k", int, "bench.", default=3),
            layers=_expect(b, "layers", int, "bench.", default=3),
            out_dir=_expect(b, "out_dir", str, "bench.", default="."),
            timing_n_values=_expect(b, "timing_n_values", list, "bench.", default=[1, 2, 3, 6]),
            timing_latency_ms=float(_expect(b, "timing_latency_ms", (int, float), "bench.", default=5.0)),
            timing_layers=_expect(b, "timing_layers", int, "bench.", default=4),
        )
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: malformed JSON ({exc})")
    return parse_config(doc)
