"""Fitting the router on batches of routing samples with SGD or Adam.

Gradients flow only into router parameters; agents stay frozen. Per-batch
reduction runs in a fixed sample order so seeded runs are bit-reproducible.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParameterError, TrainingDivergedError
from .losses import LossConfig, TrainSample, entropy, load_balance, router_loss_grad, unrolled_loss
from .numkit import Array
from .router import RouterParams, params_to_vec, vec_to_params

OPTIMIZERS = ("sgd", "adam")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CURVE_COLUMNS = ("step", "mean_loss", "mean_entropy", "mean_load_balance", "learning_rate")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    steps: int = 100
    batch_size: int = 0  # 0 means full batch
    optimizer: str = "sgd"
    seed: int = 0
    unroll_layers: int = 1

    def validate(self) -> None:
        if not (self.learning_rate > 0.0 and np.isfinite(self.learning_rate)):
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 0:
            raise ParameterError(f"batch_size must be >= 0, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZERS}")
        if self.unroll_layers < 1:
            raise ParameterError(f"unroll_layers must be >= 1, got {self.unroll_layers}")


@dataclass
class TrainResult:
    params: RouterParams
    curve: list[dict] = field(default_factory=list)

    def write_curve_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_COLUMNS)
            for row in self.curve:
                writer.writerow([row[c] for c in CURVE_COLUMNS])


def make_fixed_loss_dataset(
    losses: Array | list[float],
    count: int = 16,
    agent_dim: int = 4,
    seed: int = 0,
) -> list[TrainSample]:
    """Samples sharing one per-agent loss vector, with seeded random inputs
    and agent output stacks. The optimal gate concentrates on argmin(losses)."""
    losses = np.asarray(losses, dtype=np.float64)
    n = losses.shape[0]
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        x = rng.uniform(-1.0, 1.0, agent_dim)
        vecs = rng.normal(0.0, 1.0, (n, agent_dim))
        samples.append(TrainSample(x=x, agent_losses=losses.copy(), agent_vecs=vecs))
    return samples


def make_region_dataset(pool, count: int = 128, seed: int = 0) -> list[TrainSample]:
    """Routing samples drawn from a pool of deterministic agents: inputs are
    uniform in [-1, 1]^dim, the first coordinate buckets each input into one
    of n regions, the region agent's own output is the target, and per-agent
    losses are squared distances to it. The region agent has loss zero."""
    n, dim = pool.n, pool.dim
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    samples = []
    for _ in range(count):
        x = rng.uniform(-1.0, 1.0, dim)
        region = min(int((x[0] + 1.0) / 2.0 * n), n - 1)
        vecs = np.stack([pool.invoke(i, x, 1).vec for i in range(n)])
        target = vecs[region]
        losses = np.array([float(np.sum((v - target) ** 2)) for v in vecs])
        samples.append(TrainSample(x=x, agent_losses=losses, agent_vecs=vecs))
    return samples


def _resolve_vecs(dataset: list[TrainSample], pool) -> list[TrainSample]:
    resolved = []
    for idx, sample in enumerate(dataset):
        if sample.agent_vecs is not None:
            resolved.append(sample)
            continue
        if pool is None:
            raise ConfigError(
                f"sample {idx} has no agent vectors and no agent pool was given"
            )
        vecs = np.stack([pool.invoke(i, sample.x, 1).vec for i in range(pool.n)])
        resolved.append(TrainSample(x=sample.x, agent_losses=sample.agent_losses, agent_vecs=vecs))
    return resolved


def train_router(
    params0: RouterParams,
    dataset: list[TrainSample],
    tcfg: TrainConfig,
    lcfg: LossConfig,
    pool=None,
) -> TrainResult:
    """Minimize the mean routing objective over the dataset.

    The curve records, per step, the pre-update batch means of the total loss,
    the gate entropy, and the load-balance term (averaged over batch and
    unrolled layers).
    """
    tcfg.validate()
    lcfg.validate()
    if not dataset:
        raise ConfigError("train_router: empty dataset")
    dataset = _resolve_vecs(dataset, pool)
    for idx, sample in enumerate(dataset):
        if sample.agent_vecs.shape != (params0.n_agents, params0.agent_dim):
            raise ConfigError(
                f"sample {idx}: agent vectors have shape {sample.agent_vecs.shape}, "
                f"expected {(params0.n_agents, params0.agent_dim)}"
            )

    rng = np.random.default_rng(tcfg.seed)
    theta = params_to_vec(params0)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    full_batch = tcfg.batch_size == 0 or tcfg.batch_size >= len(dataset)
    curve: list[dict] = []

    for step in range(tcfg.steps):
        if full_batch:
            batch_idx = range(len(dataset))
        else:
            batch_idx = sorted(rng.choice(len(dataset), size=tcfg.batch_size, replace=False))
        params = vec_to_params(theta, params0)

        grad_sum = np.zeros_like(theta)
        loss_sum = 0.0
        ent_sum = 0.0
        lb_sum = 0.0
        count = 0
        for i in batch_idx:
            sample = dataset[i]
            total, grads, gates = router_loss_grad(
                params, sample, None, lcfg, layers=tcfg.unroll_layers
            )
            grad_sum += params_to_vec(grads)
            loss_sum += total
            ent_sum += sum(entropy(p) for p in gates) / len(gates)
            lb_sum += sum(load_balance(p) for p in gates) / len(gates)
            count += 1

        mean_loss = loss_sum / count
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(step)
        curve.append({
            "step": step,
            "mean_loss": mean_loss,
            "mean_entropy": ent_sum / count,
            "mean_load_balance": lb_sum / count,
            "learning_rate": tcfg.learning_rate,
        })

        grad = grad_sum / count
        if tcfg.optimizer == "sgd":
            theta = theta - tcfg.learning_rate * grad
        else:
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
            m_hat = m / (1.0 - ADAM_BETA1 ** (step + 1))
            v_hat = v / (1.0 - ADAM_BETA2 ** (step + 1))
            theta = theta - tcfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if not np.all(np.isfinite(theta)):
            raise TrainingDivergedError(step)

    return TrainResult(params=vec_to_params(theta, params0), curve=curve)


def final_gates(params: RouterParams, dataset: list[TrainSample], layers: int = 1) -> list[Array]:
    """Gate of the last unrolled layer for every sample, under `params`."""
    out = []
    for sample in dataset:
        _, gates = unrolled_loss(
            params, sample.agent_vecs, sample.agent_losses, LossConfig(), layers=layers
        )
        out.append(gates[-1])
    return out
