"""Router training objective and its exact gradients.

The objective per gate distribution p over n agents with per-agent task
losses L_i is

    total = sum_i p_i L_i  +  sign * lam * H(p)  +  gamma * sum_i (p_i - 1/n)^2

where H is the natural-log entropy. In "bonus" mode sign = -1, so minimizing
the total rewards entropy (exploration); "penalty" mode keeps sign = +1 and
drives the gate toward one-hot. Gradients flow through the gate, the LSTM
recurrence and the fusion projection; agent outputs are frozen inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .numkit import Array, LstmState, as_f64, lstm_backward, lstm_forward, zeros_lstm_state
from .router import RouterParams, gate, fuse_stack, validate_gate

ENTROPY_MODES = ("bonus", "penalty")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.0
    gamma: float = 0.0
    entropy_mode: str = "bonus"

    def validate(self) -> None:
        if not (np.isfinite(self.lam) and self.lam >= 0.0):
            raise ParameterError(f"lam must be finite and >= 0, got {self.lam}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ParameterError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.entropy_mode not in ENTROPY_MODES:
            raise ParameterError(f"entropy_mode must be one of {ENTROPY_MODES}")

    @property
    def entropy_sign(self) -> float:
        return -1.0 if self.entropy_mode == "bonus" else 1.0


@dataclass(frozen=True)
class TrainSample:
    """One routing example: an input, per-agent task losses, and (optionally)
    precomputed agent output vectors used for fusion."""

    x: Array
    agent_losses: Array
    agent_vecs: Array | None = None  # (n_agents, agent_dim)


def entropy(p: Array) -> float:
    """H(p) = -sum p_i ln p_i in nats, with 0 ln 0 = 0."""
    p = validate_gate(p)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum())


def load_balance(p: Array) -> float:
    """Squared deviation of the gate from uniform: sum (p_i - 1/n)^2."""
    p = validate_gate(p)
    n = p.shape[0]
    return float(np.sum((p - 1.0 / n) ** 2))


def router_loss(p: Array, losses: Array, cfg: LossConfig) -> float:
    p = validate_gate(p)
    losses = as_f64(losses)
    if losses.shape != p.shape:
        raise ShapeError(f"router_loss: {losses.shape[0]} losses for gate of length {p.shape[0]}")
    cfg.validate()
    total = float(p @ losses)
    if cfg.lam != 0.0:
        total += cfg.entropy_sign * cfg.lam * entropy(p)
    if cfg.gamma != 0.0:
        total += cfg.gamma * load_balance(p)
    return total


def _dloss_dp(p: Array, losses: Array, cfg: LossConfig) -> Array:
    """Gradient of the objective in the probability simplex coordinates."""
    grad = losses.copy()
    if cfg.lam != 0.0:
        # dH/dp_i = -(ln p_i + 1)
        grad = grad + cfg.entropy_sign * cfg.lam * (-(np.log(p) + 1.0))
    if cfg.gamma != 0.0:
        grad = grad + 2.0 * cfg.gamma * (p - 1.0 / p.shape[0])
    return grad


def _softmax_backward(p: Array, dp: Array) -> Array:
    """Pull a simplex gradient back through softmax to logit space."""
    return p * (dp - float(dp @ p))


def unrolled_loss(
    params: RouterParams,
    agent_vecs: Array,
    agent_losses: Array,
    cfg: LossConfig,
    layers: int = 1,
    state0: LstmState | None = None,
) -> tuple[float, list[Array]]:
    """Total objective summed over `layers` recurrence steps with the same
    frozen agent stack fed at every step. Returns (total, per-layer gates)."""
    if layers < 1:
        raise ParameterError(f"layers must be >= 1, got {layers}")
    agent_vecs = as_f64(agent_vecs)
    state = state0 if state0 is not None else zeros_lstm_state(params.d_h)
    total = 0.0
    gates: list[Array] = []
    z = fuse_stack(params, agent_vecs)
    for _ in range(layers):
        state, _ = lstm_forward(params.lstm, z, state)
        p = gate(params, state.h)
        gates.append(p)
        total += router_loss(p, agent_losses, cfg)
    return total, gates


def router_loss_grad(
    params: RouterParams,
    sample: TrainSample,
    state_in: LstmState | None,
    cfg: LossConfig,
    layers: int = 1,
) -> tuple[float, RouterParams, list[Array]]:
    """Exact gradient of the unrolled objective with respect to every router
    parameter. Returns (total loss, gradients with RouterParams layout, and
    the per-layer gates from the forward pass)."""
    cfg.validate()
    if sample.agent_vecs is None:
        raise ParameterError("router_loss_grad: sample has no precomputed agent vectors")
    vecs = as_f64(sample.agent_vecs)
    losses = as_f64(sample.agent_losses)
    if losses.shape != (params.n_agents,):
        raise ShapeError(
            f"agent_losses: expected length {params.n_agents}, got {losses.shape}"
        )
    if layers < 1:
        raise ParameterError(f"layers must be >= 1, got {layers}")

    state = state_in if state_in is not None else zeros_lstm_state(params.d_h)
    cat = vecs.ravel()
    z = fuse_stack(params, vecs)

    # Forward, keeping per-layer caches for backprop through time.
    caches = []
    gates_per_layer = []
    total = 0.0
    for _ in range(layers):
        state, cache = lstm_forward(params.lstm, z, state)
        p = gate(params, state.h)
        caches.append((cache, state.h))
        gates_per_layer.append(p)
        total += router_loss(p, losses, cfg)
    if not np.isfinite(total):
        raise NumericError(f"router_loss_grad: non-finite loss {total}")

    # Backward.
    g_wf = np.zeros_like(params.w_fusion)
    g_bf = np.zeros_like(params.b_fusion)
    g_wg = np.zeros_like(params.w_gate)
    g_bg = np.zeros_like(params.b_gate)
    lstm_acc = {name: np.zeros_like(arr) for name, arr in vars(params.lstm).items()}
    grad_h = np.zeros(params.d_h)
    grad_c = np.zeros(params.d_h)
    for layer in range(layers - 1, -1, -1):
        cache, h = caches[layer]
        p = gates_per_layer[layer]
        dp = _dloss_dp(p, losses, cfg)
        ds = _softmax_backward(p, dp)
        if not np.all(np.isfinite(ds)):
            raise NumericError("router_loss_grad: non-finite gradient at gate logits")
        g_wg += np.outer(ds, h)
        g_bg += ds
        dh = params.w_gate.T @ ds + grad_h
        cell_grads, dz, dstate = lstm_backward(params.lstm, cache, dh, grad_c)
        for name, arr in vars(cell_grads).items():
            lstm_acc[name] += arr
        g_wf += np.outer(dz, cat)
        g_bf += dz
        grad_h, grad_c = dstate.h, dstate.c

    grads = RouterParams(
        n_agents=params.n_agents,
        agent_dim=params.agent_dim,
        w_fusion=g_wf,
        b_fusion=g_bf,
        lstm=type(params.lstm)(**lstm_acc),
        w_gate=g_wg,
        b_gate=g_bg,
    )
    return total, grads, gates_per_layer
