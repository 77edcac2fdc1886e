"""Dense float64 kernel: activations, an LSTM cell with exact backward, and a
central-difference gradient oracle.

Everything here is a pure function over immutable inputs; no shared state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

Array = np.ndarray

GATE_NAMES = ("i", "f", "o", "c")  # input, forget, output, candidate


def as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def matvec(m: Array, v: Array) -> Array:
    m, v = as_f64(m), as_f64(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {m.shape} and {v.shape}")
    return m @ v


def softmax(v: Array) -> Array:
    """Probability vector exp(v)/sum(exp(v)), computed with max-subtraction.

    The internal shift makes softmax(v - max(v)) bit-identical to softmax(v).
    """
    v = as_f64(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"softmax: need a non-empty 1-d vector, got shape {v.shape}")
    e = np.exp(v - np.max(v))
    return e / e.sum()


def sigmoid(v: Array) -> Array:
    v = as_f64(v)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


@dataclass(frozen=True)
class LstmParams:
    """Weights of one LSTM cell: per gate an input matrix (d_h x d_z), a
    recurrent matrix (d_h x d_h) and a bias (d_h)."""

    w_i: Array
    u_i: Array
    b_i: Array
    w_f: Array
    u_f: Array
    b_f: Array
    w_o: Array
    u_o: Array
    b_o: Array
    w_c: Array
    u_c: Array
    b_c: Array

    @property
    def input_dim(self) -> int:
        return self.w_i.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_i.shape[0]

    def validate(self) -> None:
        d_h, d_z = self.w_i.shape
        for name in GATE_NAMES:
            w, u, b = getattr(self, f"w_{name}"), getattr(self, f"u_{name}"), getattr(self, f"b_{name}")
            if w.shape != (d_h, d_z):
                raise ShapeError(f"lstm.w_{name}: expected {(d_h, d_z)}, got {w.shape}")
            if u.shape != (d_h, d_h):
                raise ShapeError(f"lstm.u_{name}: expected {(d_h, d_h)}, got {u.shape}")
            if b.shape != (d_h,):
                raise ShapeError(f"lstm.b_{name}: expected {(d_h,)}, got {b.shape}")

    def blocks(self):
        """(w, u, b) triples in gate order i, f, o, c."""
        return [
            (getattr(self, f"w_{g}"), getattr(self, f"u_{g}"), getattr(self, f"b_{g}"))
            for g in GATE_NAMES
        ]


@dataclass(frozen=True)
class LstmState:
    h: Array
    c: Array

    def validate(self, d_h: int) -> None:
        if self.h.shape != (d_h,) or self.c.shape != (d_h,):
            raise ShapeError(
                f"lstm state: expected h and c of shape {(d_h,)}, got {self.h.shape}, {self.c.shape}"
            )


def zeros_lstm_state(d_h: int) -> LstmState:
    return LstmState(h=np.zeros(d_h), c=np.zeros(d_h))


def init_lstm_params(d_z: int, d_h: int, rng: np.random.Generator) -> LstmParams:
    """Uniform(-s, s) weights with s = 1/sqrt(fan_in); biases zero except the
    forget-gate bias, which starts at 1.0 so memory is initially kept."""
    s_in = 1.0 / np.sqrt(d_z)
    s_rec = 1.0 / np.sqrt(d_h)

    def w():
        return rng.uniform(-s_in, s_in, (d_h, d_z))

    def u():
        return rng.uniform(-s_rec, s_rec, (d_h, d_h))

    return LstmParams(
        w_i=w(), u_i=u(), b_i=np.zeros(d_h),
        w_f=w(), u_f=u(), b_f=np.ones(d_h),
        w_o=w(), u_o=u(), b_o=np.zeros(d_h),
        w_c=w(), u_c=u(), b_c=np.zeros(d_h),
    )


def zeros_lstm_params(d_z: int, d_h: int) -> LstmParams:
    return LstmParams(
        w_i=np.zeros((d_h, d_z)), u_i=np.zeros((d_h, d_h)), b_i=np.zeros(d_h),
        w_f=np.zeros((d_h, d_z)), u_f=np.zeros((d_h, d_h)), b_f=np.zeros(d_h),
        w_o=np.zeros((d_h, d_z)), u_o=np.zeros((d_h, d_h)), b_o=np.zeros(d_h),
        w_c=np.zeros((d_h, d_z)), u_c=np.zeros((d_h, d_h)), b_c=np.zeros(d_h),
    )


@dataclass(frozen=True)
class CellCache:
    """Forward-pass intermediates consumed by lstm_backward."""

    z: Array
    h_prev: Array
    c_prev: Array
    i: Array
    f: Array
    o: Array
    g: Array       # tanh candidate
    c_new: Array
    tanh_c: Array


def lstm_forward(p: LstmParams, z: Array, state: LstmState) -> tuple[LstmState, CellCache]:
    """One cell update: c' = f*c + i*g, h' = o*tanh(c')."""
    z = as_f64(z)
    if z.shape != (p.input_dim,):
        raise ShapeError(f"lstm_forward: z has shape {z.shape}, expected {(p.input_dim,)}")
    state.validate(p.hidden_dim)
    h_prev, c_prev = state.h, state.c

    i = sigmoid(p.w_i @ z + p.u_i @ h_prev + p.b_i)
    f = sigmoid(p.w_f @ z + p.u_f @ h_prev + p.b_f)
    o = sigmoid(p.w_o @ z + p.u_o @ h_prev + p.b_o)
    g = np.tanh(p.w_c @ z + p.u_c @ h_prev + p.b_c)
    c_new = f * c_prev + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c

    cache = CellCache(z=z, h_prev=h_prev, c_prev=c_prev, i=i, f=f, o=o, g=g,
                      c_new=c_new, tanh_c=tanh_c)
    return LstmState(h=h_new, c=c_new), cache


def lstm_backward(
    p: LstmParams, cache: CellCache, grad_h_out: Array, grad_c_out: Array
) -> tuple[LstmParams, Array, LstmState]:
    """Exact gradients of one cell update.

    Returns (gradients with LstmParams layout, grad wrt z, grad wrt incoming state).
    """
    d_h, d_z = p.hidden_dim, p.input_dim
    if cache.z.shape != (d_z,) or cache.h_prev.shape != (d_h,):
        raise ShapeError("lstm_backward: cache does not match parameter shapes")
    grad_h_out = as_f64(grad_h_out)
    grad_c_out = as_f64(grad_c_out)
    if grad_h_out.shape != (d_h,) or grad_c_out.shape != (d_h,):
        raise ShapeError("lstm_backward: upstream gradients have wrong shape")

    i, f, o, g = cache.i, cache.f, cache.o, cache.g
    d_o = grad_h_out * cache.tanh_c
    dc = grad_c_out + grad_h_out * o * (1.0 - cache.tanh_c ** 2)
    d_i = dc * g
    d_f = dc * cache.c_prev
    d_g = dc * i

    pre_i = d_i * i * (1.0 - i)
    pre_f = d_f * f * (1.0 - f)
    pre_o = d_o * o * (1.0 - o)
    pre_c = d_g * (1.0 - g ** 2)

    grads = LstmParams(
        w_i=np.outer(pre_i, cache.z), u_i=np.outer(pre_i, cache.h_prev), b_i=pre_i,
        w_f=np.outer(pre_f, cache.z), u_f=np.outer(pre_f, cache.h_prev), b_f=pre_f,
        w_o=np.outer(pre_o, cache.z), u_o=np.outer(pre_o, cache.h_prev), b_o=pre_o,
        w_c=np.outer(pre_c, cache.z), u_c=np.outer(pre_c, cache.h_prev), b_c=pre_c,
    )
    grad_z = p.w_i.T @ pre_i + p.w_f.T @ pre_f + p.w_o.T @ pre_o + p.w_c.T @ pre_c
    grad_h_prev = p.u_i.T @ pre_i + p.u_f.T @ pre_f + p.u_o.T @ pre_o + p.u_c.T @ pre_c
    grad_c_prev = dc * f
    return grads, grad_z, LstmState(h=grad_h_prev, c=grad_c_prev)


def finite_diff_grad(f, theta: Array, eps: float = 1e-5) -> Array:
    """Central differences (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps) per coordinate."""
    if not (0.0 < eps <= 1e-3):
        raise ParameterError(f"finite_diff_grad: eps must be in (0, 1e-3], got {eps}")
    theta = as_f64(theta)
    grad = np.zeros_like(theta)
    for idx in range(theta.size):
        bumped = theta.copy()
        bumped[idx] = theta[idx] + eps
        up = float(f(bumped))
        bumped[idx] = theta[idx] - eps
        down = float(f(bumped))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"finite_diff_grad: non-finite evaluation at coordinate {idx}")
        grad[idx] = (up - down) / (2.0 * eps)
    return grad
