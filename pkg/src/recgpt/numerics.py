"""Hand-rolled differentiable kernels, Adam, and a finite-difference gradient checker.

Tensors are plain row-major numpy ndarrays. Training runs in float32;
gradient checking promotes everything to float64. Every op is a pure
function of its inputs, and every differentiable op ships with an explicit
backward companion so the whole kernel set stays auditable op-by-op.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NumericsError(RuntimeError):
    """Shape violation or non-finite value inside a kernel."""


def require_finite(x, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")


@dataclass
class Parameter:
    """A named learnable tensor with an accumulated gradient of the same shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise NumericsError(
                f"parameter {self.name}: grad shape {self.grad.shape} "
                f"!= value shape {self.value.shape}"
            )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# ---------------------------------------------------------------------------
# forward / backward op pairs
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(d_out, a, b):
    """d(a@b) -> (da, db) given upstream d_out."""
    return d_out @ b.T, a.T @ d_out


def causal_mask(length: int, dtype=np.float32) -> np.ndarray:
    """0 on and below the diagonal, -inf strictly above (future positions)."""
    mask = np.zeros((length, length), dtype=dtype)
    mask[np.triu_indices(length, k=1)] = -np.inf
    return mask


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax of logits + mask; entries masked with -inf come out exactly 0."""
    if logits.shape != mask.shape:
        raise NumericsError(f"softmax mask shape {mask.shape} != logits {logits.shape}")
    require_finite(logits, "softmax logits")
    x = logits + mask
    row_max = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise NumericsError("softmax row with every entry masked")
    e = np.exp(x - row_max)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(d_probs, probs):
    return probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(d_out, x):
    # subgradient at exactly 0 is taken as 0
    return d_out * (x > 0)


def embedding_lookup(table: np.ndarray, ids) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(d_out, ids, grad_table) -> None:
    """Scatter-add upstream rows into grad_table; duplicate ids accumulate."""
    np.add.at(grad_table, np.asarray(ids), d_out)


def sigmoid(x):
    # exp(-softplus(-x)): stable for large |x|
    return np.exp(-np.logaddexp(0.0, -x))


def bce_pair_loss(pos_score: float, neg_scores) -> tuple[float, float, np.ndarray]:
    """-log sigmoid(pos) - sum log(1 - sigmoid(neg)), in log-space-stable form.

    Returns (loss, d_loss/d_pos, d_loss/d_neg).
    """
    pos_score = float(pos_score)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    require_finite(neg_scores, "bce negative scores")
    if not np.isfinite(pos_score):
        raise NumericsError("non-finite positive score in bce_pair_loss")
    loss = np.logaddexp(0.0, -pos_score) + np.sum(np.logaddexp(0.0, neg_scores))
    d_pos = -sigmoid(-pos_score)
    d_neg = sigmoid(neg_scores)
    return float(loss), float(d_pos), d_neg


def cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """-log softmax(logits)[target]; returns (loss, grad = softmax - one_hot)."""
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"cross_entropy target {target} out of range [0, {logits.shape[0]})")
    require_finite(logits, "cross_entropy logits")
    z = logits - logits.max()
    lse = np.log(np.exp(z).sum())
    loss = float(lse - z[target])
    grad = np.exp(z - lse)
    grad[target] -= 1.0
    return loss, grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, lr: float = 0.001, **kw) -> "AdamState":
        return cls(m=np.zeros_like(param.value), v=np.zeros_like(param.value), lr=lr, **kw)


def adam_step(param: Parameter, state: AdamState) -> None:
    """One Adam update with bias correction, in place."""
    state.step_count += 1
    g = param.grad
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.v / (1.0 - state.beta2 ** state.step_count)
    param.value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
        param.value.dtype, copy=False
    )


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, inputs, h: float = 1e-5) -> float:
    """Max relative error between fn's analytic gradients and central differences.

    fn(inputs) must return (scalar value, [gradient array per input]) and be
    evaluable in float64. Error per element: |a - n| / max(1e-8, |a| + |n|).
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    value, analytic = fn(inputs)
    if not np.isfinite(value):
        raise NumericsError("grad_check: non-finite function value")
    max_err = 0.0
    for k, x in enumerate(inputs):
        flat = x.reshape(-1)
        a_flat = np.asarray(analytic[k], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = fn(inputs)
            flat[i] = orig - h
            down, _ = fn(inputs)
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - num) / max(1e-8, abs(a_flat[i]) + abs(num))
            max_err = max(max_err, err)
    return max_err
