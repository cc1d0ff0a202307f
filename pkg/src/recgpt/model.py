"""GPT-style decoder for next-item prediction.

Architecture, exactly as trained here: token-level input is the sum of a
broadcast user embedding, item embeddings, learned positions, and segment
embeddings (real vs generated-prompt). Each block is masked multi-head
self-attention (scores scaled by sqrt(d), the full model dimension) followed
by a two-layer ReLU FFN. No residuals, no layer norm, no dropout.

Gradients are hand-written: forward() returns caches that backward() consumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    NumericsError,
    Parameter,
    causal_mask,
    embedding_backward,
    masked_softmax,
    matmul_backward,
    relu,
    relu_backward,
    require_finite,
    softmax_backward,
)

REAL = 0
PROMPT = 1

SCORER_TIED_EMB = "tied"
SCORER_OUTPUT_LAYER = "output"


@dataclass
class HyperParams:
    d: int = 64
    n_heads: int = 2
    n_layers: int = 1
    d_ff: int = 0          # 0 means 4*d
    max_len: int = 50
    prompt_window: int = 1
    lr: float = 0.001
    batch_size: int = 256
    neg_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.prompt_window < 0:
            raise ValueError("prompt_window must be >= 0")


class ModelParams:
    """All learnable tensors, keyed by name, in a fixed iteration order."""

    def __init__(self, n_users: int, n_items: int, hyper: HyperParams,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 init_std: float = 0.02):
        self.n_users = n_users
        self.n_items = n_items
        self.hyper = hyper
        self.dtype = dtype
        if rng is None:
            rng = np.random.default_rng(hyper.seed)

        def normal(shape):
            return (rng.standard_normal(shape) * init_std).astype(dtype)

        def glorot(shape):
            # blocks carry no residual path, so embedding-scale init would
            # collapse activations; Glorot keeps them at input scale
            scale = np.sqrt(2.0 / (shape[0] + shape[1]))
            return (rng.standard_normal(shape) * scale).astype(dtype)

        d, dff = hyper.d, hyper.d_ff
        self._params: dict[str, Parameter] = {}

        def add(name, value):
            self._params[name] = Parameter(name, value)

        add("W_u", normal((n_users, d)))
        add("W_e", normal((n_items, d)))
        add("W_p", normal((hyper.max_len, d)))
        add("W_s", np.zeros((2, d), dtype=dtype))
        for l in range(hyper.n_layers):
            add(f"layer{l}.W_q", glorot((d, d)))
            add(f"layer{l}.W_k", glorot((d, d)))
            add(f"layer{l}.W_v", glorot((d, d)))
            add(f"layer{l}.W_s", glorot((d, d)))
            add(f"layer{l}.W_1", glorot((d, dff)))
            add(f"layer{l}.b_1", np.zeros(dff, dtype=dtype))
            add(f"layer{l}.W_2", glorot((dff, d)))
            add(f"layer{l}.b_2", np.zeros(d, dtype=dtype))
        add("W_l", self._params["W_e"].value.copy())

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def scale_grads(self, factor: float) -> None:
        for p in self._params.values():
            p.grad *= factor

    def copy(self) -> "ModelParams":
        other = ModelParams.__new__(ModelParams)
        other.n_users = self.n_users
        other.n_items = self.n_items
        other.hyper = self.hyper
        other.dtype = self.dtype
        other._params = {
            name: Parameter(name, p.value.copy(), p.grad.copy())
            for name, p in self._params.items()
        }
        return other

    def astype(self, dtype) -> "ModelParams":
        other = self.copy()
        other.dtype = dtype
        for p in other._params.values():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        return other

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self._params.items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint missing tensor {name}")
            if tensors[name].shape != p.value.shape:
                raise ValueError(
                    f"tensor {name}: shape {tensors[name].shape} != {p.value.shape}"
                )
            p.value = tensors[name].astype(self.dtype)
            p.grad = np.zeros_like(p.value)


@dataclass
class BlockCache:
    h_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: list          # per-head attention weights, each (L, L)
    att_concat: np.ndarray
    s: np.ndarray        # after the W^S projection
    a1: np.ndarray       # FFN pre-activation
    r1: np.ndarray       # ReLU output


@dataclass
class ForwardCache:
    user: int
    items: np.ndarray
    segments: np.ndarray
    h0: np.ndarray
    blocks: list


def embed_input(params: ModelParams, user: int, items, segments) -> np.ndarray:
    """h0[t] = W_u[user] + W_e[items[t]] + W_p[t] + W_s[segments[t]]."""
    items = np.asarray(items)
    segments = np.asarray(segments)
    L = items.shape[0]
    if L > params.hyper.max_len:
        raise NumericsError(f"sequence length {L} exceeds max_len {params.hyper.max_len}")
    if segments.shape[0] != L:
        raise NumericsError("segments misaligned with items")
    h0 = (
        params["W_u"].value[user][None, :]
        + params["W_e"].value[items]
        + params["W_p"].value[:L]
        + params["W_s"].value[segments]
    )
    return h0


def decoder_block(params: ModelParams, layer: int, h: np.ndarray) -> tuple[np.ndarray, BlockCache]:
    hp = params.hyper
    d = hp.d
    head_dim = d // hp.n_heads
    L = h.shape[0]
    mask = causal_mask(L, dtype=h.dtype)

    q = h @ params[f"layer{layer}.W_q"].value
    k = h @ params[f"layer{layer}.W_k"].value
    v = h @ params[f"layer{layer}.W_v"].value

    att_concat = np.empty_like(h)
    probs = []
    scale = 1.0 / np.sqrt(np.asarray(d, dtype=h.dtype))
    for hd in range(hp.n_heads):
        sl = slice(hd * head_dim, (hd + 1) * head_dim)
        scores = (q[:, sl] @ k[:, sl].T) * scale
        p = masked_softmax(scores, mask)
        probs.append(p)
        att_concat[:, sl] = p @ v[:, sl]

    s = att_concat @ params[f"layer{layer}.W_s"].value
    a1 = s @ params[f"layer{layer}.W_1"].value + params[f"layer{layer}.b_1"].value
    r1 = relu(a1)
    out = r1 @ params[f"layer{layer}.W_2"].value + params[f"layer{layer}.b_2"].value
    require_finite(out, f"decoder block {layer} output")
    return out, BlockCache(h, q, k, v, probs, att_concat, s, a1, r1)


def decoder_block_backward(params: ModelParams, layer: int, cache: BlockCache,
                           d_out: np.ndarray) -> np.ndarray:
    hp = params.hyper
    d = hp.d
    head_dim = d // hp.n_heads
    scale = 1.0 / np.sqrt(np.asarray(d, dtype=d_out.dtype))

    w2 = params[f"layer{layer}.W_2"]
    w1 = params[f"layer{layer}.W_1"]
    b1 = params[f"layer{layer}.b_1"]
    b2 = params[f"layer{layer}.b_2"]
    ws = params[f"layer{layer}.W_s"]
    wq = params[f"layer{layer}.W_q"]
    wk = params[f"layer{layer}.W_k"]
    wv = params[f"layer{layer}.W_v"]

    d_r1, d_w2 = matmul_backward(d_out, cache.r1, w2.value)
    w2.grad += d_w2
    b2.grad += d_out.sum(axis=0)
    d_a1 = relu_backward(d_r1, cache.a1)
    d_s, d_w1 = matmul_backward(d_a1, cache.s, w1.value)
    w1.grad += d_w1
    b1.grad += d_a1.sum(axis=0)
    d_att, d_ws = matmul_backward(d_s, cache.att_concat, ws.value)
    ws.grad += d_ws

    d_q = np.zeros_like(cache.q)
    d_k = np.zeros_like(cache.k)
    d_v = np.zeros_like(cache.v)
    for hd in range(hp.n_heads):
        sl = slice(hd * head_dim, (hd + 1) * head_dim)
        p = cache.probs[hd]
        d_a_h = d_att[:, sl]
        d_p = d_a_h @ cache.v[:, sl].T
        d_v[:, sl] = p.T @ d_a_h
        d_scores = softmax_backward(d_p, p) * scale
        d_q[:, sl] = d_scores @ cache.k[:, sl]
        d_k[:, sl] = d_scores.T @ cache.q[:, sl]

    d_h, d_wq = matmul_backward(d_q, cache.h_in, wq.value)
    wq.grad += d_wq
    dh_k, d_wk = matmul_backward(d_k, cache.h_in, wk.value)
    wk.grad += d_wk
    dh_v, d_wv = matmul_backward(d_v, cache.h_in, wv.value)
    wv.grad += d_wv
    return d_h + dh_k + dh_v


def forward(params: ModelParams, user: int, items, segments) -> tuple[np.ndarray, ForwardCache]:
    """Embed then run all decoder blocks; returns hidden states (L, d) + caches."""
    items = np.asarray(items)
    segments = np.asarray(segments)
    h = embed_input(params, user, items, segments)
    h0 = h
    blocks = []
    for l in range(params.hyper.n_layers):
        h, cache = decoder_block(params, l, h)
        blocks.append(cache)
    return h, ForwardCache(user, items, segments, h0, blocks)


def backward(params: ModelParams, cache: ForwardCache, d_h: np.ndarray) -> None:
    """Accumulate gradients for the whole forward pass into params."""
    for l in range(params.hyper.n_layers - 1, -1, -1):
        d_h = decoder_block_backward(params, l, cache.blocks[l], d_h)
    L = cache.items.shape[0]
    params["W_u"].grad[cache.user] += d_h.sum(axis=0)
    embedding_backward(d_h, cache.items, params["W_e"].grad)
    params["W_p"].grad[:L] += d_h
    embedding_backward(d_h, cache.segments, params["W_s"].grad)


def score_items(params: ModelParams, h: np.ndarray, scorer: str) -> np.ndarray:
    """Logits over the whole catalog from a single hidden state."""
    if scorer == SCORER_TIED_EMB:
        return params["W_e"].value @ h
    if scorer == SCORER_OUTPUT_LAYER:
        return params["W_l"].value @ h
    raise ValueError(f"unknown scorer {scorer!r}")


def rank_items(logits: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Top-k item indices by descending logit; ties broken by ascending index."""
    order = np.lexsort((np.arange(logits.shape[0]), -logits))
    if exclude:
        excluded = set(int(i) for i in exclude)
        order = np.asarray([i for i in order if int(i) not in excluded])
    return order[:k]
