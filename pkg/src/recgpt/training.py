"""Two-stage training: autoregressive pre-training, then prompt-tuning on
sequences interleaved with model-generated prompt items."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SplitDataset, iter_batches, truncate_last
from .model import (
    PROMPT,
    REAL,
    SCORER_OUTPUT_LAYER,
    SCORER_TIED_EMB,
    HyperParams,
    ModelParams,
    backward,
    forward,
    rank_items,
    score_items,
)
from .numerics import AdamState, adam_step, bce_pair_loss, cross_entropy


class TrainingError(RuntimeError):
    """Divergence or invalid training configuration."""


@dataclass
class PromptEnhancedSequence:
    """Real items interleaved with K generated prompt items before each real
    item after the first: v1, [K prompts], v2, ..., [K prompts], v_n."""

    items: list[int]
    segments: list[int]

    def __post_init__(self):
        if len(self.items) != len(self.segments):
            raise TrainingError("prompt sequence items/segments misaligned")

    @property
    def real_positions(self) -> list[int]:
        """0-based indices of REAL items (1-based law: {1, 2+K, 3+2K, ...})."""
        return [i for i, s in enumerate(self.segments) if s == REAL]


@dataclass
class TrainReport:
    stage: str
    epoch_losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    param_norms: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""
    best_epoch: int = -1
    extra: dict = field(default_factory=dict)


def _param_norms(params: ModelParams) -> dict:
    return {name: float(np.linalg.norm(p.value)) for name, p in
            zip(params.names(), params.parameters())}


def _valid_hr_at_10(dataset: SplitDataset, params: ModelParams, scorer: str,
                    inputs=None) -> float:
    """HR@10 predicting the validation target, used for early stopping."""
    hits = 0
    for u in range(dataset.n_users):
        if inputs is not None:
            items, segments = inputs[u]
        else:
            items = dataset.sequences[u]
            segments = [REAL] * len(items)
            items, segments = truncate_last(items, segments, dataset.max_len)
        h, _ = forward(params, u, items, segments)
        logits = score_items(params, h[-1], scorer)
        top = rank_items(logits, 10)
        if int(dataset.valid_target[u]) in set(int(i) for i in top):
            hits += 1
    return hits / max(1, dataset.n_users)


def pretrain(
    dataset: SplitDataset,
    hyper: HyperParams,
    epochs: int,
    seed: int | None = None,
    early_stop_patience: int = 0,
) -> tuple[ModelParams, TrainReport]:
    """Stage 1: pairwise BCE over every next-item position of the train prefix.

    Per user position t, the loss is -log sig(h_t . e_pos) - sum log(1 - sig(h_t . e_neg))
    with uniform negatives outside the user's full sequence; batches average
    per-user sums. Segment embeddings stay at zero and are not trained here.
    """
    if seed is None:
        seed = hyper.seed
    rng = np.random.default_rng(seed)
    params = ModelParams(dataset.catalog.n_users, dataset.catalog.n_items, hyper,
                         rng=np.random.default_rng(seed))
    trainable = [n for n in params.names() if n not in ("W_s", "W_l")]
    states = {n: AdamState.for_param(params[n], lr=hyper.lr) for n in trainable}
    report = TrainReport(stage="pretrain", seed=seed)
    t0 = time.time()
    best_hr, best_params, patience_left = -1.0, None, early_stop_patience

    for epoch in range(epochs):
        epoch_loss, n_rows = 0.0, 0
        for batch in iter_batches(dataset, hyper.batch_size, hyper.neg_count, rng):
            params.zero_grads()
            batch_loss = 0.0
            B = batch.user_ids.shape[0]
            for i in range(B):
                n = int(batch.lengths[i])
                if n < 2:
                    continue
                user = int(batch.user_ids[i])
                items = batch.items[i, :n]
                segments = batch.segments[i, :n]
                h, cache = forward(params, user, items, segments)
                d_h = np.zeros_like(h)
                w_e = params["W_e"]
                user_loss = 0.0
                for t in range(n - 1):
                    pos = int(batch.targets[i, t])
                    negs = batch.negatives[i, t]
                    pos_score = float(w_e.value[pos] @ h[t])
                    neg_scores = w_e.value[negs] @ h[t]
                    loss, d_pos, d_negs = bce_pair_loss(pos_score, neg_scores)
                    user_loss += loss
                    d_h[t] += d_pos * w_e.value[pos] + d_negs @ w_e.value[negs]
                    w_e.grad[pos] += d_pos * h[t]
                    np.add.at(w_e.grad, negs, np.outer(d_negs, h[t]))
                backward(params, cache, d_h)
                batch_loss += user_loss
            params.scale_grads(1.0 / B)
            for name in trainable:
                adam_step(params[name], states[name])
            epoch_loss += batch_loss
            n_rows += B
        mean_loss = epoch_loss / max(1, n_rows)
        if not np.isfinite(mean_loss):
            raise TrainingError(f"pretrain diverged at epoch {epoch}: loss={mean_loss}")
        report.epoch_losses.append(mean_loss)

        if early_stop_patience > 0:
            hr = _valid_hr_at_10(dataset, params, SCORER_TIED_EMB)
            if hr > best_hr:
                best_hr, best_params = hr, params.copy()
                report.best_epoch = epoch
                patience_left = early_stop_patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    break

    if early_stop_patience > 0 and best_params is not None:
        params = best_params
        report.extra["best_valid_hr10"] = best_hr
    report.wall_time = time.time() - t0
    report.param_norms = _param_norms(params)
    return params, report


def generate_prompts(params: ModelParams, user: int, seq, K: int) -> PromptEnhancedSequence:
    """Greedy left-to-right prompt generation from a (frozen) model.

    Before each real item after the first, K prompt items are generated one
    at a time: forward over the current prefix (segment-tagged, truncated to
    max_len), score with the output layer, append the argmax with a PROMPT
    tag. K=0 returns the original sequence unchanged.
    """
    if K < 0:
        raise TrainingError("K must be >= 0")
    seq = [int(v) for v in seq]
    if not seq:
        return PromptEnhancedSequence([], [])
    items = [seq[0]]
    segments = [REAL]
    max_len = params.hyper.max_len
    for t in range(1, len(seq)):
        for _ in range(K):
            in_items, in_segs = truncate_last(items, segments, max_len)
            h, _ = forward(params, user, in_items, in_segs)
            logits = score_items(params, h[-1], SCORER_OUTPUT_LAYER)
            nxt = int(rank_items(logits, 1)[0])
            items.append(nxt)
            segments.append(PROMPT)
        items.append(seq[t])
        segments.append(REAL)
    return PromptEnhancedSequence(items, segments)


def generate_prompt_cache(dataset: SplitDataset, params: ModelParams, K: int) -> list[PromptEnhancedSequence]:
    """One PromptEnhancedSequence per user, from the user's train prefix."""
    return [generate_prompts(params, u, dataset.sequences[u], K)
            for u in range(dataset.n_users)]


def regeneration_epochs(total_epochs: int, every: int | None) -> list[int]:
    """Epochs at which prompts are regenerated. Default policy: never (the
    single generation pass from the frozen pre-trained model is reused)."""
    if not every or every <= 0:
        return []
    return list(range(every, total_epochs, every))


def prompt_tune(
    dataset: SplitDataset,
    pretrained: ModelParams,
    prompts: list[PromptEnhancedSequence],
    hyper: HyperParams,
    epochs: int,
    seed: int | None = None,
    loss_positions: str = "last",
    trainable: str = "all",
    early_stop_patience: int = 0,
    regen_every: int | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Stage 2: cross-entropy on prompt-enhanced sequences.

    W_s restarts at zero and W_l as a copy of W_e, so at zero epochs with K=0
    the tuned model scores identically to the pre-trained one. The default
    target is the held-out next item at the final real position;
    loss_positions='all_real' additionally predicts each next real item.
    """
    if loss_positions not in ("last", "all_real"):
        raise TrainingError(f"unknown loss_positions {loss_positions!r}")
    if trainable not in ("all", "head"):
        raise TrainingError(f"unknown trainable set {trainable!r}")
    if seed is None:
        seed = hyper.seed
    rng = np.random.default_rng(seed + 1)
    params = pretrained.copy()
    params["W_s"].value[...] = 0.0
    params["W_l"].value = params["W_e"].value.copy()
    params["W_l"].grad = np.zeros_like(params["W_l"].value)

    trainable_names = params.names() if trainable == "all" else ["W_s", "W_l"]
    states = {n: AdamState.for_param(params[n], lr=hyper.lr) for n in trainable_names}
    report = TrainReport(stage="prompt_tune", seed=seed, extra={"K": hyper.prompt_window})
    t0 = time.time()

    def tune_inputs(pes_list):
        return [tuple(truncate_last(p.items, p.segments, dataset.max_len))
                for p in pes_list]

    inputs = tune_inputs(prompts)
    regen_at = set(regeneration_epochs(epochs, regen_every))
    best_hr, best_params, patience_left = -1.0, None, early_stop_patience

    for epoch in range(epochs):
        if epoch in regen_at:
            prompts = generate_prompt_cache(dataset, params, hyper.prompt_window)
            inputs = tune_inputs(prompts)
        order = rng.permutation(dataset.n_users)
        epoch_loss, n_rows = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            users = order[start:start + hyper.batch_size]
            params.zero_grads()
            batch_loss = 0.0
            for u in users:
                u = int(u)
                items, segments = inputs[u]
                if not items:
                    continue
                h, cache = forward(params, u, items, segments)
                d_h = np.zeros_like(h)
                w_l = params["W_l"]
                targets = [(len(items) - 1, int(dataset.valid_target[u]))]
                if loss_positions == "all_real":
                    reals = [i for i, s in enumerate(segments) if s == REAL]
                    targets = [(reals[j], items[reals[j + 1]]) for j in range(len(reals) - 1)]
                    targets.append((len(items) - 1, int(dataset.valid_target[u])))
                for pos, tgt in targets:
                    logits = w_l.value @ h[pos]
                    loss, d_logits = cross_entropy(logits, tgt)
                    batch_loss += loss
                    w_l.grad += np.outer(d_logits, h[pos])
                    d_h[pos] += w_l.value.T @ d_logits
                backward(params, cache, d_h)
            params.scale_grads(1.0 / max(1, len(users)))
            for name in trainable_names:
                adam_step(params[name], states[name])
            epoch_loss += batch_loss
            n_rows += len(users)
        mean_loss = epoch_loss / max(1, n_rows)
        if not np.isfinite(mean_loss):
            raise TrainingError(f"prompt_tune diverged at epoch {epoch}: loss={mean_loss}")
        report.epoch_losses.append(mean_loss)

        if early_stop_patience > 0:
            hr = _valid_hr_at_10(dataset, params, SCORER_OUTPUT_LAYER, inputs=inputs)
            if hr > best_hr:
                best_hr, best_params, patience_left = hr, params.copy(), early_stop_patience
                report.best_epoch = epoch
            else:
                patience_left -= 1
                if patience_left <= 0:
                    break

    if early_stop_patience > 0 and best_params is not None:
        params = best_params
        report.extra["best_valid_hr10"] = best_hr
    report.wall_time = time.time() - t0
    report.param_norms = _param_norms(params)
    return params, report
