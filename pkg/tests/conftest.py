"""Shared synthetic dataset builders and tiny-model helpers."""
import numpy as np
import pytest

from recgpt.data import Catalog, SplitDataset
from recgpt.model import HyperParams, ModelParams


def make_dataset(sequences, valid, test, n_items, max_len=50):
    """Wrap raw per-user index sequences into a SplitDataset."""
    catalog = Catalog(
        users=[f"u{i}" for i in range(len(sequences))],
        items=[f"i{j}" for j in range(n_items)],
    )
    return SplitDataset(
        [list(map(int, s)) for s in sequences],
        np.asarray(valid, dtype=np.int64),
        np.asarray(test, dtype=np.int64),
        catalog,
        max_len=max_len,
    )


def cyclic_dataset(n_users=200, length=15, n_items=20, seed=0, max_len=50):
    """Deterministic walk: each user starts at a random item and always moves
    to the next index mod n_items. The generator is the ground-truth oracle:
    the target after item v is always (v + 1) % n_items."""
    rng = np.random.default_rng(seed)
    seqs, valid, test = [], [], []
    for _ in range(n_users):
        start = int(rng.integers(0, n_items))
        full = [(start + t) % n_items for t in range(length)]
        seqs.append(full[:-2])
        valid.append(full[-2])
        test.append(full[-1])
    return make_dataset(seqs, valid, test, n_items, max_len=max_len)


def lookahead_dataset(n_users=200, length=15, n_items=40, seed=0, max_len=50):
    """Stochastic walk stepping +1 or +2 with equal probability, so the target
    distribution covers both the next and the next-next item of the cycle."""
    rng = np.random.default_rng(seed)
    seqs, valid, test = [], [], []
    for _ in range(n_users):
        cur = int(rng.integers(0, n_items))
        full = [cur]
        for _ in range(length - 1):
            cur = (cur + (2 if rng.random() < 0.5 else 1)) % n_items
            full.append(cur)
        seqs.append(full[:-2])
        valid.append(full[-2])
        test.append(full[-1])
    return make_dataset(seqs, valid, test, n_items, max_len=max_len)


def noisy_walk_dataset(n_users=300, length=20, n_items=100, p_skip=0.3, seed=1,
                       max_len=50):
    """Walk stepping +1 (probability 1-p_skip) or +2 (p_skip) mod n_items.
    Harder than the lookahead task: the larger catalog keeps HR@10 off its
    ceiling, which is what the prompt-window sweep needs to show a shape."""
    rng = np.random.default_rng(seed)
    seqs, valid, test = [], [], []
    for _ in range(n_users):
        cur = int(rng.integers(0, n_items))
        full = [cur]
        for _ in range(length - 1):
            cur = (cur + (2 if rng.random() < p_skip else 1)) % n_items
            full.append(cur)
        seqs.append(full[:-2])
        valid.append(full[-2])
        test.append(full[-1])
    return make_dataset(seqs, valid, test, n_items, max_len=max_len)


def tiny_hyper(**overrides):
    base = dict(d=8, n_heads=2, n_layers=1, max_len=12, lr=0.01,
                batch_size=8, neg_count=1, seed=0)
    base.update(overrides)
    return HyperParams(**base)


def tiny_params(n_users=3, n_items=6, seed=0, **hyper_overrides):
    hp = tiny_hyper(seed=seed, **hyper_overrides)
    return ModelParams(n_users, n_items, hp, rng=np.random.default_rng(seed))


def tiny_dataset(n_users=3, n_items=6, length=6, seed=0, max_len=12):
    rng = np.random.default_rng(seed)
    seqs, valid, test = [], [], []
    for _ in range(n_users):
        full = rng.integers(0, n_items, size=length).tolist()
        seqs.append(full[:-2])
        valid.append(full[-2])
        test.append(full[-1])
    return make_dataset(seqs, valid, test, n_items, max_len=max_len)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
