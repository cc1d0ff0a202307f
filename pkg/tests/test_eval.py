"""Metrics, evaluation modes, and sweep tables."""
import math

import numpy as np
import pytest

from recgpt.evaluation import (
    MODES,
    EvalError,
    eval_input,
    evaluate,
    hr_at_k,
    mn_grid,
    ndcg_at_k,
    sweep_mn,
)
from recgpt.training import generate_prompt_cache, pretrain, prompt_tune

from conftest import tiny_dataset, tiny_hyper, tiny_params


# ---------------------------------------------------------------------------
# metric formulas
# ---------------------------------------------------------------------------

def test_hr_closed_forms():
    ranked = np.array([7, 3, 9, 1, 4, 2])
    assert hr_at_k(ranked, 7, 5) == 1
    assert hr_at_k(ranked, 2, 5) == 0


def test_ndcg_closed_forms():
    ranked = np.array([7, 3, 9, 1])
    assert ndcg_at_k(ranked, 7, 4) == 1.0
    assert math.isclose(ndcg_at_k(ranked, 9, 4), 0.5, rel_tol=1e-12)  # 1/log2(4)
    assert ndcg_at_k(ranked, 5, 4) == 0.0


def test_metrics_against_direct_formula_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        ranked = rng.permutation(50)[:n]
        target = int(rng.integers(0, 50))
        k = int(rng.integers(1, n + 1))
        in_top = target in ranked[:k].tolist()
        assert hr_at_k(ranked, target, k) == int(in_top)
        if in_top:
            rank = ranked[:k].tolist().index(target) + 1
            expected = 1.0 / math.log2(rank + 1)
        else:
            expected = 0.0
        got = ndcg_at_k(ranked, target, k)
        assert math.isclose(got, expected, rel_tol=1e-12) or got == expected
        assert got <= hr_at_k(ranked, target, k)


def test_metrics_reject_short_rankings():
    with pytest.raises(EvalError):
        hr_at_k(np.array([1, 2]), 1, 5)
    with pytest.raises(EvalError):
        ndcg_at_k(np.array([1, 2]), 1, 5)


# ---------------------------------------------------------------------------
# evaluation inputs and modes
# ---------------------------------------------------------------------------

def test_eval_input_splits():
    ds = tiny_dataset(n_users=2, n_items=8, length=6, seed=1)
    assert eval_input(ds, 0, "valid") == ds.sequences[0]
    assert eval_input(ds, 0, "test") == ds.sequences[0] + [int(ds.valid_target[0])]
    with pytest.raises(EvalError):
        eval_input(ds, 0, "train")


def test_mode_table_covers_variants():
    assert MODES["PRETRAIN"] == MODES["VARIANT_3"]
    assert MODES["RECGPT1"] == MODES["VARIANT_2"]
    assert MODES["RECGPT"][1] is True
    assert MODES["VARIANT_1"] == ("pretrained", True, "tied")


def test_perfect_ranking_upper_bound():
    # zeroed model: all logits tie, ranking falls back to ascending item index,
    # so a dataset whose targets are all item 0 is ranked perfectly
    ds = tiny_dataset(n_users=3, n_items=8, length=6, seed=2)
    ds.test_target[...] = 0
    params = tiny_params(n_users=3, n_items=8)
    for p in params.parameters():
        p.value[...] = 0.0
    report = evaluate(ds, "test", "PRETRAIN", pretrained=params, ks=(5,))
    assert report.metrics[("HR", 5)] == 1.0
    assert report.metrics[("NDCG", 5)] == 1.0


def test_pretrain_and_variant3_reports_identical():
    ds = tiny_dataset(n_users=4, n_items=12, length=6, seed=3)
    params = tiny_params(n_users=4, n_items=12, seed=3)
    a = evaluate(ds, "test", "PRETRAIN", pretrained=params, ks=(5, 10))
    b = evaluate(ds, "test", "VARIANT_3", pretrained=params, ks=(5, 10))
    assert a.metrics == b.metrics
    assert a.n_users == b.n_users


def test_evaluate_requires_checkpoints():
    ds = tiny_dataset(n_users=2, n_items=12, length=6, seed=4)
    with pytest.raises(EvalError):
        evaluate(ds, "test", "RECGPT1", pretrained=tiny_params(n_items=12))
    with pytest.raises(EvalError):
        evaluate(ds, "test", "NOT_A_MODE", pretrained=tiny_params(n_items=12))
    with pytest.raises(EvalError):
        evaluate(ds, "test", "RECGPT", pretrained=tiny_params(n_items=12),
                 tuned=tiny_params(n_items=12), ks=(10,), m=4, n=4)
    with pytest.raises(EvalError):
        # prompt-aware evaluation of a tuned model needs the prompt generator
        evaluate(ds, "test", "RECGPT1", tuned=tiny_params(n_items=12),
                 ks=(5,), prompt_k=2)


def test_metrics_bounded_and_monotone_in_k():
    ds = tiny_dataset(n_users=6, n_items=15, length=6, seed=5)
    params = tiny_params(n_users=6, n_items=15, seed=5)
    report = evaluate(ds, "test", "PRETRAIN", pretrained=params, ks=(5, 10))
    for value in report.metrics.values():
        assert 0.0 <= value <= 1.0
    assert report.metrics[("HR", 5)] <= report.metrics[("HR", 10)]
    assert report.metrics[("NDCG", 5)] <= report.metrics[("HR", 5)]
    assert report.metrics[("NDCG", 10)] <= report.metrics[("HR", 10)]


def test_report_matches_recall_csv_recompute(tmp_path):
    ds = tiny_dataset(n_users=5, n_items=12, length=6, seed=6)
    params = tiny_params(n_users=5, n_items=12, seed=6)
    dump = tmp_path / "recall.csv"
    report = evaluate(ds, "test", "PRETRAIN", pretrained=params, ks=(5, 10),
                      dump_path=dump)
    per_user = {}
    for line in dump.read_text().strip().split("\n")[1:]:
        user, rank, item, score, prov = line.split(",")
        per_user.setdefault(user, []).append(int(item[1:]))  # strip the i prefix
    for k in (5, 10):
        hr = ndcg = 0.0
        for u, ranked in sorted(per_user.items()):
            target = int(ds.test_target[int(u[1:])])
            hr += hr_at_k(np.array(ranked), target, k)
            ndcg += ndcg_at_k(np.array(ranked), target, k)
        assert report.metrics[("HR", k)] == hr / len(per_user)
        assert report.metrics[("NDCG", k)] == ndcg / len(per_user)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def test_mn_grid_complete():
    assert mn_grid(10) == [(10, 0), (9, 1), (8, 2), (7, 3), (6, 4), (5, 5)]
    assert mn_grid(4) == [(4, 0), (3, 1), (2, 2)]


def test_sweep_mn_first_row_equals_one_step_eval():
    ds = tiny_dataset(n_users=5, n_items=15, length=6, seed=7)
    hp = tiny_hyper(seed=7, prompt_window=1)
    pre, _ = pretrain(ds, hp, epochs=1)
    prompts = generate_prompt_cache(ds, pre, 1)
    tuned, _ = prompt_tune(ds, pre, prompts, hp, epochs=1)
    table = sweep_mn(ds, "test", pre, tuned, ks=(5, 10), prompt_k=1)
    assert table.points == mn_grid(10)
    one_step = evaluate(ds, "test", "RECGPT1", pretrained=pre, tuned=tuned,
                        ks=(5, 10), prompt_k=1)
    for key, value in one_step.metrics.items():
        assert table.values[key][0] == value
    csv = table.csv()
    assert csv.splitlines()[1].startswith("10_0,")
    assert len(csv.splitlines()) == 1 + len(mn_grid(10))
