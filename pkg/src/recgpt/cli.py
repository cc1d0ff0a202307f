"""Pipeline CLI: preprocess -> pretrain -> gen-prompts -> tune -> eval/sweep.

Each stage writes one artifact into a run directory keyed by the config hash
and refuses to overwrite without --force. Downstream stages verify both the
config hash and the recorded upstream blob hash, so stale or mixed artifacts
fail loudly naming the mismatched stage.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, parse_config
from .data import Catalog, DataError, SplitDataset, build_splits, ingest_tsv, kcore_filter
from .evaluation import EvalError, evaluate, mn_grid, sweep_k, sweep_mn
from .model import ModelParams
from .numerics import NumericsError
from .training import (
    PromptEnhancedSequence,
    TrainingError,
    TrainReport,
    generate_prompt_cache,
    prompt_tune,
    pretrain,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class StageError(RuntimeError):
    """Artifact bookkeeping problem (missing/stale/preexisting artifact)."""


def run_dir(cfg: RunConfig, out_override=None) -> Path:
    base = Path(out_override) if out_override else Path(cfg.out_dir)
    return base / cfg.config_hash()[:12]


def _artifact_path(cfg: RunConfig, name: str, out=None, force=False,
                   for_write=True) -> Path:
    d = run_dir(cfg, out)
    d.mkdir(parents=True, exist_ok=True)
    path = d / name
    if for_write and path.exists() and not force:
        raise StageError(f"{path} already exists; pass --force to overwrite")
    return path


def _check_upstream(manifest: dict, cfg: RunConfig, stage: str) -> None:
    if manifest.get("config_hash") != cfg.config_hash():
        raise StageError(
            f"stage {stage}: artifact was produced under a different config "
            f"(hash {manifest.get('config_hash', '?')[:12]} != {cfg.config_hash()[:12]})"
        )


# ---------------------------------------------------------------------------
# artifact serialization
# ---------------------------------------------------------------------------

def save_dataset(path, dataset: SplitDataset, cfg: RunConfig) -> None:
    seq_flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in dataset.sequences]) \
        if dataset.sequences and any(dataset.sequences) else np.zeros(0, dtype=np.int64)
    offsets = np.zeros(dataset.n_users + 1, dtype=np.int64)
    for i, s in enumerate(dataset.sequences):
        offsets[i + 1] = offsets[i] + len(s)
    checkpoint.save(
        path,
        {
            "seq_flat": seq_flat,
            "seq_offsets": offsets,
            "valid_target": dataset.valid_target.astype(np.int64),
            "test_target": dataset.test_target.astype(np.int64),
        },
        stage="preprocess",
        config_hash=cfg.config_hash(),
        meta={
            "users": dataset.catalog.users,
            "items": dataset.catalog.items,
            "max_len": dataset.max_len,
        },
    )


def load_dataset(path, cfg: RunConfig) -> tuple[SplitDataset, dict]:
    tensors, manifest = checkpoint.load(path)
    _check_upstream(manifest, cfg, "preprocess")
    offsets = tensors["seq_offsets"]
    flat = tensors["seq_flat"]
    sequences = [flat[offsets[i]:offsets[i + 1]].tolist()
                 for i in range(len(offsets) - 1)]
    catalog = Catalog(users=list(manifest["meta"]["users"]),
                      items=list(manifest["meta"]["items"]))
    dataset = SplitDataset(sequences, tensors["valid_target"], tensors["test_target"],
                           catalog, max_len=int(manifest["meta"]["max_len"]))
    return dataset, manifest


def save_model(path, params: ModelParams, stage: str, cfg: RunConfig,
               upstream: dict | None = None, report: TrainReport | None = None) -> None:
    meta = {
        "n_users": params.n_users,
        "n_items": params.n_items,
        "hyper": vars(params.hyper),
        "upstream": upstream or {},
    }
    if report is not None:
        # wall time is deliberately excluded: checkpoints must be bit-identical
        # across reruns of the same config
        meta["report"] = {
            "epochs": len(report.epoch_losses),
            "final_loss": report.epoch_losses[-1] if report.epoch_losses else None,
            "best_epoch": report.best_epoch,
            "seed": report.seed,
        }
    checkpoint.save(path, params.tensors(), stage=stage,
                    config_hash=cfg.config_hash(), meta=meta)


def load_model(path, cfg: RunConfig, stage: str, hyper=None) -> tuple[ModelParams, dict]:
    from .model import HyperParams

    tensors, manifest = checkpoint.load(path)
    _check_upstream(manifest, cfg, stage)
    meta = manifest["meta"]
    hp = hyper or HyperParams(**meta["hyper"])
    params = ModelParams(meta["n_users"], meta["n_items"], hp)
    params.load_tensors(tensors)
    return params, manifest


def save_prompts(path, prompts: list[PromptEnhancedSequence], K: int,
                 cfg: RunConfig, upstream: dict) -> None:
    flat_items = np.concatenate([np.asarray(p.items, dtype=np.int64) for p in prompts]) \
        if prompts and any(p.items for p in prompts) else np.zeros(0, dtype=np.int64)
    flat_segs = np.concatenate([np.asarray(p.segments, dtype=np.int64) for p in prompts]) \
        if prompts and any(p.items for p in prompts) else np.zeros(0, dtype=np.int64)
    offsets = np.zeros(len(prompts) + 1, dtype=np.int64)
    for i, p in enumerate(prompts):
        offsets[i + 1] = offsets[i] + len(p.items)
    checkpoint.save(path, {"items": flat_items, "segments": flat_segs, "offsets": offsets},
                    stage="gen-prompts", config_hash=cfg.config_hash(),
                    meta={"K": K, "n_users": len(prompts), "upstream": upstream})


def load_prompts(path, cfg: RunConfig) -> tuple[list[PromptEnhancedSequence], dict]:
    tensors, manifest = checkpoint.load(path)
    _check_upstream(manifest, cfg, "gen-prompts")
    offsets = tensors["offsets"]
    prompts = [
        PromptEnhancedSequence(
            tensors["items"][offsets[i]:offsets[i + 1]].tolist(),
            tensors["segments"][offsets[i]:offsets[i + 1]].tolist(),
        )
        for i in range(len(offsets) - 1)
    ]
    return prompts, manifest


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing upstream artifact {path}; run `recgpt {stage}` first")
    return path


def _verify_upstream_hash(manifest: dict, key: str, expected: str, stage: str) -> None:
    recorded = manifest.get("meta", {}).get("upstream", {}).get(key)
    if recorded != expected:
        raise StageError(
            f"stage {stage}: upstream {key} hash mismatch "
            f"(recorded {str(recorded)[:12]}, found {expected[:12]}); rerun {key}"
        )


def _write_report(path: Path, report: TrainReport, force: bool) -> None:
    if path.exists() and not force:
        raise StageError(f"{path} already exists; pass --force to overwrite")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(report.epoch_losses):
            fh.write(f"{epoch},{loss!r}\n")


# ---------------------------------------------------------------------------
# stage commands
# ---------------------------------------------------------------------------

def cmd_preprocess(cfg: RunConfig, args) -> int:
    records = ingest_tsv(cfg.data_path)
    if cfg.min_timestamp >= 0:
        records = [r for r in records if r.timestamp >= cfg.min_timestamp]
    records = kcore_filter(records, k=cfg.kcore_k)
    if not records:
        raise DataError("no interactions left after filtering")
    dataset = build_splits(records, max_len=cfg.max_len)
    if dataset.n_users == 0:
        raise DataError("no users left after split construction")
    path = _artifact_path(cfg, "dataset.ckpt", args.out, args.force)
    save_dataset(path, dataset, cfg)

    stats = dataset.stats()
    print(f"{'users':>10} {'items':>10} {'actions':>10} {'avg_len':>10} {'sparsity':>10}")
    print(f"{stats['users']:>10} {stats['items']:>10} {stats['actions']:>10} "
          f"{stats['avg_length']:>10.2f} {stats['sparsity']:>10.4%}")
    stats_path = run_dir(cfg, args.out) / "stats.csv"
    with open(stats_path, "w", encoding="utf-8") as fh:
        fh.write("users,items,actions,avg_length,sparsity\n")
        fh.write(f"{stats['users']},{stats['items']},{stats['actions']},"
                 f"{stats['avg_length']!r},{stats['sparsity']!r}\n")
    print(f"wrote {path}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    d = run_dir(cfg, args.out)
    dataset, ds_manifest = load_dataset(_require(d / "dataset.ckpt", "preprocess"), cfg)
    params, report = pretrain(dataset, cfg.hyper(), cfg.pretrain_epochs,
                              early_stop_patience=cfg.early_stop_patience)
    path = _artifact_path(cfg, "pretrain.ckpt", args.out, args.force)
    save_model(path, params, "pretrain", cfg,
               upstream={"preprocess": ds_manifest["blob_sha256"]}, report=report)
    _write_report(d / "pretrain_report.csv", report, args.force)
    print(f"pretrained {len(report.epoch_losses)} epochs, "
          f"final loss {report.epoch_losses[-1]:.4f}; wrote {path}")
    return 0


def _k_value(cfg: RunConfig, args) -> int:
    return cfg.prompt_window if args.k is None else args.k


def cmd_gen_prompts(cfg: RunConfig, args) -> int:
    d = run_dir(cfg, args.out)
    dataset, _ = load_dataset(_require(d / "dataset.ckpt", "preprocess"), cfg)
    params, pre_manifest = load_model(_require(d / "pretrain.ckpt", "pretrain"),
                                      cfg, "pretrain", hyper=cfg.hyper())
    _verify_upstream_hash(pre_manifest, "preprocess",
                          checkpoint.blob_hash(d / "dataset.ckpt"), "gen-prompts")
    K = _k_value(cfg, args)
    prompts = generate_prompt_cache(dataset, params, K)
    path = _artifact_path(cfg, f"prompts_K{K}.ckpt", args.out, args.force)
    save_prompts(path, prompts, K, cfg,
                 upstream={"pretrain": pre_manifest["blob_sha256"]})
    print(f"generated prompts for {dataset.n_users} users at K={K}; wrote {path}")
    return 0


def cmd_tune(cfg: RunConfig, args) -> int:
    from dataclasses import replace

    d = run_dir(cfg, args.out)
    dataset, _ = load_dataset(_require(d / "dataset.ckpt", "preprocess"), cfg)
    pre, pre_manifest = load_model(_require(d / "pretrain.ckpt", "pretrain"),
                                   cfg, "pretrain", hyper=cfg.hyper())
    K = _k_value(cfg, args)
    hyper = replace(cfg.hyper(), prompt_window=K)
    prompt_path = d / f"prompts_K{K}.ckpt"
    if prompt_path.exists():
        prompts, pr_manifest = load_prompts(prompt_path, cfg)
        _verify_upstream_hash(pr_manifest, "pretrain", pre_manifest["blob_sha256"], "tune")
    else:
        prompts = generate_prompt_cache(dataset, pre, K)
        save_prompts(prompt_path, prompts, K, cfg,
                     upstream={"pretrain": pre_manifest["blob_sha256"]})
    tuned, report = prompt_tune(
        dataset, pre, prompts, hyper, cfg.tune_epochs,
        loss_positions=cfg.loss_positions, trainable=cfg.trainable,
        early_stop_patience=cfg.early_stop_patience,
        regen_every=cfg.regen_every or None,
    )
    path = _artifact_path(cfg, f"tuned_K{K}.ckpt", args.out, args.force)
    save_model(path, tuned, "tune", cfg,
               upstream={"pretrain": pre_manifest["blob_sha256"]}, report=report)
    _write_report(d / f"tune_K{K}_report.csv", report, args.force)
    print(f"tuned {len(report.epoch_losses)} epochs at K={K}; wrote {path}")
    return 0


def _load_for_eval(cfg: RunConfig, args, modes):
    d = run_dir(cfg, args.out)
    pretrained = tuned = finetuned = None
    needs_pre = any(m in ("PRETRAIN", "VARIANT_1", "VARIANT_3") for m in modes)
    needs_tuned = any(m in ("RECGPT", "RECGPT1", "VARIANT_2") for m in modes)
    if needs_pre or needs_tuned:
        pretrained, _ = load_model(_require(d / "pretrain.ckpt", "pretrain"),
                                   cfg, "pretrain", hyper=cfg.hyper())
    if needs_tuned:
        tuned, manifest = load_model(
            _require(d / f"tuned_K{cfg.prompt_window}.ckpt", "tune"), cfg, "tune",
            hyper=cfg.hyper())
        _verify_upstream_hash(manifest, "pretrain",
                              checkpoint.blob_hash(d / "pretrain.ckpt"), "eval")
    if "FINETUNE" in modes:
        finetuned, manifest = load_model(
            _require(d / "tuned_K0.ckpt", "tune --k 0"), cfg, "tune")
        _verify_upstream_hash(manifest, "pretrain",
                              checkpoint.blob_hash(d / "pretrain.ckpt"), "eval")
    return pretrained, tuned, finetuned


def cmd_eval(cfg: RunConfig, args) -> int:
    d = run_dir(cfg, args.out)
    dataset, _ = load_dataset(_require(d / "dataset.ckpt", "preprocess"), cfg)
    modes = cfg.modes()
    pretrained, tuned, finetuned = _load_for_eval(cfg, args, modes)
    ks = cfg.ks()
    csv_path = d / f"eval_{cfg.eval_split}.csv"
    if csv_path.exists() and not args.force:
        raise StageError(f"{csv_path} already exists; pass --force to overwrite")
    rows = ["mode,metric,k,value,n_users"]
    for mode in modes:
        dump = (d / f"recall_{mode}_{cfg.eval_split}.csv") if args.dump else None
        report = evaluate(
            dataset, cfg.eval_split, mode,
            pretrained=pretrained,
            tuned=finetuned if mode == "FINETUNE" else tuned,
            ks=ks, m=cfg.recall_m, n=cfg.recall_n,
            prompt_k=0 if mode == "FINETUNE" else cfg.prompt_window,
            filter_history=cfg.filter_history, dump_path=dump,
        )
        print(report.table())
        print()
        rows.extend(report.csv_rows())
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"wrote {csv_path}")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    d = run_dir(cfg, args.out)
    dataset, _ = load_dataset(_require(d / "dataset.ckpt", "preprocess"), cfg)
    pretrained, _m = load_model(_require(d / "pretrain.ckpt", "pretrain"),
                                cfg, "pretrain", hyper=cfg.hyper())
    ks = cfg.ks()
    if cfg.sweep_axis == "m_n":
        tuned, manifest = load_model(
            _require(d / f"tuned_K{cfg.prompt_window}.ckpt", "tune"), cfg, "tune",
            hyper=cfg.hyper())
        _verify_upstream_hash(manifest, "pretrain",
                              checkpoint.blob_hash(d / "pretrain.ckpt"), "sweep")
        table = sweep_mn(dataset, cfg.eval_split, pretrained, tuned,
                         grid=mn_grid(max(ks)), ks=ks,
                         prompt_k=cfg.prompt_window,
                         filter_history=cfg.filter_history)
    else:
        table = sweep_k(dataset, cfg.eval_split, pretrained, cfg.hyper(),
                        cfg.tune_epochs, ks=ks,
                        m=cfg.recall_m, n=cfg.recall_n,
                        filter_history=cfg.filter_history,
                        tune_kwargs={
                            "loss_positions": cfg.loss_positions,
                            "trainable": cfg.trainable,
                            "early_stop_patience": cfg.early_stop_patience,
                        })
    path = d / f"sweep_{cfg.sweep_axis}.csv"
    if path.exists() and not args.force:
        raise StageError(f"{path} already exists; pass --force to overwrite")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(table.csv() + "\n")
    print(table.csv())
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "gen-prompts": cmd_gen_prompts,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recgpt",
        description="Two-stage GPT-decoder sequential recommender pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to key = value config file")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        p.add_argument("--out", default=None, help="override the output directory root")
        if name in ("gen-prompts", "tune"):
            p.add_argument("--k", type=int, default=None,
                           help="override the prompt window size for this stage")
        if name == "eval":
            p.add_argument("--dump", action="store_true",
                           help="write per-user recall CSVs next to the report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
