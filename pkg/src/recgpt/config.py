"""Flat `key = value` run configuration with a strict key set."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .model import HyperParams


class ConfigError(RuntimeError):
    pass


@dataclass
class RunConfig:
    # data
    data_path: str = ""
    min_timestamp: int = -1          # -1 disables the filter
    kcore_k: int = 5
    # model
    d: int = 64
    n_heads: int = 2
    n_layers: int = 1
    d_ff: int = 0                    # 0 means 4*d
    max_len: int = 50
    # optimization
    lr: float = 0.001
    batch_size: int = 256
    neg_count: int = 1
    seed: int = 0
    pretrain_epochs: int = 50
    tune_epochs: int = 50
    early_stop_patience: int = 10
    # prompts
    prompt_window: int = 1
    regen_every: int = 0             # 0: generate prompts once, cached
    loss_positions: str = "last"     # or all_real
    trainable: str = "all"           # or head (= W_s + W_l only)
    # recall / evaluation
    recall_m: int = 9
    recall_n: int = 1
    scorer: str = "output"           # output | tied (tuned-model scorer)
    filter_history: bool = False
    eval_modes: str = "PRETRAIN,FINETUNE,RECGPT1,RECGPT"
    eval_split: str = "test"
    eval_ks: str = "5,10"
    sweep_axis: str = "m_n"          # m_n | K
    # output
    out_dir: str = "runs"

    def validate(self) -> None:
        if not self.data_path:
            raise ConfigError("data_path is required")
        if self.loss_positions not in ("last", "all_real"):
            raise ConfigError(f"bad loss_positions {self.loss_positions!r}")
        if self.trainable not in ("all", "head"):
            raise ConfigError(f"bad trainable {self.trainable!r}")
        if self.scorer not in ("output", "tied"):
            raise ConfigError(f"bad scorer {self.scorer!r}")
        if self.eval_split not in ("valid", "test"):
            raise ConfigError(f"bad eval_split {self.eval_split!r}")
        if self.sweep_axis not in ("m_n", "K"):
            raise ConfigError(f"bad sweep_axis {self.sweep_axis!r}")
        if self.kcore_k < 1:
            raise ConfigError("kcore_k must be >= 1")
        try:
            self.ks()
            self.modes()
            self.hyper()
        except (ValueError, ConfigError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.recall_m + self.recall_n != max(self.ks()):
            raise ConfigError(
                f"recall_m + recall_n = {self.recall_m + self.recall_n} "
                f"must equal the largest eval k {max(self.ks())}"
            )

    def ks(self) -> tuple[int, ...]:
        return tuple(int(k) for k in self.eval_ks.split(","))

    def modes(self) -> list[str]:
        from .evaluation import MODES
        modes = [m.strip().upper() for m in self.eval_modes.split(",") if m.strip()]
        for m in modes:
            if m not in MODES:
                raise ConfigError(f"unknown eval mode {m!r}")
        return modes

    def hyper(self) -> HyperParams:
        return HyperParams(
            d=self.d, n_heads=self.n_heads, n_layers=self.n_layers, d_ff=self.d_ff,
            max_len=self.max_len, prompt_window=self.prompt_window, lr=self.lr,
            batch_size=self.batch_size, neg_count=self.neg_count, seed=self.seed,
        )

    def canonical(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    proto = getattr(RunConfig(), key)
    if isinstance(proto, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key}: expected a boolean, got {raw!r}")
    if isinstance(proto, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key}: expected an integer, got {raw!r}") from exc
    if isinstance(proto, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key}: expected a number, got {raw!r}") from exc
    return raw


def parse_config(path) -> RunConfig:
    """Unknown keys are hard errors; '#' starts a comment."""
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected `key = value`")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in known:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
            setattr(cfg, key, _coerce(key, raw))
    cfg.validate()
    return cfg
