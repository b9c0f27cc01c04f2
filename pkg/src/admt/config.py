"""Run configuration: JSON in, exhaustively validated, defaults explicit.

Defaults mirror the training recipe this implements: SGD momentum 0.9,
weight decay 1e-4, initial lr 0.01 under polynomial decay, EMA 0.99,
max consistency weight 2.0, confidence threshold 0.95, and a maximum
alternation period of half an epoch over the unlabeled pool.
"""

from __future__ import annotations

import dataclasses
import json

from .training import ENSEMBLING_STRATEGIES, MODES


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# modes that take part in pseudo-label ensembling, with their allowed strategies
_ALLOWED_ENSEMBLING = {
    "sup_only": ("none",),
    "mt_single_t1": ("none",),
    "mt_single_t2": ("none",),
    "admt_rpa_only": ("avg",),
    "admt_full": ENSEMBLING_STRATEGIES,
}

_DEFAULT_ENSEMBLING = {
    "sup_only": "none",
    "mt_single_t1": "none",
    "mt_single_t2": "none",
    "admt_rpa_only": "avg",
    "admt_full": "ccm",
}


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    dataset: str = ""
    labeled_fraction: float = 0.05
    batch_size: int = 2
    unlabeled_ratio: int = 2
    crop_size: int = 48
    max_iters: int = 1200
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_decay: float = 0.99
    lambda_u_max: float = 2.0
    ramp_iters: int = -1  # -1: derive as 10% of max_iters
    tau: float = 0.95
    t_max: object = "half_epoch"  # iterations, or "half_epoch"
    mode: str = "admt_full"
    ensembling: str = ""  # "": derive from mode

    def validated(self):
        """Resolve derived fields and reject anything outside the grid."""
        cfg = dataclasses.replace(self)
        for name in ("seed", "batch_size", "unlabeled_ratio", "crop_size",
                     "max_iters", "ramp_iters"):
            if not isinstance(getattr(cfg, name), int):
                raise ConfigError(f"{name} must be an integer, got {getattr(cfg, name)!r}")
        for name in ("labeled_fraction", "base_lr", "momentum", "weight_decay",
                     "ema_decay", "lambda_u_max", "tau"):
            value = getattr(cfg, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name} must be a number, got {value!r}")
        if cfg.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}")
        if cfg.ensembling == "":
            cfg.ensembling = _DEFAULT_ENSEMBLING[cfg.mode]
        if cfg.ensembling not in _ALLOWED_ENSEMBLING[cfg.mode]:
            raise ConfigError(
                f"ensembling {cfg.ensembling!r} is not valid for mode {cfg.mode!r} "
                f"(allowed: {_ALLOWED_ENSEMBLING[cfg.mode]})"
            )
        if not 0.0 < cfg.labeled_fraction < 1.0:
            raise ConfigError(f"labeled_fraction must be in (0,1), got {cfg.labeled_fraction}")
        if cfg.batch_size < 1 or cfg.unlabeled_ratio < 1:
            raise ConfigError("batch_size and unlabeled_ratio must be >= 1")
        if cfg.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {cfg.max_iters}")
        if cfg.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {cfg.base_lr}")
        if not 0.0 <= cfg.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must be in [0,1], got {cfg.ema_decay}")
        if not 0.0 < cfg.tau < 1.0:
            raise ConfigError(f"tau must be in (0,1), got {cfg.tau}")
        if cfg.crop_size < 8:
            raise ConfigError(f"crop_size must be >= 8, got {cfg.crop_size}")
        if cfg.ramp_iters == -1:
            cfg.ramp_iters = max(1, round(0.1 * cfg.max_iters))
        if cfg.ramp_iters < 0:
            raise ConfigError(f"ramp_iters must be >= 0, got {cfg.ramp_iters}")
        if cfg.t_max != "half_epoch":
            if not isinstance(cfg.t_max, int) or cfg.t_max < 1:
                raise ConfigError(f't_max must be a positive int or "half_epoch", got {cfg.t_max!r}')
        return cfg


def config_from_dict(doc):
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - fields
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**doc).validated()


def load_config(path, overrides=None):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    doc.update(overrides or {})
    return config_from_dict(doc)


def echo_config(cfg, resolved, path):
    """Write the full effective configuration (defaults included) plus
    run-derived quantities, so the run directory is self-describing."""
    doc = dataclasses.asdict(cfg)
    doc["resolved"] = dict(resolved)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
