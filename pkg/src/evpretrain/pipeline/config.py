"""Training configuration: JSON on disk, a frozen dataclass in memory."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ..construction import QUANTIZE_MODES
from ..hand.dataset import ORACLE_MODES

METHODS = ("iterative", "one_shot", "scratch")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    # construction iterations per window
    T: int = 6
    C: float = 0.2
    method: str = "iterative"
    quantize: str = "per_iteration"
    oracle_mode: str = "reset_per_pair"
    w_pose_rgb: float = 1.0
    w_pose_pev: float = 1.0
    w_adv: float = 0.1
    w_align: float = 0.5
    w_div: float = 0.1
    lr_pretrain: float = 1e-3
    lr_disc: float = 1e-3
    lr_finetune: float = 3e-4
    batch_size: int = 16
    pretrain_steps: int = 400
    finetune_steps: int = 300
    finetune_samples: int = 20
    checkpoint_every: int = 500
    data_dir: str | None = None
    rgb_split: str = "rgb"
    event_split: str = "event"
    finetune_split: str = "finetune"
    eval_split: str = "eval"

    def validate(self, check_paths: bool = True) -> "TrainConfig":
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not self.C > 0:
            raise ConfigError(f"C must be positive, got {self.C}")
        for k in ("w_pose_rgb", "w_pose_pev", "w_adv", "w_align", "w_div"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        for k in ("lr_pretrain", "lr_disc", "lr_finetune"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        for k in ("batch_size", "finetune_samples"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in ("pretrain_steps", "finetune_steps", "checkpoint_every"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if self.height % 8 or self.width % 8 or min(self.height, self.width) < 16:
            raise ConfigError("height and width must be multiples of 8, at least 16")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.quantize not in QUANTIZE_MODES:
            raise ConfigError(f"quantize must be one of {QUANTIZE_MODES}")
        if self.oracle_mode not in ORACLE_MODES:
            raise ConfigError(f"oracle_mode must be one of {ORACLE_MODES}")
        if check_paths and self.data_dir is not None and not Path(self.data_dir).is_dir():
            raise ConfigError(f"data_dir {self.data_dir} does not exist")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return from_dict(d)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def _coerce(key: str, value, where: str):
    kind = _TYPES[key]
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}key {key!r}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}key {key!r}: expected a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}key {key!r}: expected a string, got {value!r}")
        return value
    if value is not None and not isinstance(value, str):
        raise ConfigError(f"{where}key {key!r}: expected a path string or null, got {value!r}")
    return value


def from_dict(d: dict, text: str | None = None, source: str = "<config>", check_paths: bool = True) -> TrainConfig:
    values = {}
    for key, value in d.items():
        where = f"{source}:{_line_of(text, key)}: " if text else ""
        if key not in _TYPES:
            raise ConfigError(f"{where}unknown key {key!r}")
        values[key] = _coerce(key, value, where)
    return TrainConfig(**values).validate(check_paths)


def loads_config(text: str, source: str = "<config>", check_paths: bool = True) -> TrainConfig:
    if not text.strip():
        return TrainConfig().validate(check_paths)
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{source}:1: config must be a JSON object")
    return from_dict(d, text, source, check_paths)


def load_config(path: str | Path) -> TrainConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return loads_config(text, str(p))


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.dumps())
