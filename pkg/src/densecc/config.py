"""Run configuration: a flat `key = value` file mapped onto a dataclass.

Lines are `key = value`, with `#` comments and blank lines ignored. Types
come from the dataclass annotations; booleans accept true/false, yes/no,
1/0. Command-line overrides reuse the same `key=value` syntax.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass
class RunConfig:
    # data
    train_data: str = ""
    dev_data: str = ""
    max_entities: int = 42

    # encoder
    dim: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    max_len: int = 512

    # pair refinement
    n_layers: int = 3
    expanded: bool = True
    use_bias: bool = True
    use_cluster: bool = True
    dense: bool = True
    transition_activation: str = "tanh"
    normalize_context: bool = False

    # classifier
    n_groups: int = 1

    # loss weights and margins
    mu: float = 1.0
    lam: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    # optimization; the two learning rates follow the usual split of a
    # smaller rate for the encoder than for everything above it, scaled up
    # because this encoder trains from scratch rather than from pretraining
    batch_size: int = 8
    epochs: int = 100
    lr_encoder: float = 3e-4
    lr_other: float = 1e-3
    warmup_frac: float = 0.06
    weight_decay: float = 0.0

    # bookkeeping
    seed: int = 17
    eval_every: int = 5
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        if self.dim % self.enc_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by enc_heads {self.enc_heads}")
        if self.dim % self.n_groups != 0:
            raise ValueError(f"dim {self.dim} not divisible by n_groups {self.n_groups}")
        if self.n_layers < 0 or self.enc_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _convert(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind in ("bool", bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw


def parse_assignments(pairs, base: RunConfig | None = None) -> RunConfig:
    """Apply `key=value` strings on top of `base` (or fresh defaults)."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for raw in pairs:
        if "=" not in raw:
            raise ValueError(f"expected key=value, got {raw!r}")
        key, value = raw.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, _convert(key, value))
    return cfg.validate()


def load_config(path, overrides=()) -> RunConfig:
    assignments = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{line_no}: expected key = value")
            assignments.append(stripped)
    return parse_assignments(assignments + list(overrides))


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(RunConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")
