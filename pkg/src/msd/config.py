"""Run configuration: INI file, model profiles and command-line overrides."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigInvalid, MissingArtifact

# training hyper-parameters that differ between the small CPU profile and the full-size one
PROFILE_DEFAULTS = {
    "desk": {
        "prior_steps": 3000, "prior_lr": 1e-3, "prior_batch": 32,
        "dis_steps": 400, "dis_lr": 1e-3, "dis_batch": 32,
        "ft_lr": 1e-4, "ft_batch": 16,
    },
    "paper": {
        "prior_steps": 200000, "prior_lr": 1e-4, "prior_batch": 64,
        "dis_steps": 50000, "dis_lr": 1e-4, "dis_batch": 64,
        "ft_lr": 1e-4, "ft_batch": 64,
    },
}

DEFAULT_PATHS = {
    "data": "data.jsonl",
    "prior": "prior.ckpt",
    "dis": "dis.ckpt",
    "pair": "pair.json",
    "model": "styled.ckpt",
    "report": "report",
}


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "desk"
    schedule: str = "cosine"
    T: int = 1000
    S: int = 20
    G: int = 950
    K: int = 300
    lambda_sr: float = 1.0
    lambda_s: float = 0.1
    epochs: int = 1
    per_cell: int = 16
    classifier_steps: int = 300
    prior_steps: int | None = None
    prior_lr: float | None = None
    prior_batch: int | None = None
    dis_steps: int | None = None
    dis_lr: float | None = None
    dis_batch: int | None = None
    ft_lr: float | None = None
    ft_batch: int | None = None
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))

    def resolved(self) -> RunConfig:
        """Fill profile-dependent fields left unset and validate."""
        if self.profile not in PROFILE_DEFAULTS:
            raise ConfigInvalid(f"unknown profile {self.profile!r}; expected one of {sorted(PROFILE_DEFAULTS)}")
        out = RunConfig(**{**asdict(self), "paths": dict(self.paths)})
        for key, value in PROFILE_DEFAULTS[self.profile].items():
            if getattr(out, key) is None:
                setattr(out, key, value)
        out.validate()
        return out

    def validate(self) -> None:
        if not 1 <= self.S <= self.T:
            raise ConfigInvalid(f"need 1 <= S <= T, got S={self.S}, T={self.T}")
        # K = 0 is accepted so transfer can be run as an identity; fine-tuning needs K >= 1
        if not 0 <= self.K <= self.G <= self.T:
            raise ConfigInvalid(f"need 0 <= K <= G <= T, got K={self.K}, G={self.G}, T={self.T}")
        if self.epochs < 1 or self.per_cell < 1:
            raise ConfigInvalid("epochs and per_cell must be positive")
        if self.lambda_sr < 0 or self.lambda_s < 0:
            raise ConfigInvalid("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def path(self, key: str) -> Path:
        return Path(self.paths[key])


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = str(_FIELD_TYPES[key])
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigInvalid(f"{key} = {raw!r} is not a valid {kind.split(' ')[0]}") from exc
    return raw


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI file (``[run]`` and ``[paths]`` sections) then apply overrides; overrides win."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"config file {path} does not exist")
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigInvalid(f"cannot parse {path}: {exc}") from exc
        unknown = set(parser.sections()) - {"run", "paths"}
        if unknown:
            raise ConfigInvalid(f"unknown config sections: {sorted(unknown)}")
        if parser.has_section("run"):
            for key, raw in parser.items("run"):
                if key not in _FIELD_TYPES or key == "paths":
                    raise ConfigInvalid(f"unknown config key [run] {key}")
                setattr(cfg, key, _coerce(key, raw))
        if parser.has_section("paths"):
            for key, raw in parser.items("paths"):
                if key not in DEFAULT_PATHS:
                    raise ConfigInvalid(f"unknown config key [paths] {key}")
                cfg.paths[key] = str(path.parent / raw) if not Path(raw).is_absolute() else raw
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigInvalid(f"unknown override {key}")
        setattr(cfg, key, value)
    return cfg.resolved()
