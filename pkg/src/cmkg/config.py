"""Run configuration files: sections, defaults, validation and the config hash.

A config file (YAML or JSON) has up to five sections::

    run:      out_dir, run_id
    data:     path (an existing dataset file, or null to generate) + SyntheticConfig fields
    encoder:  EncoderConfig fields
    trainer:  TrainerConfig fields
    distill:  DistillConfig fields

Every key is optional; unknown keys are rejected.  The hash covers everything
except ``run`` so relocating the output does not change it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .errors import ConfigError
from .taskstream import SyntheticConfig
from .trainer import DistillConfig, TrainerConfig

OUTPUT_ROOT_ENV = "CMKG_OUTPUT_ROOT"


@dataclass
class RunSection:
    out_dir: str = "runs"
    run_id: str = "run"


@dataclass
class DataSection:
    path: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def validate(self) -> None:
        self.data.synthetic.validate()
        self.encoder.validate()
        self.trainer.validate()
        self.distill.validate()
        syn, enc = self.data.synthetic, self.encoder
        if self.data.path is None:
            if syn.vocab_size > enc.vocab_size:
                raise ConfigError(f"data.vocab_size={syn.vocab_size} exceeds encoder.vocab_size={enc.vocab_size}")
            if syn.patch_dim != enc.patch_dim:
                raise ConfigError(f"data.patch_dim={syn.patch_dim} != encoder.patch_dim={enc.patch_dim}")
            if syn.seq_len > enc.seq_len:
                raise ConfigError(f"data.seq_len={syn.seq_len} exceeds encoder.seq_len={enc.seq_len}")
        if not self.run.run_id or "/" in self.run.run_id:
            raise ConfigError(f"run.run_id must be a plain name, got {self.run.run_id!r}")

    def to_dict(self) -> dict:
        return {
            "run": dataclasses.asdict(self.run),
            "data": {"path": self.data.path, **_plain(dataclasses.asdict(self.data.synthetic))},
            "encoder": dataclasses.asdict(self.encoder),
            "trainer": dataclasses.asdict(self.trainer),
            "distill": dataclasses.asdict(self.distill),
        }

    def hash(self) -> str:
        body = {k: v for k, v in self.to_dict().items() if k != "run"}
        canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.run.out_dir)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out / self.run.run_id


def _plain(d: dict) -> dict:
    # tuples -> lists so the echoed config round-trips through JSON/YAML unchanged
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, values, section: str):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown key {section}.{unknown[0]}")
    kwargs = {}
    for key, value in values.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false, got {value!r}")
        elif isinstance(default, (int, float)) and not isinstance(default, bool) and value is not None:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
            if isinstance(default, float):
                value = float(value)
            elif isinstance(value, float):
                if not value.is_integer():
                    raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
                value = int(value)
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - {"run", "data", "encoder", "trainer", "distill", "config_hash"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    data = dict(raw.get("data") or {})
    path = data.pop("path", None)
    cfg = RunConfig(
        run=_build(RunSection, raw.get("run"), "run"),
        data=DataSection(path, _build(SyntheticConfig, data, "data")),
        encoder=_build(EncoderConfig, raw.get("encoder"), "encoder"),
        trainer=_build(TrainerConfig, raw.get("trainer"), "trainer"),
        distill=_build(DistillConfig, raw.get("distill"), "distill"),
    )
    cfg.validate()
    # an echoed config carries its hash; refuse one that was edited afterwards
    if "config_hash" in raw and raw["config_hash"] != cfg.hash():
        raise ConfigError("config_hash does not match the config contents")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from None
    return from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    """Resolved config (all defaults filled in) with its hash, as JSON."""
    return json.dumps({"config_hash": cfg.hash(), **cfg.to_dict()}, indent=2, sort_keys=True) + "\n"
