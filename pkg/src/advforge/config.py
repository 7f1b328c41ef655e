"""Run configuration: a YAML tree describing data, zoo, attacks and outputs."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .attacks import AttackType
from .bench import ArchConfig
from .data import SyntheticSpec, load_idx_dataset, synthetic_dataset
from .nn import ShapeError, infer_shapes
from .perceptual import WARP_ARITY


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    synthetic: dict = field(default_factory=dict)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    num_classes: int = 10

    def to_dict(self):
        if self.kind == "synthetic":
            return {"kind": self.kind, "num_classes": self.num_classes,
                    "synthetic": dict(self.synthetic)}
        d = asdict(self)
        d.pop("synthetic")
        return d


@dataclass
class RunConfig:
    dataset: DatasetConfig
    zoo: list
    seed: int = 0
    out_dir: str = "runs/example"
    jobs: int = 1
    per_class: int = 10
    attacks: list = field(default_factory=lambda: ["FGS", "FGV", "HC1"])
    warp: str = "identity"
    top_k: int = 5
    pass_thresholds: list = field(default_factory=lambda: [0.99])
    base_dir: Path = field(default=Path("."), compare=False)

    # -- serialisation ------------------------------------------------------

    def to_dict(self):
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "jobs": self.jobs,
            "per_class": self.per_class,
            "attacks": list(self.attacks),
            "warp": self.warp,
            "top_k": self.top_k,
            "pass_thresholds": list(self.pass_thresholds),
            "dataset": self.dataset.to_dict(),
            "zoo": [a.to_dict() for a in self.zoo],
        }

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_dict(cls, d, base_dir="."):
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            ds = d.get("dataset", {})
            ds_known = {f.name for f in fields(DatasetConfig)}
            if set(ds) - ds_known:
                raise ConfigError(f"unknown dataset keys: {sorted(set(ds) - ds_known)}")
            zoo = [ArchConfig.from_dict(a) for a in d.get("zoo", [])]
            rest = {k: v for k, v in d.items() if k not in ("dataset", "zoo")}
            return cls(dataset=DatasetConfig(**ds), zoo=zoo, base_dir=Path(base_dir), **rest)
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed config: {exc}") from exc

    @classmethod
    def loads(cls, text, base_dir="."):
        try:
            return cls.from_dict(yaml.safe_load(text), base_dir)
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparseable config: {exc}") from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        return cls.loads(path.read_text(), base_dir=path.parent)

    # -- resolution and validation -----------------------------------------

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def synthetic_spec(self):
        return SyntheticSpec(**{**self.dataset.synthetic, "seed": self.seed,
                                "num_classes": self.dataset.num_classes})

    def input_shape(self):
        if self.dataset.kind == "synthetic":
            size = self.synthetic_spec().size
            return (1, size, size)
        raw = self.resolve(self.dataset.train_images).read_bytes()[:16]
        magic, n, h, w = struct.unpack(">IIII", raw)
        if magic == 0x00000803:
            return (1, h, w)
        raise ConfigError(f"{self.dataset.train_images}: unsupported IDX magic 0x{magic:08x}")

    def validate(self):
        ds = self.dataset
        if ds.kind == "synthetic":
            try:
                self.synthetic_spec()
            except TypeError as exc:
                raise ConfigError(f"bad synthetic dataset options: {exc}") from exc
        elif ds.kind == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                value = getattr(ds, key)
                if value is None:
                    raise ConfigError(f"dataset.{key} is required for idx datasets")
                if not self.resolve(value).exists():
                    raise ConfigError(f"dataset.{key}: {self.resolve(value)} does not exist")
        else:
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'idx', got {ds.kind!r}")
        for a in self.attacks:
            try:
                AttackType(a)
            except ValueError:
                raise ConfigError(f"unknown attack {a!r}; expected FGS, FGV or HC1") from None
        if self.warp not in WARP_ARITY:
            raise ConfigError(f"unknown warp {self.warp!r}")
        if self.per_class <= 0 or self.jobs <= 0:
            raise ConfigError("per_class and jobs must be positive")
        if not 1 <= self.top_k <= ds.num_classes:
            raise ConfigError(f"top_k must lie in [1, {ds.num_classes}]")
        if not self.zoo:
            raise ConfigError("zoo is empty")
        ids = [a.model_id(s) for a in self.zoo for s in a.seeds]
        if len(set(ids)) != len(ids):
            raise ConfigError("zoo model ids are not unique")
        shape = self.input_shape()
        for arch in self.zoo:
            try:
                out = infer_shapes(shape, arch.layers)[-1]
            except ShapeError as exc:
                raise ConfigError(f"zoo entry {arch.name!r}: {exc}") from exc
            if out != (ds.num_classes,):
                raise ConfigError(f"zoo entry {arch.name!r} outputs {out}, "
                                  f"expected ({ds.num_classes},)")
            try:
                arch.train.validate()
            except ValueError as exc:
                raise ConfigError(f"zoo entry {arch.name!r}: {exc}") from exc
        return self

    def datasets(self):
        """``(train, test)`` datasets described by the config."""
        if self.dataset.kind == "synthetic":
            return synthetic_dataset(self.synthetic_spec())
        ds = self.dataset
        return (load_idx_dataset(self.resolve(ds.train_images), self.resolve(ds.train_labels)),
                load_idx_dataset(self.resolve(ds.test_images), self.resolve(ds.test_labels)))
