"""Flat `key = value` run configuration.

One assignment per line, `#` lines are comments, keys are namespaced
with dots.  Unknown keys, duplicates and malformed values are hard
errors that name the offending line, so a typo can never silently fall
back to a default.  Every key has a documented default except the data
paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .losses import AngularSoftmax, ArcFace, CrossEntropy, LossKind
from .models import BackboneConfig
from .psn import PsnMode
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "DEFAULT_CONFIG_TEXT"]


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in s.split(",") if p.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return parse


_REQUIRED = object()

# key -> (parser, default); _REQUIRED keys must appear when their
# feature is selected (checked at assembly time)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "model.kind": (_choice("mlp", "tiny_resnet"), "tiny_resnet"),
    "model.input_shape": (_int_tuple, (1, 28, 28)),
    "model.hidden": (_int_tuple, (64,)),
    "model.blocks": (_int_tuple, (2, 2, 2)),
    "model.channels": (_int_tuple, (16, 32, 64)),
    "model.embedding_dim": (int, 64),
    "psn.mode": (
        _choice(*[m.value for m in PsnMode]),
        "fixed",
    ),
    "psn.before_norm": (_bool, True),
    "loss.kind": (_choice("cross_entropy", "angular_softmax", "arcface"), "cross_entropy"),
    "loss.arcface.s": (float, 64.0),
    "loss.arcface.m": (float, 0.5),
    "loss.angular.m": (int, 4),
    "loss.angular.lambda_base": (float, 1000.0),
    "loss.angular.lambda_min": (float, 5.0),
    "loss.angular.decay": (float, 0.1),
    "train.batch_size": (int, 64),
    "train.epochs": (int, 20),
    "train.lr0": (float, 0.01),
    "train.drop_epochs": (_int_tuple, (8, 12, 16)),
    "train.drop_factor": (float, 10.0),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 0.0),
    "train.seed": (int, 0),
    "data.source": (_choice("synthetic", "idx"), "synthetic"),
    "data.images": (str, _REQUIRED),
    "data.labels": (str, _REQUIRED),
    "data.eval_images": (str, None),
    "data.eval_labels": (str, None),
    "data.classes": (int, 10),
    "data.per_class": (int, 200),
    "data.hard_fraction": (float, 0.2),
    "data.dim": (int, 16),
    "data.separation": (float, 6.0),
    "data.hard_offset": (float, 4.0),
    "data.seed": (int, 0),
    "eval.embeddings": (_choice("post_psn", "pre_psn"), "post_psn"),
    "eval.folds": (int, 10),
    "eval.hard_tau": (float, 0.5),
    "out.dir": (str, "out"),
}

DEFAULT_CONFIG_TEXT = "\n".join(
    f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}"
    for k, (_, v) in SCHEMA.items()
    if v is not _REQUIRED and v is not None
)


@dataclass
class RunConfig:
    values: dict[str, Any]
    path: str

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def require(self, key: str) -> Any:
        v = self.values.get(key)
        if v is _REQUIRED or v is None:
            raise ConfigError(f"{self.path}: key '{key}' is required for this run")
        return v

    # assembly into module configs -------------------------------------
    def backbone_config(self) -> BackboneConfig:
        try:
            return BackboneConfig(
                kind=self["model.kind"],
                input_shape=self["model.input_shape"],
                hidden=self["model.hidden"],
                blocks=self["model.blocks"],
                channels=self["model.channels"],
                embedding_dim=self["model.embedding_dim"],
            )
        except ValueError as e:
            raise ConfigError(f"{self.path}: {e}") from e

    def psn_mode(self) -> PsnMode:
        return PsnMode(self["psn.mode"])

    def loss_kind(self) -> LossKind:
        kind = self["loss.kind"]
        try:
            if kind == "cross_entropy":
                return CrossEntropy()
            if kind == "angular_softmax":
                return AngularSoftmax(
                    m=self["loss.angular.m"],
                    lambda_base=self["loss.angular.lambda_base"],
                    lambda_min=self["loss.angular.lambda_min"],
                    decay=self["loss.angular.decay"],
                )
            return ArcFace(s=self["loss.arcface.s"], m=self["loss.arcface.m"])
        except ValueError as e:
            raise ConfigError(f"{self.path}: {e}") from e

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                batch_size=self["train.batch_size"],
                epochs=self["train.epochs"],
                lr0=self["train.lr0"],
                drop_epochs=self["train.drop_epochs"],
                drop_factor=self["train.drop_factor"],
                momentum=self["train.momentum"],
                weight_decay=self["train.weight_decay"],
                seed=self["train.seed"],
                loss=self.loss_kind(),
                psn_mode=self.psn_mode(),
            )
        except ValueError as e:
            raise ConfigError(f"{self.path}: {e}") from e


def parse_config(path: str, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, Any] = {k: d for k, (_, d) in SCHEMA.items()}
    seen: set[str] = set()
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from e

    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        seen.add(key)
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {e}") from e

    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"{path}: unknown override key '{key}'")
        values[key] = SCHEMA[key][0](value) if isinstance(value, str) else value
    return RunConfig(values, path)
