"""Experiment configuration: a sectioned key=value file with a strict schema.

Unknown sections or keys are rejected with an error naming the offender;
values are typed and validated up front so commands fail before touching any
artifact. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Bad configuration; the message names the offending section/key."""


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(",") if part.strip())


def _parse_str_list(raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


# section -> key -> (parser, default). Defaults are used when the key (or
# the whole section) is absent.
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "out"),
        "dataset_features": (str, ""),
        "dataset_labels": (str, ""),
    },
    "synth": {
        "num_classes": (int, 20),
        "samples_per_class": (int, 100),
        "ambient_dim": (int, 64),
        "cluster_std": (float, 1.0),
        "mean_separation": (float, 4.0),
        "seed": (int, -1),          # -1: derive from the master seed
    },
    "split": {
        "n_base": (int, 10),
        "n_val": (int, 5),
        "n_novel": (int, 5),
        "n_labeled": (int, 20),
        "n_test": (int, 20),
        "oracle": (_parse_bool, False),
    },
    "model": {
        "hidden_widths": (_parse_int_list, (128, 128)),
        "embed_dim": (int, 64),
        "nonlinearity": (str, "relu"),
    },
    "pretrain": {
        "method": (str, "base"),
        "epochs": (int, 100),
        "batch_labeled": (int, 32),
        "batch_unlabeled": (int, 64),
        "lr": (float, 0.01),
        "alpha": (float, 1.0),
        "beta": (float, 0.0),
        "tau": (float, 0.95),
        "sigma_weak": (float, 0.05),
        "sigma_strong": (float, 0.2),
    },
    "plml": {
        "epochs": (int, 30),
        "episodes_per_epoch": (int, 100),
        "lr": (float, 0.01),
        "patience": (int, 10),
        "lr_decay": (float, 10.0),
        "gamma": (float, 0.1),
        "ways": (int, 5),
        "shots": (int, 5),
        "queries": (int, 15),
        "head": (str, "proto"),
        "val_episodes": (int, 50),
    },
    "eval": {
        "modes": (_parse_str_list, ("inductive",)),
        "episodes": (int, 600),
        "unlabeled_per_class": (int, 20),
        "ways": (int, 5),
        "shots": (int, 5),
        "queries": (int, 15),
        "checkpoint": (str, "model_metatrained.fslc"),
        "nl_grid": (_parse_int_list, (2, 5, 20)),
        "variants": (_parse_str_list, ("base", "plml")),
    },
    "compare": {
        "epochs": (int, 10),
        "episodes_per_epoch": (int, 50),
        "lr": (float, 0.01),
        "ways": (int, 5),
        "shots": (int, 1),
        "queries": (int, 15),
        "unlabeled_per_class": (int, 5),
        "unlabeled_modes": (_parse_str_list, ("class_aware_oracle", "practical")),
        "eval_episodes": (int, 200),
        "eval_unlabeled_per_class": (int, 5),
        "repeats": (int, 3),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    base_dir: Path
    config_hash: str
    path: Path

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out_dir(self) -> Path:
        return self._resolve(self.values["run"]["out_dir"])

    def _resolve(self, raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def dataset_paths(self) -> tuple[Path, Path]:
        feats = self.values["run"]["dataset_features"]
        labels = self.values["run"]["dataset_labels"]
        feats_path = self._resolve(feats) if feats else self.out_dir / "dataset.fslf"
        labels_path = self._resolve(labels) if labels else self.out_dir / "dataset.labels.csv"
        return feats_path, labels_path


def load_config(path, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw_bytes = path.read_bytes()
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(raw_bytes.decode("utf-8"), source=str(path))
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc

    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    for section, keys in SCHEMA.items():
        out: dict[str, Any] = {}
        for key, (parse, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    out[key] = parse(raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"bad value for {key!r} in [{section}]: {exc}") from exc
            else:
                out[key] = default
        values[section] = out

    if seed_override is not None:
        values["run"]["seed"] = int(seed_override)
    if out_override is not None:
        values["run"]["out_dir"] = out_override
    _validate(values)
    return ExperimentConfig(
        values=values,
        base_dir=path.parent.resolve(),
        config_hash=hashlib.sha256(raw_bytes).hexdigest(),
        path=path.resolve(),
    )


def _validate(values: dict[str, dict[str, Any]]) -> None:
    if values["run"]["seed"] < 0:
        raise ConfigError("bad value for 'seed' in [run]: must be non-negative")
    if values["model"]["nonlinearity"] not in ("relu", "identity"):
        raise ConfigError("bad value for 'nonlinearity' in [model]: use relu or identity")
    if values["pretrain"]["method"] not in ("base", "selftrain"):
        raise ConfigError("bad value for 'method' in [pretrain]: use base or selftrain")
    if values["plml"]["head"] not in ("proto", "ep"):
        raise ConfigError("bad value for 'head' in [plml]: use proto or ep")
    for mode in values["eval"]["modes"]:
        if mode not in ("inductive", "transductive", "semi"):
            raise ConfigError(f"bad value for 'modes' in [eval]: unknown mode {mode!r}")
    for variant in values["eval"]["variants"]:
        if variant not in ("base", "plml"):
            raise ConfigError(f"bad value for 'variants' in [eval]: unknown variant {variant!r}")
    for mode in values["compare"]["unlabeled_modes"]:
        if mode not in ("practical", "class_aware_oracle"):
            raise ConfigError(
                f"bad value for 'unlabeled_modes' in [compare]: unknown mode {mode!r}"
            )
