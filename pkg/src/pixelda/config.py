"""Run configuration: INI-style files, named profiles, and overrides.

Precedence is profile defaults, then the config file, then --set overrides.
Every key is declared in SCHEMA with its type; unknown sections or keys are
rejected outright so typos fail fast instead of silently training with a
default. dump() emits the fully resolved configuration, and feeding that
text back in reproduces the run.
"""

from __future__ import annotations

import configparser
import io
import os
from pathlib import Path

from .losses import LossWeights
from .models import DiscriminatorConfig, GeneratorConfig, TaskClassifierConfig
from .trainer import TrainConfig

DATA_ROOT_ENV = "PIXELDA_DATA_ROOT"


class ConfigError(ValueError):
    """The configuration cannot be parsed or validated."""


# section -> key -> (type tag, default)
SCHEMA = {
    "model": {
        "image_height": ("int", 28),
        "image_width": ("int", 28),
        "channels": ("int", 3),
        "residual_blocks": ("int", 6),
        "generator_filters": ("int", 64),
        "noise_dim": ("int", 10),
        "discriminator_filters": ("int", 64),
        "dropout_keep": ("float", 0.9),
        "noise_stddev": ("float", 0.2),
        "class_count": ("int", 10),
        "pose_head": ("bool", False),
        "private_layers": ("str", "conv:32,relu,pool:2"),
        "shared_layers": ("str", "conv:48,relu,pool:2,flatten,fc:100,relu,fc:100,relu"),
    },
    "losses": {
        "domain_weight": ("float", 1.0),
        "generator_adversarial_weight": ("float", 1.0),
        "task_weight": ("float", 1.0),
        "task_weight_in_g_step": ("float", 0.0),
        "content_weight": ("float", 0.0),
        "pose_weight": ("float", 0.0),
        "train_t_on_source": ("bool", True),
        "train_t_on_adapted": ("bool", True),
        "saturating_generator_loss": ("bool", False),
    },
    "train": {
        "total_steps": ("int", 20000),
        "base_learning_rate": ("float", 1e-3),
        "decay_factor": ("float", 0.95),
        "decay_interval": ("int", 20000),
        "batch_size": ("int", 32),
        "weight_decay": ("float", 1e-5),
        "seed": ("int", 0),
        "metrics_interval": ("int", 100),
        "checkpoint_interval": ("int", 2000),
        "grid_interval": ("int", 2000),
        "debug_checks": ("bool", False),
    },
    "data": {
        "data_root": ("str", ""),
        "source_train": ("str", ""),
        "source_test": ("str", ""),
        "target_train": ("str", ""),
        "target_test": ("str", ""),
        "labeled_target": ("str", ""),
        "expand_grayscale": ("bool", False),
    },
    "synthesis": {
        "source": ("str", ""),
        "backgrounds": ("str", ""),
        "threshold": ("float", 0.5),
        "seed": ("int", 0),
    },
    "eval": {
        "checkpoint": ("str", ""),
        "split": ("str", "target_test"),
        "stream": ("str", "adapted"),
        "batch_size": ("int", 256),
    },
    "adapt": {
        "checkpoint": ("str", ""),
        "split": ("str", "source_test"),
        "noise_seed": ("int", 0),
    },
    "audit": {
        "checkpoint": ("str", ""),
        "against": ("str", "target_train"),
        "adapt": ("str", "source_test"),
        "sample_count": ("int", 8),
        "seed": ("int", 0),
    },
    "stability": {
        "seeds": ("str", "0,1,2,3,4"),
        "eval_split": ("str", "target_test"),
    },
}

# Benchmark presets. Values not listed fall back to SCHEMA defaults.
PROFILES = {
    "mnistm": {
        ("model", "image_height"): 28,
        ("model", "image_width"): 28,
        ("model", "channels"): 3,
        ("model", "residual_blocks"): 6,
        ("model", "class_count"): 10,
        ("train", "base_learning_rate"): 1e-3,
        ("train", "decay_factor"): 0.95,
        ("train", "decay_interval"): 20000,
        ("losses", "domain_weight"): 0.13,
        ("losses", "generator_adversarial_weight"): 0.011,
        ("losses", "task_weight"): 1.0,
        ("losses", "task_weight_in_g_step"): 0.01,
        ("losses", "content_weight"): 0.0,
        ("data", "expand_grayscale"): True,
    },
    "usps": {
        ("model", "image_height"): 28,
        ("model", "image_width"): 28,
        ("model", "channels"): 1,
        ("model", "residual_blocks"): 6,
        ("model", "class_count"): 10,
        ("train", "base_learning_rate"): 2e-4,
        ("losses", "domain_weight"): 1.0,
        ("losses", "generator_adversarial_weight"): 1.0,
        ("losses", "task_weight"): 1.0,
        ("losses", "task_weight_in_g_step"): 1.0,
    },
    "linemod": {
        ("model", "image_height"): 64,
        ("model", "image_width"): 64,
        ("model", "channels"): 4,
        ("model", "residual_blocks"): 4,
        ("model", "class_count"): 11,
        ("model", "pose_head"): True,
        ("model", "dropout_keep"): 0.35,
        ("model", "shared_layers"):
            "conv:64,relu,pool:2,conv:128,relu,pool:2,flatten,fc:128,relu",
        ("train", "base_learning_rate"): 2.2e-4,
        ("train", "decay_factor"): 0.75,
        ("train", "decay_interval"): 95000,
        ("losses", "domain_weight"): 0.004,
        ("losses", "generator_adversarial_weight"): 0.011,
        ("losses", "task_weight"): 1.0,
        ("losses", "task_weight_in_g_step"): 0.0,
        ("losses", "pose_weight"): 0.2,
        ("losses", "train_t_on_source"): False,
    },
    "linemod_masked": {
        ("model", "image_height"): 64,
        ("model", "image_width"): 64,
        ("model", "channels"): 4,
        ("model", "residual_blocks"): 4,
        ("model", "class_count"): 11,
        ("model", "pose_head"): True,
        ("model", "dropout_keep"): 0.35,
        ("model", "shared_layers"):
            "conv:64,relu,pool:2,conv:128,relu,pool:2,flatten,fc:128,relu",
        ("train", "base_learning_rate"): 2.6e-4,
        ("train", "decay_factor"): 0.75,
        ("train", "decay_interval"): 95000,
        ("losses", "domain_weight"): 0.0088,
        ("losses", "generator_adversarial_weight"): 0.011,
        ("losses", "task_weight"): 1.0,
        ("losses", "task_weight_in_g_step"): 0.0,
        ("losses", "pose_weight"): 0.29,
        ("losses", "content_weight"): 22.9,
        ("losses", "train_t_on_source"): False,
    },
}

_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda v: {"true": True, "1": True, "yes": True,
                       "false": False, "0": False, "no": False}[str(v).strip().lower()],
}


class RunConfig:
    """Fully resolved configuration; one value per SCHEMA entry."""

    def __init__(self, values, profile=""):
        self.values = values
        self.profile = profile

    def get(self, section, key):
        return self.values[(section, key)]

    # ---- typed views -----------------------------------------------------

    def generator_config(self):
        g = lambda k: self.get("model", k)
        return GeneratorConfig(
            image_height=g("image_height"),
            image_width=g("image_width"),
            image_channels=g("channels"),
            residual_blocks=g("residual_blocks"),
            filters=g("generator_filters"),
            noise_dim=g("noise_dim"),
        )

    def discriminator_config(self):
        g = lambda k: self.get("model", k)
        return DiscriminatorConfig(
            image_height=g("image_height"),
            image_width=g("image_width"),
            image_channels=g("channels"),
            base_filters=g("discriminator_filters"),
            dropout_keep=g("dropout_keep"),
            noise_stddev=g("noise_stddev"),
        )

    def task_config(self):
        g = lambda k: self.get("model", k)
        return TaskClassifierConfig(
            image_height=g("image_height"),
            image_width=g("image_width"),
            class_count=g("class_count"),
            source_channels=g("channels"),
            adapted_channels=g("channels"),
            private_layers=g("private_layers"),
            shared_layers=g("shared_layers"),
            pose_head=g("pose_head"),
        )

    def loss_weights(self):
        g = lambda k: self.get("losses", k)
        return LossWeights(
            domain_weight=g("domain_weight"),
            generator_adversarial_weight=g("generator_adversarial_weight"),
            task_weight=g("task_weight"),
            task_weight_in_g_step=g("task_weight_in_g_step"),
            content_weight=g("content_weight"),
            pose_weight=g("pose_weight"),
            train_t_on_source=g("train_t_on_source"),
            train_t_on_adapted=g("train_t_on_adapted"),
            saturating_generator_loss=g("saturating_generator_loss"),
        )

    def train_config(self):
        g = lambda k: self.get("train", k)
        return TrainConfig(
            total_steps=g("total_steps"),
            base_learning_rate=g("base_learning_rate"),
            decay_factor=g("decay_factor"),
            decay_interval=g("decay_interval"),
            batch_size=g("batch_size"),
            weight_decay=g("weight_decay"),
            seed=g("seed"),
            loss_weights=self.loss_weights(),
            metrics_interval=g("metrics_interval"),
            checkpoint_interval=g("checkpoint_interval"),
            grid_interval=g("grid_interval"),
            debug_checks=g("debug_checks"),
            profile=self.profile,
        )

    def data_root(self):
        root = self.get("data", "data_root") or os.environ.get(DATA_ROOT_ENV, "")
        return Path(root) if root else Path(".")

    def resolve_path(self, value):
        p = Path(value)
        return p if p.is_absolute() else self.data_root() / p

    def dump(self):
        """Canonical INI text of every resolved value."""
        out = io.StringIO()
        if self.profile:
            out.write(f"# profile: {self.profile}\n")
        for section in SCHEMA:
            out.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                value = self.values[(section, key)]
                if isinstance(value, bool):
                    value = "true" if value else "false"
                out.write(f"{key} = {value}\n")
            out.write("\n")
        return out.getvalue()


def _typed(section, key, raw):
    try:
        spec = SCHEMA[section][key]
    except KeyError:
        known = sorted(SCHEMA.get(section, {}))
        raise ConfigError(
            f"unknown key [{section}] {key}; known keys: {known or 'none (bad section)'}"
        )
    tag = spec[0]
    try:
        return _PARSERS[tag](raw)
    except (ValueError, KeyError):
        raise ConfigError(f"[{section}] {key} must be {tag}, got {raw!r}")


def load_config(path=None, text=None, profile=None, overrides=()):
    """Build a RunConfig from a file (or literal text) plus overrides.

    `overrides` are "section.key=value" strings from the command line. The
    profile may come from the argument or a top-level [profile] name=...
    entry in the file; the argument wins.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"config does not parse: {e}") from e

    file_profile = None
    if parser.has_section("profile"):
        extra = set(parser["profile"]) - {"name"}
        if extra:
            raise ConfigError(f"unknown key(s) in [profile]: {sorted(extra)}")
        file_profile = parser["profile"].get("name")
    chosen = profile or file_profile or ""
    if chosen and chosen not in PROFILES:
        raise ConfigError(f"unknown profile {chosen!r}; one of {sorted(PROFILES)}")

    values = {
        (section, key): spec[1]
        for section, keys in SCHEMA.items()
        for key, spec in keys.items()
    }
    if chosen:
        values.update(PROFILES[chosen])

    for section in parser.sections():
        if section == "profile":
            continue
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; known: {sorted(SCHEMA)}")
        for key, raw in parser[section].items():
            values[(section, key)] = _typed(section, key, raw)

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        values[(section.strip(), key.strip())] = _typed(section.strip(), key.strip(),
                                                        raw.strip())

    return RunConfig(values, profile=chosen)
