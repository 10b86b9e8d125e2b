"""Run configuration: a sectioned key-value file, validated before any compute.

Sections: [run], [tokenizer], [dit], [sampler], [paths].  Every key has a
declared type and range; unknown sections or keys are rejected.  Effective
values (file defaults overridden by ``--set section.key=value``) are echoed
into a JSON manifest next to every command's outputs together with content
hashes of the inputs, so a run can be reproduced bit-for-bit.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass

OUT_ROOT_ENV = "VAFLOW_OUT_ROOT"


@dataclass(frozen=True)
class Field:
    typ: type
    default: object
    lo: float | None = None
    hi: float | None = None
    choices: tuple | None = None


SCHEMA = {
    "run": {
        "seed": Field(int, 0, 0, 2**31 - 1),
        "threads": Field(int, 0, 0, 256),  # 0 = leave the BLAS pool alone
    },
    "tokenizer": {
        "f": Field(int, 8, 2, 64),
        "d_z": Field(int, 16, 1, 512),
        "vf": Field(bool, True),
        "foundation": Field(str, "synthetic", choices=("synthetic", "file")),
        "foundation_seed": Field(int, 0, 0, 2**31 - 1),
        "d_f": Field(int, 24, 1, 4096),
        "feature_path": Field(str, ""),
        "m1": Field(float, 0.5, 0.0, 1.0),
        "m2": Field(float, 0.25, 0.0, 1.0),
        "w_hyper": Field(float, 0.1, 0.0, 1e6),
        "w_kl": Field(float, 1e-6, 0.0, 1e6),
        "ablation": Field(str, "full", choices=("full", "mcos_only", "mdms_only", "no_margin")),
        "mdms_on_projected": Field(bool, False),
        "lr": Field(float, 1e-4, 0.0, 1.0),
        "beta2": Field(float, 0.95, 0.0, 1.0),
        "batch_size": Field(int, 16, 1, 4096),
        "epochs": Field(int, 30, 1, 100_000),
    },
    "dit": {
        "depth": Field(int, 4, 1, 64),
        "heads": Field(int, 4, 1, 64),
        "width": Field(int, 128, 4, 4096),
        "patch": Field(int, 1, 1, 16),
        "num_classes": Field(int, 4, 1, 65536),
        "lambda_dir": Field(float, 1.0, 0.0, 1e6),
        "label_dropout": Field(float, 0.1, 0.0, 1.0),
        "lognorm": Field(bool, True),
        "lognorm_until_step": Field(int, 0, 0, 10**9),  # 0 = always on
        "lr": Field(float, 1e-4, 0.0, 1.0),
        "beta2": Field(float, 0.95, 0.0, 1.0),
        "batch_size": Field(int, 32, 1, 4096),
        "steps": Field(int, 2000, 1, 10**9),
        "latents_from": Field(str, "mean", choices=("mean", "sample")),
    },
    "sampler": {
        "steps": Field(int, 250, 1, 100_000),
        "cfg_scale": Field(float, 1.0, 0.0, 100.0),
        "cfg_lo": Field(float, 0.0, 0.0, 1.0),
        "cfg_hi": Field(float, 1.0, 0.0, 1.0),
        "shift_s": Field(float, 1.0, 1e-3, 100.0),
        "n_samples": Field(int, 16, 1, 100_000),
    },
    "paths": {
        "dataset": Field(str, "out/dataset.vimg"),
        "out_root": Field(str, "out"),
    },
}


class ConfigError(ValueError):
    pass


def _coerce(section, key, field, raw):
    try:
        if field.typ is bool:
            if isinstance(raw, bool):
                value = raw
            elif str(raw).lower() in ("1", "true", "yes", "on"):
                value = True
            elif str(raw).lower() in ("0", "false", "no", "off"):
                value = False
            else:
                raise ValueError(raw)
        else:
            value = field.typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {field.typ.__name__}")
    if field.lo is not None and field.typ in (int, float) and not (field.lo <= value <= field.hi):
        raise ConfigError(f"{section}.{key}: {value} outside [{field.lo}, {field.hi}]")
    if field.choices is not None and value not in field.choices:
        raise ConfigError(f"{section}.{key}: {value!r} not one of {field.choices}")
    return value


class RunConfig:
    """Validated settings for every command; attribute access per section."""

    def __init__(self, values=None):
        self._values = {s: {k: f.default for k, f in fields.items()} for s, fields in SCHEMA.items()}
        for dotted, raw in (values or {}).items():
            self.set(dotted, raw)

    def set(self, dotted, raw):
        if "." not in dotted:
            raise ConfigError(f"expected section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {section!r}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        self._values[section][key] = _coerce(section, key, SCHEMA[section][key], raw)

    def section(self, name):
        return dict(self._values[name])

    def __getitem__(self, dotted):
        section, key = dotted.split(".", 1)
        return self._values[section][key]

    def validate(self):
        if self["sampler.cfg_lo"] > self["sampler.cfg_hi"]:
            raise ConfigError(
                f"sampler.cfg_lo ({self['sampler.cfg_lo']}) must not exceed "
                f"sampler.cfg_hi ({self['sampler.cfg_hi']})"
            )
        if self["tokenizer.foundation"] == "file" and not self["tokenizer.feature_path"]:
            raise ConfigError("tokenizer.foundation=file needs tokenizer.feature_path")
        return self

    @property
    def out_root(self):
        return os.environ.get(OUT_ROOT_ENV) or self["paths.out_root"]

    def to_dict(self):
        return {s: dict(kv) for s, kv in self._values.items()}

    @classmethod
    def from_file(cls, path, overrides=None):
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        cfg = cls()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}] in {path}")
            for key, raw in parser.items(section):
                cfg.set(f"{section}.{key}", raw)
        for dotted, raw in (overrides or {}).items():
            cfg.set(dotted, raw)
        return cfg.validate()


def content_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, command, config, inputs=(), outputs=()):
    """Record what produced a set of outputs: config echo plus input hashes."""
    from . import __version__

    manifest = {
        "command": command,
        "version": __version__,
        "config": config.to_dict(),
        "inputs": {str(p): content_hash(p) for p in inputs if os.path.exists(str(p))},
        "outputs": [str(p) for p in outputs],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path
