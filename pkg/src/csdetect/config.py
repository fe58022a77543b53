"""Flat key = value run configuration shared by every CLI subcommand.

The file format is one `key = value` per line, `#` starts a comment,
unknown keys are rejected. Command-line overrides are applied after the
file. A single master seed drives everything; sub-streams for the
dataset, the sensing matrix and the model weights are derived from it
with fixed tags so the parts stay independent but reproducible.
"""

import math
from dataclasses import dataclass

from .decoding import DecodeConfig, default_min_support
from .encoding import PatchShape, make_geometry
from .errors import ConfigError
from .recovery import RecoveryConfig
from .regressor import MODES, LossConfig
from .rng import CounterRng
from .sensing import make_sensing_matrix
from .synthdata import SynthConfig

_INT, _FLOAT, _BOOL, _STR = "int", "float", "bool", "str"
_FLOAT_AUTO = "float_or_auto"
_INTLIST = "intlist"

# key -> (type, default, allowed-choices-or-None)
SCHEMA = {
    "seed": (_INT, 0, None),
    # dataset generation
    "height": (_INT, 200, None),
    "width": (_INT, 200, None),
    "n_train": (_INT, 500, None),
    "n_val": (_INT, 0, None),
    "n_test": (_INT, 100, None),
    "cells_min": (_INT, 3, None),
    "cells_max": (_INT, 6, None),
    "blob_radius": (_FLOAT, 6.0, None),
    "intensity_lo": (_FLOAT, 110.0, None),
    "intensity_hi": (_FLOAT, 190.0, None),
    "clutter_min": (_INT, 0, None),
    "clutter_max": (_INT, 4, None),
    "clutter_contrast": (_FLOAT, 0.4, None),
    "noise_sigma": (_FLOAT, 5.0, None),
    "background": (_FLOAT, 45.0, None),
    # encoding geometry and sensing matrix
    "m": (_INT, 64, None),
    "L": (_INT, 15, None),
    "margin": (_FLOAT, 20.0, None),
    "code_scale": (_FLOAT, 1.0, None),  # geometry frame / image frame ratio
    # recovery
    "lambda": (_FLOAT, 0.39, None),
    "ista_max_iters": (_INT, 2000, None),
    "ista_tol": (_FLOAT, 1e-8, None),
    "train_ista_max_iters": (_INT, 150, None),
    "train_ista_tol": (_FLOAT, 1e-6, None),
    "T": (_INT, 16, None),
    # loss and training
    "alpha": (_FLOAT, 1.3, None),
    "beta": (_FLOAT, 0.20, None),
    "mode": (_STR, "ecnncs2", MODES),
    "epochs": (_INT, 40, None),
    "batch_size": (_INT, 50, None),
    "lr": (_FLOAT, 1e-3, None),
    "rms_decay": (_FLOAT, 0.9, None),
    "momentum": (_FLOAT, 0.0, None),
    "optimizer": (_STR, "rms", ("rms", "sgd")),
    "model": (_STR, "mlp", ("mlp", "cellhead")),
    "hidden": (_INTLIST, (512, 512), None),
    "head_hidden": (_INT, 32, None),
    "dog_sigma": (_FLOAT_AUTO, "auto", None),  # auto: blob_radius / 2
    "input_pool": (_INT, 1, None),
    "out_scale": (_FLOAT_AUTO, "auto", None),
    "train_d": (_BOOL, False, None),
    "grad_rule": (_STR, "approx", ("approx", "exact")),
    "val_every": (_INT, 0, None),
    # decoding
    "bandwidth": (_FLOAT, 40.0, None),
    "prune_threshold": (_FLOAT, 15.0, None),
    "min_support": (_INT, 0, None),  # 0 means ceil(L / 3)
    "coalesce": (_BOOL, True, None),
    "splat_encode": (_BOOL, False, None),
    # evaluation
    "rho": (_FLOAT_AUTO, "auto", None),  # auto means blob_radius
    "matching": (_STR, "greedy", ("greedy", "optimal")),
    # gradient auditing
    "epsilon": (_FLOAT, 1e-6, None),
    "gc_instances": (_INT, 50, None),
    "gc_m": (_INT, 30, None),
    "gc_n": (_INT, 80, None),
    "gc_k": (_INT, 4, None),
    "fd_step": (_FLOAT_AUTO, "auto", None),
    # outputs
    "svg_overlays": (_BOOL, False, None),
}

# fixed tags for deriving independent sub-seeds from the master seed
_TAG_MATRIX = 2
_TAG_MODEL = 3


def _parse_value(key, kind, raw, choices):
    raw = raw.strip()
    try:
        if kind == _INT:
            return int(raw, 0)
        if kind == _FLOAT:
            return float(raw)
        if kind == _FLOAT_AUTO:
            return "auto" if raw == "auto" else float(raw)
        if kind == _BOOL:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == _INTLIST:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
        if kind == _STR:
            if choices and raw not in choices:
                raise ConfigError(f"{key} must be one of {choices}, got {raw!r}")
            return raw
    except (ValueError, TypeError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unhandled config type {kind}")


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return self.values["seed"]

    def shape(self):
        return PatchShape(h=self.values["height"], w=self.values["width"])

    def code_shape(self):
        s = self.values["code_scale"]
        return PatchShape(h=int(round(self.values["height"] * s)),
                          w=int(round(self.values["width"] * s)))

    def synth_config(self):
        v = self.values
        return SynthConfig(shape=self.shape(), cells_min=v["cells_min"],
                           cells_max=v["cells_max"], blob_radius=v["blob_radius"],
                           intensity_lo=v["intensity_lo"], intensity_hi=v["intensity_hi"],
                           clutter_min=v["clutter_min"], clutter_max=v["clutter_max"],
                           clutter_contrast=v["clutter_contrast"],
                           noise_sigma=v["noise_sigma"], background=v["background"],
                           seed=v["seed"])

    def geometry(self):
        return make_geometry(self.code_shape(), self.values["L"], self.values["margin"],
                             seed=self.seed)

    def sensing_matrix(self, code_len=None):
        if code_len is None:
            code_len = self.geometry().code_len
        return make_sensing_matrix(self.values["m"], code_len,
                                   seed=CounterRng(self.seed).derive(_TAG_MATRIX).seed)

    def model_seed(self):
        return CounterRng(self.seed).derive(_TAG_MODEL).seed

    def recovery_cfg(self, training=False):
        v = self.values
        if training:
            return RecoveryConfig(lam=v["lambda"], max_iters=v["train_ista_max_iters"],
                                  tol=v["train_ista_tol"])
        return RecoveryConfig(lam=v["lambda"], max_iters=v["ista_max_iters"],
                              tol=v["ista_tol"])

    def loss_cfg(self):
        v = self.values
        return LossConfig(alpha=v["alpha"], beta=v["beta"], lam=v["lambda"])

    def decode_cfg(self):
        v = self.values
        min_support = v["min_support"] or default_min_support(v["L"])
        return DecodeConfig(prune_threshold=v["prune_threshold"],
                            bandwidth=v["bandwidth"], min_support=min_support,
                            coalesce=v["coalesce"])

    def rho(self):
        r = self.values["rho"]
        return self.values["blob_radius"] if r == "auto" else r

    def validate(self):
        v = self.values
        if v["cells_max"] > 0 and v["m"] >= self.geometry().code_len:
            raise ConfigError("m must be smaller than the per-line code length")
        if math.isnan(v["lambda"]):
            raise ConfigError("lambda must be a number")
        return self


def default_config():
    return RunConfig({k: d for k, (_, d, _) in SCHEMA.items()})


def parse_config_text(text, source="<config>"):
    values = {k: d for k, (_, d, _) in SCHEMA.items()}
    for lineno, raw_line in enumerate(text.split("\n"), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw_line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        kind, _, choices = SCHEMA[key]
        values[key] = _parse_value(key, kind, raw, choices)
    return RunConfig(values).validate()


def load_config(path=None, overrides=None):
    """Config from an optional file plus `key=value` override strings."""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), source=str(path))
    else:
        cfg = default_config()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        kind, _, choices = SCHEMA[key]
        cfg.values[key] = _parse_value(key, kind, raw, choices)
    return cfg.validate()
