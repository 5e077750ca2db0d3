"""Run configuration: a single JSON tree with hard-failing unknown keys.

Defaults encode the reference hyperparameters (1000-step linear schedule,
batch 64, learning rate 1e-4, 28-pixel patches at stride 1, contamination
0.05 with 100 estimators).  A user config overrides leaves; any key not in
the schema is a hard error so hyperparameter typos cannot pass silently.
"""

import copy
import json

from .datagen import DefectSpec, TextureSpec
from .diffusion import TrainConfig, make_schedule
from .errors import ConfigurationError
from .features import FeatureParams
from .unet import UNetConfig

DEFAULTS = {
    "image": {"size": 100},
    "patch": {"size": 28, "stride": 1, "batch": 64},
    "schedule": {"steps": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "unet": {
        "base_channels": 32,
        "channel_multipliers": [1, 2],
        "time_embed_dim": 128,
        "groups": 8,
        "attention_levels": [False, True],
        "seed": 0,
    },
    "train": {
        "epochs": 3,
        "batch_size": 64,
        "learning_rate": 1e-4,
        "seed": 0,
        "checkpoint_interval": 0,
    },
    "features": {
        "blur_kind": "gaussian",
        "blur_radius": 2,
        "blur_sigma": 1.0,
        "window": 20,
        "window_stride": 5,
    },
    "forest": {"n_estimators": 100, "subsample": 256, "contamination": 0.05, "seed": 0},
    "detect": {"t_star": 1, "noise_draws": 1, "seed": 0, "all_heatmaps": False},
    "synth": {
        "n_normal_train": 40,
        "n_normal_test": 20,
        "n_anomalous_test": 20,
        "height": 100,
        "width": 100,
        "seed": 0,
        "textures": [
            {"kind": "stripes45", "wavelength": 8.0, "amplitude": 0.25,
             "noise_sigma": 0.02, "seed": 0},
            {"kind": "stripes135", "wavelength": 8.0, "amplitude": 0.25,
             "noise_sigma": 0.02, "seed": 0},
        ],
        "defects": [
            {"kind": "blob", "size": 12, "intensity_delta": 0.3, "position": None},
        ],
    },
}

_SPEC_FIELDS = {
    "textures": set(TextureSpec.__dataclass_fields__),
    "defects": set(DefectSpec.__dataclass_fields__),
}


def default_config():
    return copy.deepcopy(DEFAULTS)


def _merge(base, override, path):
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigurationError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {here!r} must be a table")
            _merge(base[key], value, here)
        elif key in _SPEC_FIELDS:
            if not isinstance(value, list):
                raise ConfigurationError(f"config key {here!r} must be a list")
            for i, item in enumerate(value):
                unknown = set(item) - _SPEC_FIELDS[key]
                if unknown:
                    raise ConfigurationError(
                        f"unknown config key {here}[{i}].{sorted(unknown)[0]}")
            base[key] = value
        else:
            base[key] = value


def load_config(path=None, overrides=None):
    """Defaults, overlaid with a JSON config file, then programmatic overrides."""
    cfg = default_config()
    if path is not None:
        with open(path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(user, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        _merge(cfg, user, "")
    if overrides:
        _merge(cfg, overrides, "")
    return cfg


def override_seed(cfg, seed):
    """Point every per-stage seed at one value (the --seed flag)."""
    for section in ("unet", "train", "forest", "detect", "synth"):
        cfg[section]["seed"] = int(seed)
    return cfg


# --- constructors that hand config sections to the library types ------------

def unet_config(cfg):
    u = cfg["unet"]
    return UNetConfig(
        in_channels=1,
        base_channels=u["base_channels"],
        channel_multipliers=tuple(u["channel_multipliers"]),
        time_embed_dim=u["time_embed_dim"],
        groups=u["groups"],
        attention_levels=tuple(bool(a) for a in u["attention_levels"]),
    ).validate(image_size=cfg["patch"]["size"])


def schedule(cfg):
    s = cfg["schedule"]
    return make_schedule(s["steps"], s["beta_start"], s["beta_end"])


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                       learning_rate=t["learning_rate"], seed=t["seed"],
                       checkpoint_interval=t["checkpoint_interval"]).validate()


def feature_params(cfg):
    f = cfg["features"]
    return FeatureParams(blur_kind=f["blur_kind"], blur_radius=f["blur_radius"],
                         blur_sigma=f["blur_sigma"], window=f["window"],
                         window_stride=f["window_stride"])


def texture_specs(cfg):
    return [TextureSpec(**t) for t in cfg["synth"]["textures"]]


def defect_specs(cfg):
    out = []
    for d in cfg["synth"]["defects"]:
        d = dict(d)
        if d.get("position") is not None:
            d["position"] = tuple(d["position"])
        out.append(DefectSpec(**d))
    return out
