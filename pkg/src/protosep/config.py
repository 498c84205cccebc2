"""Flat key=value run configuration.

One file format drives every entry point: lines of ``key=value``, with
blank lines and ``#`` comments ignored. Every field of the dataset,
model, schedule, loss, and attack configurations is addressable; CLI
flags override file values, which override the defaults below.
"""

from .attacks import AttackConfig
from .autodiff import InvalidArgumentError
from .backbone import BackboneConfig
from .data import SyntheticDatasetConfig
from .losses import LossConfig
from .model import ModelConfig
from .training import FastAdvConfig, TrainSchedule

EPS_SMALL = 2.0 / 255.0
EPS_LARGE = 8.0 / 255.0

DEFAULTS = {
    "data.classes": "8",
    "data.families": "4",
    "data.image_size": "64",
    "data.train_per_class": "200",
    "data.test_per_class": "50",
    "data.texture_seed": "7",
    "data.patch_size": "12",

    "model.variant": "full",
    "model.prototypes_per_class": "5",
    "model.prototype_dim": "32",
    "model.gamma": "1e-05",
    "backbone.stages": "16:2,32:2,64:2",

    "train.warmup_epochs": "5",
    "train.warmup_lr": "0.0003",
    "train.joint_epochs": "25",
    "train.joint_lr": "0.003",
    "train.joint_decay": "0.1",
    "train.joint_decay_every": "10",
    "train.classifier_epochs": "15",
    "train.classifier_lr": "0.0003",
    "train.batch_size": "75",

    "loss.lambda1": "10.0",
    "loss.lambda2": "0.08",

    "train.fast_adv": "false",
    "train.fast_adv_eps": repr(EPS_LARGE),
    "train.fast_adv_alpha": repr(1.25 * EPS_LARGE),

    "attack.kind": "pgd",
    "attack.eps": repr(EPS_LARGE),
    "attack.alpha": repr(EPS_LARGE / 4.0),
    "attack.steps": "10",
    "attack.mu": "1.0",
    "attack.target": "joint",
}


def parse_config_text(text):
    """Parse key=value lines; comments and blanks are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise InvalidArgumentError(
                f"config line {lineno} is not key=value: {line!r}")
        out[key.strip()] = value.strip()
    return out


def format_config(cfg):
    return "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg)) + "\n"


def load_config(path=None, overrides=None):
    """Defaults, overlaid with an optional file, overlaid with overrides.

    Unknown keys are rejected so a typo cannot silently fall back to a
    default.
    """
    cfg = dict(DEFAULTS)
    for source, entries in (("config file", _read(path)),
                            ("override", overrides or {})):
        for key, value in entries.items():
            if key not in DEFAULTS:
                raise InvalidArgumentError(
                    f"unknown {source} key {key!r}")
            cfg[key] = str(value)
    return cfg


def _read(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def as_int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError:
        raise InvalidArgumentError(f"{key} must be an integer, "
                                   f"got {cfg[key]!r}") from None


def as_float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError:
        raise InvalidArgumentError(f"{key} must be a number, "
                                   f"got {cfg[key]!r}") from None


def as_bool(cfg, key):
    value = cfg[key].lower()
    if value in ("true", "1", "yes", "on"):
        return True
    if value in ("false", "0", "no", "off"):
        return False
    raise InvalidArgumentError(f"{key} must be a boolean, got {cfg[key]!r}")


def parse_stages(text):
    stages = []
    for part in text.split(","):
        chunk = part.strip().split(":")
        if len(chunk) != 2:
            raise InvalidArgumentError(
                f"backbone stage {part!r} is not channels:convs")
        stages.append((int(chunk[0]), int(chunk[1])))
    return tuple(stages)


def dataset_config(cfg):
    ds = SyntheticDatasetConfig(
        n_classes=as_int(cfg, "data.classes"),
        n_families=as_int(cfg, "data.families"),
        image_size=as_int(cfg, "data.image_size"),
        train_per_class=as_int(cfg, "data.train_per_class"),
        test_per_class=as_int(cfg, "data.test_per_class"),
        texture_seed=as_int(cfg, "data.texture_seed"),
        patch_size=as_int(cfg, "data.patch_size"))
    ds.validate()
    return ds


def model_config(cfg):
    backbone = BackboneConfig(input_size=as_int(cfg, "data.image_size"),
                              stages=parse_stages(cfg["backbone.stages"]))
    return ModelConfig(
        n_classes=as_int(cfg, "data.classes"),
        variant=cfg["model.variant"],
        prototypes_per_class=as_int(cfg, "model.prototypes_per_class"),
        prototype_dim=as_int(cfg, "model.prototype_dim"),
        gamma=as_float(cfg, "model.gamma"),
        backbone=backbone)


def train_schedule(cfg):
    return TrainSchedule(
        warmup_epochs=as_int(cfg, "train.warmup_epochs"),
        warmup_lr=as_float(cfg, "train.warmup_lr"),
        joint_epochs=as_int(cfg, "train.joint_epochs"),
        joint_lr=as_float(cfg, "train.joint_lr"),
        joint_decay=as_float(cfg, "train.joint_decay"),
        joint_decay_every=as_int(cfg, "train.joint_decay_every"),
        classifier_epochs=as_int(cfg, "train.classifier_epochs"),
        classifier_lr=as_float(cfg, "train.classifier_lr"),
        batch_size=as_int(cfg, "train.batch_size")).validate()


def loss_config(cfg):
    """Loss weights; the no-regularization baseline zeroes both lambdas."""
    variant = cfg["model.variant"]
    lam1 = 0.0 if variant == "baseline" else as_float(cfg, "loss.lambda1")
    lam2 = 0.0 if variant == "baseline" else as_float(cfg, "loss.lambda2")
    return LossConfig(lambda1=lam1, lambda2=lam2,
                      batch_size=as_int(cfg, "train.batch_size"))


def fast_adv_config(cfg):
    if not as_bool(cfg, "train.fast_adv"):
        return None
    return FastAdvConfig(eps=as_float(cfg, "train.fast_adv_eps"),
                         alpha=as_float(cfg, "train.fast_adv_alpha")).validate()


def attack_config(cfg):
    return AttackConfig(kind=cfg["attack.kind"],
                        eps=as_float(cfg, "attack.eps"),
                        alpha=as_float(cfg, "attack.alpha"),
                        steps=as_int(cfg, "attack.steps"),
                        mu=as_float(cfg, "attack.mu"),
                        target_loss=cfg["attack.target"])
