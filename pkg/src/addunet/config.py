"""Plain-text ``key = value`` experiment configs.

Resolution order is command-line flag, then config file, then the built-in
default. Unknown keys are rejected so a typo cannot silently fall back to a
default.
"""

from __future__ import annotations

from pathlib import Path

from .data import NoiseSpec
from .model import AddUNetConfig
from .trainer import RampSchedule, TrainConfig


class ConfigKeyError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.replace("-", ",").split(",") if v.strip()]


def _auto(conv):
    def parse(s: str):
        return "auto" if s.strip().lower() == "auto" else conv(s)
    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "depth": (int, "3"),
    "kernels": (_ints, "3,3,3"),
    "channels": (int, "16"),
    "variant": (str, "real"),
    "gated": (_bool, "true"),
    "with_classifier": (_auto(_bool), "auto"),
    "num_classes": (_auto(int), "auto"),
    "classifier_hidden": (int, "256"),
    "dtype": (str, "float32"),
    "epochs": (int, "5"),
    "batch_size": (int, "16"),
    "learning_rate": (float, "0.001"),
    "optimizer": (str, "adam"),
    "beta1": (float, "0.9"),
    "beta2": (float, "0.999"),
    "adam_eps": (float, "1e-08"),
    "seed": (int, "0"),
    "crop_size": (int, "0"),
    "noise": (str, "awgn:0.2"),
    "noise_seed": (int, "0"),
    "lambda_max": (float, "0.1"),
    "ramp_start": (_auto(float), "auto"),
    "ramp_end": (_auto(float), "auto"),
    "epsilon": (float, "0.001"),
    "checkpoint_every": (int, "0"),
    "eval_every": (int, "1"),
    "val_fraction": (float, "0.1"),
    "restore_best": (_bool, "true"),
}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in SCHEMA:
            raise ConfigKeyError(f"{source}:{n}: unknown key {k!r}")
        out[k] = v
    return out


def resolve(path=None, overrides: dict[str, str] | None = None) -> dict:
    """Merge defaults, file and overrides; values come back parsed."""
    raw = {k: d for k, (_, d) in SCHEMA.items()}
    if path is not None:
        raw.update(parse_kv(Path(path).read_text(), str(path)))
    for k, v in (overrides or {}).items():
        k = k.replace("-", "_")
        if k not in SCHEMA:
            raise ConfigKeyError(f"unknown key {k!r}")
        raw[k] = v
    resolved = {}
    for k, v in raw.items():
        try:
            resolved[k] = SCHEMA[k][0](v)
        except ValueError as e:
            raise ConfigKeyError(f"bad value for {k}: {v!r} ({e})") from None
    return resolved


def echo(resolved: dict) -> str:
    """Canonical text form of a resolved config, stable across runs."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, list):
            return ",".join(str(x) for x in v)
        return str(v)
    return "".join(f"{k} = {fmt(resolved[k])}\n" for k in sorted(resolved))


def build_configs(resolved: dict, num_labels: int = 0) -> tuple[AddUNetConfig, TrainConfig]:
    """Turn a resolved dict into model and training configs.

    ``auto`` classifier settings switch the head on when the dataset carries
    labels and the classification weight can become nonzero.
    """
    r = dict(resolved)
    if r["with_classifier"] == "auto":
        r["with_classifier"] = num_labels >= 2 and r["lambda_max"] > 0
    if r["num_classes"] == "auto":
        r["num_classes"] = max(num_labels, 2)
    model = AddUNetConfig(
        depth=r["depth"], kernels=r["kernels"], channels=r["channels"], variant=r["variant"],
        gated=r["gated"], with_classifier=r["with_classifier"], num_classes=r["num_classes"],
        classifier_hidden=r["classifier_hidden"],
    )
    epochs = r["epochs"]
    ramp = RampSchedule(
        r["lambda_max"],
        0.2 * epochs if r["ramp_start"] == "auto" else r["ramp_start"],
        0.5 * epochs if r["ramp_end"] == "auto" else r["ramp_end"],
    )
    train = TrainConfig(
        epochs=epochs, batch_size=r["batch_size"], learning_rate=r["learning_rate"],
        optimizer=r["optimizer"], beta1=r["beta1"], beta2=r["beta2"], adam_eps=r["adam_eps"],
        seed=r["seed"], crop_size=r["crop_size"], noise=NoiseSpec.parse(r["noise"], r["noise_seed"]),
        ramp=ramp, epsilon=r["epsilon"], checkpoint_every=r["checkpoint_every"],
        eval_every=r["eval_every"], val_fraction=r["val_fraction"], restore_best=r["restore_best"],
    )
    return model, train
