"""Run configuration: line-oriented `key = value` files plus overrides.

Keys are dotted (section.name); the full key set with defaults lives in
DEFAULTS and unknown keys are rejected. Values are typed by their default
(int, float, bool, str, or comma-separated float list where `inf` is
allowed). Every command writes its fully resolved configuration, prefixed
with the toolkit version, next to its outputs.
"""

from __future__ import annotations

import math
from pathlib import Path

from . import __version__


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    # synthetic corpus
    "corpus.speakers": 16,
    "corpus.utts_per_speaker": 10,
    "corpus.utt_min": 1.5,
    "corpus.utt_max": 2.5,
    "corpus.noises": 4,
    "corpus.noise_dur": 5.0,
    "corpus.rirs": 8,
    "corpus.rir_dur": 0.05,
    "corpus.rir_tail": 0.25,
    # mixture simulation
    "simulate.n": 10,
    "simulate.n_spk": 2,
    "simulate.umin": 10,
    "simulate.umax": 20,
    "simulate.beta": 2.0,
    "simulate.snrs": (10.0, 15.0, 20.0),
    # features
    "features.n_mels": 23,
    "features.splice": 7,
    "features.subsample": 10,
    # model
    "model.kind": "sa",
    "model.dim": 64,
    "model.heads": 4,
    "model.ffn": 256,
    "model.blocks": 2,
    "model.speakers": 2,
    "model.residual": False,
    "model.layers": 5,        # blstm
    "model.hidden": 256,      # blstm
    "model.dc_layer": 2,      # blstm
    "model.embed": 256,       # blstm
    # training
    "train.batch": 8,
    "train.epochs": 40,
    "train.chunk": 500,
    "train.warmup": 2000,
    "train.lr_mode": "noam",
    "train.lr": 1e-3,
    "train.average": 10,
    "train.alpha": 0.5,
    "train.valid_frac": 0.1,
    # adaptation
    "adapt.lr": 1e-5,
    "adapt.epochs": 100,
    # inference
    "infer.threshold": 0.5,
    "infer.median": 11,
    # scoring
    "score.collar": 0.25,
    "score.step": 0.01,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return math.inf if raw.lower() == "inf" else float(raw)
        if isinstance(default, tuple):
            return tuple(math.inf if v.strip().lower() == "inf" else float(v)
                         for v in raw.split(",") if v.strip())
        return raw
    except (ValueError, TypeError):
        raise ConfigError(f"bad value for key {key!r}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, eq, raw = stripped.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`, "
                              f"got {stripped!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def resolve(config_file: str | Path | None = None,
            overrides: list[str] | None = None) -> dict[str, object]:
    """defaults <- config file <- `key=value` override strings."""
    cfg = dict(DEFAULTS)
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        cfg.update(parse_config_text(path.read_text(), str(path)))
    for item in overrides or []:
        key, eq, raw = item.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _parse_value(key, raw)
    return cfg


def emit(cfg: dict[str, object]) -> str:
    lines = [f"# eend {__version__}"]
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, tuple):
            val = ",".join("inf" if math.isinf(v) else repr(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: dict[str, object], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(emit(cfg))
