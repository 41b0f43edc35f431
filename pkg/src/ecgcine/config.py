"""Run configuration: built-in profiles, JSON files and dotted-path overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .downstream import DownstreamConfig
from .errors import ConfigError
from .flow import FlowConfig
from .pamae import PaMaeConfig
from .vae import VaeConfig

PROFILES = ("smoke", "toy", "full-phantom")
ABLATION_VARIANTS = ("baseline", "no_phase_head", "no_template", "no_condition")


@dataclass
class PhantomConfig:
    n_subjects: int = 286
    fractions: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        self.fractions = tuple(self.fractions)


@dataclass
class GenerateConfig:
    split: str = "test"
    n_records: int = 50
    batch: int = 8
    n_previews: int = 4


@dataclass
class AblateConfig:
    variants: tuple = ABLATION_VARIANTS
    alphas: tuple = (0.0, 0.5, 1.0, 2.0)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.alphas = tuple(float(a) for a in self.alphas)
        self.seeds = tuple(int(s) for s in self.seeds)


@dataclass
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    device: str = "cpu"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    pa_mae: PaMaeConfig = field(default_factory=PaMaeConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    amdf: FlowConfig = field(default_factory=FlowConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def content_hash(self) -> str:
        return config_hash(self.to_dict())


SECTIONS = {
    "phantom": PhantomConfig,
    "pa_mae": PaMaeConfig,
    "vae": VaeConfig,
    "amdf": FlowConfig,
    "generate": GenerateConfig,
    "downstream": DownstreamConfig,
    "ablate": AblateConfig,
}

# Values that differ from the section defaults, per profile.
_PROFILE_OVERRIDES: dict[str, dict] = {
    "smoke": {
        "phantom": {"n_subjects": 50},
        "pa_mae": {"epochs": 2, "lr": 1e-3},
        "vae": {"epochs": 2, "clip_frames": 10},
        "amdf": {"epochs": 2, "lr": 1e-3, "width": 32, "depth": 1, "patch": (1, 4, 4), "steps": 5},
        "generate": {"n_records": 6, "n_previews": 1},
        "downstream": {"ratios": (0.0, 1.0), "n_real": 10, "pretrain_epochs": 2, "finetune_epochs": 2,
                       "seeds": (0,), "gen_steps": 5, "tasks": ("regression",)},
        "ablate": {"seeds": (0,)},
    },
    "toy": {
        "phantom": {"n_subjects": 286},
        "pa_mae": {"epochs": 15, "lr": 1e-3},
        "vae": {"epochs": 16, "clip_frames": 10},
        "amdf": {"epochs": 40, "lr": 1e-3, "patch": (1, 4, 4), "schedule": "cosine", "warmup_steps": 100},
        "downstream": {"pretrain_epochs": 30, "finetune_epochs": 60, "norm_target": True, "encoder_lr_scale": 0.1},
    },
    "full-phantom": {
        "phantom": {"n_subjects": 1000},
        "pa_mae": {"epochs": 30, "lr": 1e-3},
        "vae": {"epochs": 30, "clip_frames": 10},
        "amdf": {"epochs": 60, "lr": 5e-4, "schedule": "cosine", "warmup_steps": 200},
        "downstream": {"n_real": 150, "pretrain_epochs": 50, "finetune_epochs": 100, "norm_target": True,
                       "encoder_lr_scale": 0.1},
    },
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_hash(d: dict) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, no whitespace)."""
    blob = json.dumps(_jsonable(d), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def profile_dict(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError("profile", f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    base = RunConfig(profile=name).to_dict()
    return _merge(base, _jsonable(_PROFILE_OVERRIDES[name]), "")


def _merge(base: dict, update: dict, prefix: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(path, "unknown field")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, f"expected an object, got {type(value).__name__}")
            out[key] = _merge(out[key], value, path + ".")
        else:
            out[key] = value
    return out


def _coerce(path: str, value: Any, like: Any) -> Any:
    """Check ``value`` against the type of the default ``like``."""
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(like, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(like, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(like, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if like:
            return [_coerce(f"{path}[{i}]", v, like[0]) for i, v in enumerate(value)]
        return list(value)
    return value


def _build_section(name: str, cls, values: dict):
    defaults = asdict(cls())
    kwargs = {}
    for key, value in values.items():
        kwargs[key] = _coerce(f"{name}.{key}", value, defaults[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        field_name = next((k for k in defaults if msg.startswith(k + " ")), None)
        raise ConfigError(f"{name}.{field_name}" if field_name else name, msg) from exc


def from_dict(d: dict) -> RunConfig:
    """Validate a full or partial config dict layered over its profile."""
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    profile = d.get("profile", "toy")
    if not isinstance(profile, str):
        raise ConfigError("profile", f"expected a string, got {profile!r}")
    merged = _merge(profile_dict(profile), d, "")
    sections = {name: _build_section(name, cls, merged[name]) for name, cls in SECTIONS.items()}
    seed = _coerce("seed", merged["seed"], 0)
    device = _coerce("device", merged["device"], "")
    for variant in sections["ablate"].variants:
        if variant not in ABLATION_VARIANTS:
            raise ConfigError("ablate.variants", f"unknown ablation {variant!r}")
    if abs(sum(sections["phantom"].fractions) - 1.0) > 1e-9 or len(sections["phantom"].fractions) != 3:
        raise ConfigError("phantom.fractions", "need three split fractions summing to 1")
    return RunConfig(profile=profile, seed=seed, device=device, **sections)


def parse_override(text: str) -> tuple[str, Any]:
    """``amdf.alpha=0.5`` -> ``("amdf.alpha", 0.5)``; values are JSON, else plain strings."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.field=value")
    path, raw = text.split("=", 1)
    path = path.strip()
    if not path:
        raise ConfigError(text, "empty field path")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(d: dict, overrides) -> dict:
    out = copy.deepcopy(d)
    for item in overrides:
        path, value = parse_override(item) if isinstance(item, str) else item
        parts = path.split(".")
        node = out
        for i, part in enumerate(parts[:-1]):
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                if nxt is None and part in SECTIONS:
                    nxt = node[part] = {}
                else:
                    raise ConfigError(".".join(parts[: i + 1]), "not a config section")
            node = nxt
        node[parts[-1]] = value
    return out


def load_config(path: str | Path | None = None, profile: str | None = None, overrides=()) -> RunConfig:
    """Profile defaults, then the JSON file, then ``--set`` overrides."""
    d: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{p} is not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    if profile is not None:
        d["profile"] = profile
    d = apply_overrides(d, overrides)
    return from_dict(d)
