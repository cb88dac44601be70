"""Plain-text ``key=value`` configuration.

One key per line, ``#`` starts a comment.  Keys are namespaced by section::

    profile=tiny
    net.arch=dpn
    net.stages=2
    synth.height=96
    train.lr=2e-5

``profile`` picks the base defaults (``default`` or ``tiny``) before the
remaining keys are applied.  Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

DEFAULT_FRONTEND = "64,64,M,128,128,M,256,256,256,256,M,512,512,256,128"
TINY_FRONTEND = "16,16,M,32,32,M,64,64,64,64,M,128,128,64,32"


class ConfigError(ValueError):
    pass


def parse_frontend(spec: str) -> tuple[int | str, ...]:
    items: list[int | str] = []
    for tok in spec.split(","):
        tok = tok.strip()
        if tok.upper() == "M":
            items.append("M")
        elif tok:
            try:
                width = int(tok)
            except ValueError:
                raise ConfigError(f"frontend entry {tok!r} is neither a width nor 'M'") from None
            if width <= 0:
                raise ConfigError(f"frontend width must be positive, got {width}")
            items.append(width)
    if not any(isinstance(i, int) for i in items):
        raise ConfigError("frontend needs at least one conv layer")
    return tuple(items)


def format_frontend(layers) -> str:
    return ",".join(str(x) for x in layers)


def parse_limbs(spec: str) -> tuple[tuple[int, int], ...]:
    limbs = []
    for tok in spec.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            a, b = (int(v) for v in tok.split("-"))
        except ValueError:
            raise ConfigError(f"limb {tok!r} must look like 'a-b'") from None
        limbs.append((a, b))
    return tuple(limbs)


def format_limbs(limbs) -> str:
    return ",".join(f"{a}-{b}" for a, b in limbs)


@dataclass(frozen=True)
class NetworkConfig:
    arch: str = "dpn"
    stages: int = 3
    keypoints: int = 19
    pafs: int = 38
    frontend: tuple = field(default_factory=lambda: parse_frontend(DEFAULT_FRONTEND))
    residual_width: int = 128
    dense_width: int = 64
    growth: int = 48
    bottleneck_width: int = 256
    cardinality: int = 32
    blocks_first: int = 2
    blocks: int = 10
    baseline_width: int = 128
    baseline_first_mid: int = 512
    baseline_mid: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("dpn", "baseline"):
            raise ConfigError(f"net.arch must be 'dpn' or 'baseline', got {self.arch!r}")
        if self.stages < 1:
            raise ConfigError(f"net.stages must be >= 1, got {self.stages}")
        if self.pafs % 2:
            raise ConfigError(f"net.pafs must be even (x,y per limb), got {self.pafs}")
        for name in ("keypoints", "pafs", "residual_width", "dense_width", "growth",
                     "bottleneck_width", "cardinality", "baseline_width",
                     "baseline_first_mid", "baseline_mid"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"net.{name} must be positive, got {getattr(self, name)}")
        if self.blocks_first < 0 or self.blocks < 0:
            raise ConfigError("net.blocks_first and net.blocks must be non-negative")
        if self.bottleneck_width % self.cardinality:
            raise ConfigError(f"net.bottleneck_width {self.bottleneck_width} not divisible "
                              f"by net.cardinality {self.cardinality}")

    @property
    def stride(self) -> int:
        return 2 ** sum(1 for x in self.frontend if x == "M")

    @property
    def feature_channels(self) -> int:
        return [x for x in self.frontend if x != "M"][-1]

    def stage_in_channels(self, t: int) -> int:
        return self.feature_channels if t == 1 else self.feature_channels + self.keypoints + self.pafs

    def blocks_in_stage(self, t: int) -> int:
        return self.blocks_first if t == 1 else self.blocks

    def replace(self, **changes) -> NetworkConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TargetParams:
    sigma: float = 7.0
    paf_halfwidth: float | None = None  # None -> one output stride

    def halfwidth(self, stride: int) -> float:
        return float(stride) if self.paf_halfwidth is None else self.paf_halfwidth


@dataclass(frozen=True)
class TrainParams:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-4
    momentum: float = 0.9
    freeze_frontend: bool = True
    n_train: int = 1000
    n_eval: int = 50
    log_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"train.batch must be >= 1, got {self.batch}")


PROFILES: dict[str, dict[str, str]] = {
    "default": {},
    "tiny": {
        "net.keypoints": "6",
        "net.pafs": "8",
        "net.frontend": TINY_FRONTEND,
        "net.residual_width": "32",
        "net.dense_width": "16",
        "net.growth": "8",
        "net.bottleneck_width": "32",
        "net.cardinality": "4",
        "net.blocks_first": "1",
        "net.blocks": "3",
        "net.baseline_width": "32",
        "net.baseline_first_mid": "128",
        "net.baseline_mid": "32",
        "net.stages": "2",
        "synth.height": "96",
        "synth.width": "96",
        "train.lr": "3e-5",
    },
}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, current: Any, key: str):
    try:
        if isinstance(current, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float) or current is None:
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def _apply(obj, prefix: str, kv: dict[str, str], special=None):
    changes = {}
    for f in dataclasses.fields(obj):
        key = f"{prefix}.{f.name}"
        if key not in kv:
            continue
        if special and f.name in special:
            changes[f.name] = special[f.name](kv[key])
        else:
            changes[f.name] = _coerce(kv[key], getattr(obj, f.name), key)
    return dataclasses.replace(obj, **changes) if changes else obj


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs, assembled from one key=value file."""

    net: NetworkConfig
    synth: Any
    target: TargetParams
    train: TrainParams
    profile: str = "default"

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> RunConfig:
        from .synth import SynthParams

        profile = kv.get("profile", "default")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        merged = {**PROFILES[profile], **{k: v for k, v in kv.items() if k != "profile"}}
        known = {"profile"}
        sections = {
            "net": NetworkConfig(),
            "synth": SynthParams(),
            "target": TargetParams(),
            "train": TrainParams(),
        }
        for prefix, obj in sections.items():
            known |= {f"{prefix}.{f.name}" for f in dataclasses.fields(obj)}
        unknown = sorted(set(merged) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        net = _apply(sections["net"], "net", merged, {"frontend": parse_frontend})
        synth = _apply(sections["synth"], "synth", merged, {"limbs": parse_limbs})
        target = _apply(sections["target"], "target", merged)
        train = _apply(sections["train"], "train", merged)
        return cls(net=net, synth=synth, target=target, train=train, profile=profile)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_kv(parse_kv(p.read_text(), str(p)))

    @classmethod
    def profile_defaults(cls, profile: str = "default", **overrides: str) -> RunConfig:
        kv = {"profile": profile}
        kv.update(overrides)
        return cls.from_kv(kv)

    def to_text(self) -> str:
        lines = [f"profile={self.profile}"]
        for prefix, obj in (("net", self.net), ("synth", self.synth),
                            ("target", self.target), ("train", self.train)):
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if f.name == "frontend":
                    value = format_frontend(value)
                elif f.name == "limbs":
                    value = format_limbs(value)
                elif value is None:
                    continue
                lines.append(f"{prefix}.{f.name}={value}")
        return "\n".join(lines) + "\n"


def network_to_text(cfg: NetworkConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "frontend":
            value = format_frontend(value)
        lines.append(f"net.{f.name}={value}")
    return "\n".join(lines) + "\n"


def network_from_text(text: str) -> NetworkConfig:
    kv = parse_kv(text, "<network echo>")
    base = NetworkConfig()
    unknown = sorted(set(kv) - {f"net.{f.name}" for f in dataclasses.fields(base)})
    if unknown:
        raise ConfigError(f"unknown network key {unknown[0]!r}")
    return _apply(base, "net", kv, {"frontend": parse_frontend})
