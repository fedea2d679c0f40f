"""One JSON config file with sections airframe, env, ppo, pid and eval."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .control import PidGains
from .dynamics import AirframeModel
from .env import EnvConfig
from .trainer import PpoConfig


@dataclass(frozen=True)
class PidSection:
    # None means: tune with Ziegler-Nichols on the configured airframe
    gains: dict | None = None
    i_limit: float = 0.3
    zn_steps_per_octave: int = 4
    zn_amplitude: float = 10.0
    zn_throttle: float = 0.5

    def resolved_gains(self) -> PidGains | None:
        return None if self.gains is None else PidGains.from_dict(self.gains)


@dataclass(frozen=True)
class EvalSection:
    script: str = "aerobatic"
    script_throttle: float = 0.3
    validation_seed: int = 12345
    validation_time: float = 10.0
    noise_sigma: float = 0.0
    bench_samples: int = 5000
    verify_probes: int = 1000


@dataclass(frozen=True)
class Config:
    airframe: AirframeModel = field(default_factory=AirframeModel)
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    pid: PidSection = field(default_factory=PidSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return {
            "airframe": self.airframe.to_dict(),
            "env": self.env.to_dict(),
            "ppo": self.ppo.to_dict(),
            "pid": asdict(self.pid),
            "eval": asdict(self.eval),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


_SECTIONS = {
    "airframe": AirframeModel,
    "env": EnvConfig,
    "ppo": PpoConfig,
    "pid": PidSection,
    "eval": EvalSection,
}


class ConfigError(ValueError):
    def __init__(self, path, line, message):
        self.path, self.line = path, line
        super().__init__(f"{path}:{line}: {message}")


def _line_of(text: str, needle: str) -> int:
    pos = text.find(f'"{needle}"')
    return text.count("\n", 0, pos) + 1 if pos >= 0 else 1


def config_from_dict(d: dict, path: str = "<config>", text: str = "") -> Config:
    if not isinstance(d, dict):
        raise ConfigError(path, 1, "top level must be an object")
    kwargs = {}
    for name, value in d.items():
        if name not in _SECTIONS:
            raise ConfigError(path, _line_of(text, name), f"unknown section {name!r}")
        cls = _SECTIONS[name]
        if not isinstance(value, dict):
            raise ConfigError(path, _line_of(text, name), f"section {name!r} must be an object")
        known = {f.name for f in fields(cls)}
        for key in value:
            if key not in known:
                raise ConfigError(path, _line_of(text, key), f"unknown key {name}.{key}")
        try:
            if hasattr(cls, "from_dict"):
                merged = {**_section_defaults(name), **value}
                kwargs[name] = cls.from_dict(merged)
            else:
                kwargs[name] = cls(**value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, _line_of(text, name), f"section {name!r}: {exc}") from None
    return Config(**kwargs)


def _section_defaults(name: str) -> dict:
    return Config().to_dict()[name]


def load_config(path: str | None) -> Config:
    if path is None:
        return Config()
    with open(path) as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(path, exc.lineno, exc.msg) from None
    return config_from_dict(d, path, text)
