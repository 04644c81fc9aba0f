"""Experiment configuration: one versioned JSON document per run.

Every block maps onto a configuration dataclass of the package.  Parsing
rejects unknown keys and ill-typed values, naming the offending key and the
line it sits on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, List, Tuple

from .comms import ChannelModel
from .env import BeliefConfig, EnvConfig, RewardSpec, ScenarioConfig, TrainingConfig
from .errors import ConfigError
from .learner import LearnerConfig, StepSchedule

SCHEMA_VERSION = 1
CREDIT_METHODS = ("exact", "mc", "factorized", "uniform")


@dataclass
class ControlConfig:
    feedback_linearization: bool = True
    action_scale: Tuple[float, float] = (2.0, 0.2)
    raw_action_scale: Tuple[float, float] = (2.0, 0.05)


@dataclass
class CreditConfig:
    method: str = "exact"
    samples: int = 20  # permutations per step for "mc"
    baseline: Tuple[float, float] = (0.0, 0.0)  # policy output of non-members

    def __post_init__(self):
        if self.method not in CREDIT_METHODS:
            raise ValueError(f"method must be one of {CREDIT_METHODS}")
        if self.samples < 1:
            raise ValueError("samples must be at least 1")


@dataclass
class TrainingBlock:
    episodes: int = 2000
    eval_interval: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be nonnegative")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be at least 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be nonnegative")


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    channel: ChannelModel = field(default_factory=ChannelModel)
    belief: BeliefConfig = field(default_factory=BeliefConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    credit: CreditConfig = field(default_factory=CreditConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    output_dir: str = "runs"

    def env_config(self, track_connectivity: bool = False) -> EnvConfig:
        return EnvConfig(
            scenario=self.scenario,
            channel=self.channel,
            belief=self.belief,
            feedback_linearization=self.control.feedback_linearization,
            action_scale=tuple(self.control.action_scale),
            raw_action_scale=tuple(self.control.raw_action_scale),
            track_connectivity=track_connectivity,
            credit_baseline=tuple(self.credit.baseline),
        )

    def training_config(self) -> TrainingConfig:
        t = self.training
        return TrainingConfig(t.episodes, t.eval_interval, t.checkpoint_every, self.credit.method, self.credit.samples)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """SHA-256 of the normalized document without the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, text: str = "") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION}){_at(text, ['schema_version'])}"
            )
        cfg = _build(cls, d, [], text)
        if not cfg.seeds or len(set(cfg.seeds)) != len(cfg.seeds):
            raise ConfigError(f"seeds must be a non-empty list of distinct integers{_at(text, ['seeds'])}")
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(d, text)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_json(text)


# ---------------------------------------------------------------------------
# parsing


def _line_of(text: str, path: List[str]) -> int:
    """Line of the last key in ``path``, following the nesting; 0 if unknown."""
    pos = 0
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return 0
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _at(text: str, path: List[str]) -> str:
    line = _line_of(text, path) if text else 0
    return f" (line {line})" if line else ""


def _bad(path, text, msg):
    return ConfigError(f"{'.'.join(path)}: {msg}{_at(text, path)}")


def _number(v, path, text, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise _bad(path, text, f"expected {'an integer' if integer else 'a number'}, got {json.dumps(v)}")
    if integer:
        if isinstance(v, float) and not v.is_integer():
            raise _bad(path, text, f"expected an integer, got {v}")
        return int(v)
    return float(v)


def _value(default: Any, v: Any, path, text):
    """Coerce ``v`` to the type of ``default``."""
    if dataclasses.is_dataclass(default):
        return _build(type(default), v, path, text)
    if isinstance(default, StepSchedule):
        if not isinstance(v, dict) or set(v) - {"kind", "a", "b"} or "kind" not in v or "a" not in v:
            raise _bad(path, text, 'expected {"kind": ..., "a": ..., "b": ...}')
        try:
            return StepSchedule(str(v["kind"]), _number(v["a"], path, text), _number(v.get("b", 1.0), path, text))
        except ValueError as exc:
            raise _bad(path, text, str(exc)) from None
    if isinstance(default, bool):
        if not isinstance(v, bool):
            raise _bad(path, text, f"expected true or false, got {json.dumps(v)}")
        return v
    if isinstance(default, int):
        return _number(v, path, text, integer=True)
    if isinstance(default, float):
        return _number(v, path, text)
    if isinstance(default, str):
        if not isinstance(v, str):
            raise _bad(path, text, f"expected a string, got {json.dumps(v)}")
        return v
    if isinstance(default, (tuple, list)):
        if not isinstance(v, list):
            raise _bad(path, text, "expected a list")
        integer = bool(default) and all(isinstance(x, int) and not isinstance(x, bool) for x in default)
        # integer tuples are layer sizes and may change length; float tuples are fixed vectors
        if isinstance(default, tuple) and not integer and len(v) != len(default):
            raise _bad(path, text, f"expected {len(default)} entries, got {len(v)}")
        items = [_number(x, path, text, integer) for x in v]
        return tuple(items) if isinstance(default, tuple) else items
    if default is None:
        if v is None:
            return None
        return _number(v, path, text)
    raise _bad(path, text, "unsupported field type")


def _build(cls, d, path, text):
    if not isinstance(d, dict):
        raise _bad(path, text, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k in d:
        if k not in fields:
            raise ConfigError(f"unknown key {'.'.join(path + [k])!r}{_at(text, path + [k])}")
    proto = cls()
    kwargs = {}
    for k, v in d.items():
        kwargs[k] = _value(getattr(proto, k), v, path + [k], text)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        where = path if path else [next(iter(d), "")]
        raise ConfigError(f"{'.'.join(path) or 'config'}: {exc}{_at(text, where)}") from None


def _to_plain(obj):
    if isinstance(obj, StepSchedule):
        return obj.to_json()
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if not f.name.startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    return obj


# ---------------------------------------------------------------------------
# presets


def smoke_config() -> ExperimentConfig:
    """The small 3-vehicle platoon used by the end-to-end learning check."""
    return ExperimentConfig(
        scenario=ScenarioConfig(n_agents=3, horizon=200, reward=RewardSpec()),
        belief=BeliefConfig(n_particles=32),
        learner=LearnerConfig(
            hidden=(32, 32),
            batch_size=64,
            alpha=StepSchedule("constant", 1e-2),
            beta=StepSchedule("constant", 5e-3),
            warmup=1000,
            update_every=10,
            init_log_std=-1.5,
            ou_sigma=0.1,
            reward_scale=100.0,
        ),
        training=TrainingBlock(episodes=2000, eval_interval=10),
        seeds=list(range(10)),
        output_dir="runs/smoke",
    )
