"""Run configuration as flat ``section.key = value`` text.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected so a
typo can't silently fall back to a default. ``dump`` writes every key in a
fixed order, which is what the run manifest stores.
"""

from dataclasses import dataclass, field, fields, replace

from .errors import InvalidArgument
from .ilg import IlgConfig
from .localize import INFLATION, NMS_THRESHOLD, SWEEP_MAX, SWEEP_STEP
from .ptlr import THETA_SCHEDULE, PtlrConfig


class ConfigError(InvalidArgument):
    pass


@dataclass(frozen=True)
class DataSection:
    ann: str = ""  # annotation JSON-lines; empty means generate synthetic data
    features_dir: str = ""
    synth_C: int = 3
    synth_D: int = 16
    synth_videos: int = 40
    synth_T_min: int = 40
    synth_T_max: int = 80
    synth_snr: float = 4.0
    synth_seed: int = -1  # -1: use the run seed


@dataclass(frozen=True)
class IlgSection:
    lr: float = 1e-4
    iterations: int = 1500
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5
    s_min: float = 0.5
    s_max: float = 2.0
    hidden: int = 256


@dataclass(frozen=True)
class PtlrSection:
    branches: int = 3
    stages: int = 3
    schedule: tuple = THETA_SCHEDULE
    lr: float = 1e-3
    iterations: int = 300
    hidden: int = 256
    cold_start: bool = False


@dataclass(frozen=True)
class InferSection:
    nms: float = NMS_THRESHOLD
    sweep_step: float = SWEEP_STEP
    sweep_max: float = SWEEP_MAX
    inflation: float = INFLATION


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    ilg: IlgSection = field(default_factory=IlgSection)
    ptlr: PtlrSection = field(default_factory=PtlrSection)
    infer: InferSection = field(default_factory=InferSection)

    def __post_init__(self):
        p = self.ptlr
        if len(p.schedule) < p.stages:
            raise ConfigError(f"ptlr.schedule has {len(p.schedule)} entries but ptlr.stages = {p.stages}")
        for name, value in [("ptlr.schedule", t) for t in p.schedule] + [
            ("infer.nms", self.infer.nms), ("infer.sweep_max", self.infer.sweep_max),
            ("ilg.alpha", self.ilg.alpha), ("ilg.beta", self.ilg.beta), ("ilg.gamma", self.ilg.gamma),
        ]:
            if not 0 <= value <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if p.stages < 0 or p.branches < 1 or p.iterations < 0 or self.ilg.iterations < 0:
            raise ConfigError("stage, branch and iteration counts must be non-negative (branches >= 1)")
        if not 0 < self.ilg.s_min <= self.ilg.s_max:
            raise ConfigError(f"need 0 < ilg.s_min <= ilg.s_max, got {self.ilg.s_min}, {self.ilg.s_max}")
        if not self.infer.sweep_step > 0 or self.infer.inflation < 0:
            raise ConfigError("infer.sweep_step must be positive and infer.inflation non-negative")

    def ilg_config(self):
        s = self.ilg
        return IlgConfig(lr=s.lr, iterations=s.iterations, alpha=s.alpha, beta=s.beta, gamma=s.gamma,
                         s_range=(s.s_min, s.s_max), hidden=s.hidden, seed=self.seed)

    def ptlr_config(self, stages=None):
        p = self.ptlr
        return PtlrConfig(branches=p.branches, stages=p.stages if stages is None else stages,
                          schedule=tuple(p.schedule), lr=p.lr, iterations=p.iterations,
                          hidden=p.hidden, cold_start=p.cold_start, seed=self.seed)

    def synth_kwargs(self):
        d = self.data
        return dict(C=d.synth_C, D=d.synth_D, videos=d.synth_videos, T_range=(d.synth_T_min, d.synth_T_max),
                    snr=d.synth_snr, seed=self.seed if d.synth_seed < 0 else d.synth_seed)

    def infer_kwargs(self):
        i = self.infer
        return dict(nms_threshold=i.nms, inflation=i.inflation, step=i.sweep_step, upper=i.sweep_max)


_SECTIONS = ("data", "ilg", "ptlr", "infer")


def _parse_value(key, text, default):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flat_defaults(config):
    out = {"seed": config.seed, "out": config.out}
    for name in _SECTIONS:
        section = getattr(config, name)
        for f in fields(section):
            out[f"{name}.{f.name}"] = getattr(section, f.name)
    return out


def from_pairs(pairs, base=None):
    """Apply ``{dotted key: text value}`` on top of ``base`` (defaults when None)."""
    base = base or RunConfig()
    defaults = _flat_defaults(base)
    top, sections = {}, {name: {} for name in _SECTIONS}
    for key, text in pairs.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        value = _parse_value(key, text, defaults[key])
        if "." in key:
            section, name = key.split(".", 1)
            sections[section][name] = value
        else:
            top[key] = value
    return replace(base, **top, **{name: replace(getattr(base, name), **kv) for name, kv in sections.items()})


def parse(text, base=None):
    pairs = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        pairs[key.strip()] = value.strip()
    return from_pairs(pairs, base)


def load(path, base=None):
    with open(path) as fh:
        return parse(fh.read(), base)


def dump(config):
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in _flat_defaults(config).items())
