"""Run configuration: simulator parameters, learner hyperparameters, INI loading.

Every field can be overridden from an INI file (sections ``[env]``, ``[graph]``,
``[sage]``, ``[agent]``, ``[run]``) or from environment variables named
``V2X_<SECTION>_<FIELD>`` (e.g. ``V2X_ENV_N_SUBCHANNELS=10``).
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

ENV_PREFIX = "V2X_"


class ConfigError(ValueError):
    """Invalid or malformed configuration."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


@dataclass
class EnvConfig:
    n_subchannels: int = 20
    power_levels_dbm: tuple = (23.0, 10.0, 5.0)
    cue_power_dbm: float = 23.0  # assumption: CUE power not stated
    bandwidth_hz: float = 1.5e6
    noise_dbm: float = -114.0
    deadline_s: float = 0.1
    payload_bits: int = 2 * 1060 * 8
    lambda_c: float = 0.3
    lambda_p: float = 1.0
    fail_penalty: float = 10.0
    reward_mode: str = "difference"  # "literal", "shaped" or "difference", see env.step_small_scale
    carrier_ghz: float = 2.0
    veh_antenna_height_m: float = 1.5
    bs_antenna_height_m: float = 25.0
    veh_antenna_gain_dbi: float = 3.0
    bs_antenna_gain_dbi: float = 8.0
    veh_noise_figure_db: float = 9.0
    bs_noise_figure_db: float = 5.0
    speed_min_mps: float = 10.0
    speed_max_mps: float = 15.0
    neighbor_threshold_m: float = 150.0
    n_destinations: int = 3
    lanes_per_direction: int = 4
    lane_width_m: float = 3.5
    map_size_m: float = 500.0
    turn_left_prob: float = 0.25
    turn_right_prob: float = 0.25
    v2i_shadow_db: float = 8.0
    v2v_shadow_db: float = 3.0
    dt_large_s: float = 0.1
    dt_small_s: float = 0.001
    slots_per_iteration: int = 5
    n_vehicles: int = 20
    dynamic: bool = False
    add_prob_inc: float = 0.02

    def __post_init__(self):
        self.power_levels_dbm = tuple(float(p) for p in self.power_levels_dbm)
        if self.n_subchannels < 1:
            raise ConfigError("n_subchannels must be >= 1")
        if len(self.power_levels_dbm) < 1 or any(
            a <= b for a, b in zip(self.power_levels_dbm, self.power_levels_dbm[1:])
        ):
            raise ConfigError("power_levels_dbm must be strictly decreasing")
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ConfigError("lambda_c must lie in [0, 1]")
        if self.reward_mode not in ("literal", "shaped", "difference"):
            raise ConfigError(f"reward_mode must be 'literal', 'shaped' or 'difference', got {self.reward_mode!r}")
        if self.deadline_s <= 0:
            raise ConfigError("deadline_s must be positive")
        if self.speed_min_mps > self.speed_max_mps:
            raise ConfigError("speed_min_mps exceeds speed_max_mps")
        if self.slots_per_iteration < 1:
            raise ConfigError("slots_per_iteration must be >= 1")
        ratio = self.deadline_s / self.dt_small_s
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("deadline_s must be a whole number of small-scale slots")

    @property
    def n_power_levels(self):
        return len(self.power_levels_dbm)

    @property
    def n_actions(self):
        return self.n_subchannels * self.n_power_levels

    @property
    def feature_dim(self):
        return 3 * self.n_subchannels

    @property
    def deadline_slots(self):
        return int(round(self.deadline_s / self.dt_small_s))


@dataclass
class GraphConfig:
    fanout: int = 5
    layers: int = 2
    complete: bool = False


@dataclass
class SageConfig:
    hidden_dim: int = 60
    out_dim: int = 20
    kappa: float = 0.9
    lr: float = 0.01
    lr_floor: float = 1e-4
    lr_decay: float = 0.99
    lr_decay_every: int = 100
    sync_every: int = 200
    update_every: int = 50
    updates_per_round: int = 120
    batch_size: int = 32
    stale_after: int = 500

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError("kappa must lie in [0, 1]")


@dataclass
class AgentConfig:
    hidden: tuple = (500, 250, 120)
    discount: float = 0.95
    lr: float = 0.005
    lr_floor: float = 1e-4
    lr_decay: float = 0.99
    lr_decay_every: int = 100
    buffer_size: int = 50_000
    batch_size: int = 64
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_fraction: float = 0.8
    reward_scale: float = 0.01
    double_q: bool = True
    use_gnn: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigError("discount must lie in [0, 1]")


@dataclass
class RunConfig:
    iterations: int = 10_000
    reset_every: int = 2000
    n_batches: int = 10
    test_resets: int = 20
    test_samples: int = 100
    vehicle_counts: tuple = (10, 20, 30)
    dynamic_steps: int = 5000
    dynamic_segments: int = 5
    seed: int = 0
    timing: bool = False

    def __post_init__(self):
        self.vehicle_counts = tuple(int(v) for v in self.vehicle_counts)
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.reset_every <= 0:
            raise ConfigError("reset_every must be positive")


@dataclass
class Config:
    env: EnvConfig = field(default_factory=EnvConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    sage: SageConfig = field(default_factory=SageConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_ini(self):
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format_value(value)}")
            lines.append("")
        return "\n".join(lines)

    def replace(self, section, **changes):
        """Copy with some fields of one section changed (re-validated)."""
        sub = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: sub})


SECTIONS = {
    "env": EnvConfig,
    "graph": GraphConfig,
    "sage": SageConfig,
    "agent": AgentConfig,
    "run": RunConfig,
}


def _format_value(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw.replace("_", ""))
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in re.split(r"[,\s]+", raw) if p]
        elem = default[0] if default else 0.0
        return tuple(_parse_value(p, elem) for p in parts)
    return raw


def _key_lines(text):
    """Map (section, key) to the 1-based line it appears on."""
    out = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", stripped)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"^([A-Za-z0-9_]+)\s*[=:]", stripped)
        if m and section is not None:
            out[(section, m.group(1).lower())] = lineno
    return out


def _apply(values_by_section, base, path=None, lines=None):
    lines = lines or {}
    updated = {}
    for section, cls in SECTIONS.items():
        current = getattr(base, section)
        changes = {}
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values_by_section.get(section, {}).items():
            line = lines.get((section, key))
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]", line, path)
            try:
                changes[key] = _parse_value(raw, getattr(current, key))
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}", line, path) from None
        try:
            updated[section] = dataclasses.replace(current, **changes)
        except ConfigError as exc:
            line = None
            for key in changes:
                line = lines.get((section, key), line)
            raise ConfigError(str(exc), line, path) from None
    unknown = set(values_by_section) - set(SECTIONS)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"unknown section [{name}]", None, path)
    return Config(**updated)


def parse_ini(text, path="<string>", base=None):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ConfigError(exc.message.splitlines()[0], line, path) from None
    values = {s: dict(parser.items(s)) for s in parser.sections()}
    return _apply(values, base or Config(), path, _key_lines(text))


def load_config(path=None, environ=None):
    """Defaults, then the INI file at ``path``, then ``V2X_*`` environment overrides."""
    cfg = Config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("config file not found", None, path)
        cfg = parse_ini(path.read_text(), path)
    return apply_environ(cfg, os.environ if environ is None else environ)


def apply_environ(cfg, environ):
    values = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in SECTIONS and key:
            values.setdefault(section, {})[key] = raw
    if not values:
        return cfg
    return _apply(values, cfg, path="<environment>")
