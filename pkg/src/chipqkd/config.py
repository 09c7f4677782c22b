"""Experiment configuration: sectioned INI files with strict validation.

Every section maps onto one parameter dataclass.  Unknown sections or keys,
unparsable values and violated invariants raise :class:`ConfigError` with the
file and line of the offending entry.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field

from .chip import ChipParams
from .errors import ConfigError
from .finitekey import SecurityParams
from .link import DetectorParams, LinkParams
from .protocol import ProtocolParams


@dataclass(frozen=True)
class SpgdSettings:
    gain: float = 8.0
    perturbation: float = 0.05
    probe_budget: int = 10_000
    dt_s: float = 1.0
    duration_s: float = 10_000.0

    def __post_init__(self):
        if self.gain < 0 or self.perturbation <= 0 or self.dt_s <= 0 or self.duration_s < 0:
            raise ConfigError("spgd needs gain >= 0, perturbation > 0, dt_s > 0, duration_s >= 0")
        if self.probe_budget < 0:
            raise ConfigError("probe_budget must be >= 0 (0 means noiseless)")


@dataclass(frozen=True)
class ExperimentSettings:
    distances: tuple = (100.0, 125.0, 150.0, 175.0, 200.0, 225.0, 250.0, 275.0)
    optimize: bool = True
    target_error: float = 1e-4
    noise_sigma: float = 0.0
    n_avg: int = 1
    landscape_resolution: int = 128
    mc_pulses: int = 1_000_000
    mc_seeds: int = 10
    blocks: int = 100

    def __post_init__(self):
        if not self.distances or any(d < 0 for d in self.distances):
            raise ConfigError("distances must be a non-empty list of non-negative km")
        if not 0 < self.target_error < 0.1:
            raise ConfigError("target_error must lie in (0, 0.1)")
        if self.noise_sigma < 0 or self.n_avg < 1:
            raise ConfigError("noise_sigma must be >= 0 and n_avg >= 1")
        if self.landscape_resolution < 64:
            raise ConfigError("landscape_resolution must be >= 64")
        if self.mc_pulses < 1 or self.mc_seeds < 1 or self.blocks < 1:
            raise ConfigError("mc_pulses, mc_seeds and blocks must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    chip: ChipParams = field(default_factory=ChipParams)
    link: LinkParams = field(default_factory=LinkParams)
    protocol: ProtocolParams = field(default_factory=lambda: ProtocolParams(block_pulses=500_000_000_000))
    security: SecurityParams = field(default_factory=SecurityParams)
    spgd: SpgdSettings = field(default_factory=SpgdSettings)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def as_dict(self) -> dict:
        return {name: _section_values(getattr(self, name)) for name in SECTIONS if name != "detector"} | {
            "detector": _section_values(self.link.detector)
        }

    def hash(self) -> str:
        """sha256 of the canonical JSON of every resolved value."""
        blob = json.dumps(self.as_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _canonical(v):
    if isinstance(v, float):
        # repr keeps json finite and distinguishes inf from large values
        return repr(v)
    if isinstance(v, (tuple, list)):
        return [_canonical(x) for x in v]
    return v


def _section_values(obj) -> dict:
    return {f.name: _canonical(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name != "detector"}


# ---------------------------------------------------------------------------
# Value parsing


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float(s: str) -> float:
    return float(s.strip())


def _parse_opt_float(s: str):
    return None if s.strip().lower() == "none" else float(s)


def _parse_int(s: str) -> int:
    t = s.strip().replace("_", "")
    v = float(t)
    if v != int(v):
        raise ValueError(f"not an integer: {s!r}")
    return int(v)


def _parse_list(s: str) -> tuple:
    return tuple(float(x) for x in re.split(r"[,\s]+", s.strip()) if x)


def _parse_curve(s: str) -> tuple:
    """'125e3:0.70, 4e6:0.64' -> ((125e3, 0.70), (4e6, 0.64))."""
    pts = []
    for item in (x for x in s.split(",") if x.strip()):
        rate, eff = item.split(":")
        pts.append((float(rate), float(eff)))
    return tuple(pts)


def _converter(cls, name):
    special = {
        (ChipParams, "delta"): _parse_opt_float,
        (ChipParams, "gc_isolation"): _parse_opt_float,
        (DetectorParams, "eff_curve"): _parse_curve,
        (ExperimentSettings, "distances"): _parse_list,
    }
    if (cls, name) in special:
        return special[(cls, name)]
    default = next(f for f in dataclasses.fields(cls) if f.name == name).default
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return _parse_int
    return _parse_float


SECTIONS = {
    "chip": ChipParams,
    "detector": DetectorParams,
    "link": LinkParams,
    "protocol": ProtocolParams,
    "security": SecurityParams,
    "spgd": SpgdSettings,
    "experiment": ExperimentSettings,
}


def _keys(cls) -> set:
    return {f.name for f in dataclasses.fields(cls) if f.name != "detector"}


def _line_index(text: str) -> dict:
    """(section, key) -> line number; (section, None) -> header line."""
    idx, sec = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", line)
        if m:
            sec = m.group(1).strip()
            idx.setdefault((sec, None), i)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip()
        idx.setdefault((sec, key), i)
    return idx


def parse_override(text: str) -> tuple[str, str, str]:
    m = re.match(r"\s*([A-Za-z_]\w*)\.([A-Za-z_]\w*)\s*=(.*)$", text)
    if not m:
        raise ConfigError(f"override {text!r}: expected section.key=value")
    return m.group(1), m.group(2), m.group(3).strip()


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from an INI file plus ``section.key=value`` overrides."""
    entries = {}  # section -> key -> (raw value, location string)
    if path is not None:
        try:
            text = open(path).read()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        lines = _line_index(text)
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"{path}:{lines.get((sec, None), '?')}: unknown section [{sec}]")
            for key, val in cp.items(sec):
                entries.setdefault(sec, {})[key] = (val, f"{path}:{lines.get((sec, key), '?')}")
    for ov in overrides:
        sec, key, val = parse_override(ov)
        if sec not in SECTIONS:
            raise ConfigError(f"override {ov!r}: unknown section [{sec}]")
        entries.setdefault(sec, {})[key] = (val, f"override {ov!r}")
    if seed is not None:
        entries.setdefault("protocol", {})["seed"] = (str(seed), "--seed")

    built = {}
    for sec, cls in SECTIONS.items():
        kwargs, where = {}, {}
        for key, (val, loc) in entries.get(sec, {}).items():
            if key not in _keys(cls):
                raise ConfigError(f"{loc}: unknown key '{key}' in [{sec}]")
            try:
                kwargs[key] = _converter(cls, key)(val)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{loc}: bad value for {sec}.{key}: {val!r} ({exc})") from exc
            where[key] = loc
        if sec == "link":
            kwargs["detector"] = built["detector"]
        if sec == "protocol":
            kwargs.setdefault("block_pulses", 500_000_000_000)
        try:
            built[sec] = cls(**kwargs)
        except (ConfigError, ValueError) as exc:
            loc = ", ".join(sorted(set(where.values()))) or "defaults"
            raise ConfigError(f"[{sec}] invalid ({loc}): {exc}") from exc
    if built["protocol"].seed < 0:
        raise ConfigError("seed must be >= 0")
    return ExperimentConfig(
        chip=built["chip"], link=built["link"], protocol=built["protocol"],
        security=built["security"], spgd=built["spgd"], experiment=built["experiment"],
    )


def default_ini() -> str:
    """The default configuration as INI text."""
    cfg = ExperimentConfig()
    out = []
    objs = {"chip": cfg.chip, "link": cfg.link, "detector": cfg.link.detector, "protocol": cfg.protocol,
            "security": cfg.security, "spgd": cfg.spgd, "experiment": cfg.experiment}
    for sec, obj in objs.items():
        out.append(f"[{sec}]")
        for f in dataclasses.fields(obj):
            if f.name == "detector":
                continue
            v = getattr(obj, f.name)
            if sec == "chip" and f.name == "delta":
                v = "none"  # derived from gc_isolation
            elif f.name == "eff_curve":
                v = ", ".join(f"{r:g}:{e:g}" for r, e in v)
            elif f.name == "distances":
                v = ", ".join(f"{d:g}" for d in v)
            elif isinstance(v, float) and math.isinf(v):
                v = "inf"
            out.append(f"{f.name} = {v}")
        out.append("")
    return "\n".join(out)
