"""Experiment configuration: key=value pairs, optionally grouped in [sections]."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .params import ParamSet, preset

SECTIONS = ("params", "sweep", "oracle", "torus", "output")


class ConfigError(ValueError):
    pass


def _regime(v):
    s = str(v).strip().upper().replace("-", "_")
    if s in ("APPENDIX", "APPENDIXA", "APP"):
        s = "APPENDIX_A"
    if s not in ("THM1", "THM2", "APPENDIX_A"):
        raise ValueError(f"unknown regime {v!r}")
    return s


def _p(v):
    s = str(v).strip().lower()
    if s in ("inf", "infinity"):
        return "inf"
    f = Fraction(s)
    if f <= 0:
        raise ValueError("p must be positive")
    return str(f)


def _frac(v):
    return str(Fraction(str(v).strip()))


def _int_list(v):
    s = str(v).strip()
    if ":" in s:
        parts = [int(x) for x in s.split(":")]
        if len(parts) == 2:
            parts.append(1)
        a, b, c = parts
        if c <= 0 or b < a:
            raise ValueError(f"bad range {v!r}")
        return list(range(a, b + 1, c))
    out = [int(x) for x in s.replace(" ", "").split(",") if x]
    if not out:
        raise ValueError("empty list")
    return out


def _choice(*opts):
    def parse(v):
        s = str(v).strip()
        for o in opts:
            if s.upper() == o.upper():
                return o
        raise ValueError(f"expected one of {opts}, got {v!r}")
    return parse


def _positive_int(v):
    n = int(v)
    if n <= 0:
        raise ValueError("must be positive")
    return n


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# key -> (section, parser, default)
SCHEMA = {
    "regime": ("params", _regime, "THM1"),
    "p": ("params", _p, None),
    "eps": ("params", _frac, None),
    "eps1": ("params", _frac, None),
    "N": ("params", _int_list, None),
    "k0": ("params", int, None),
    "mu": ("params", float, 1.0),
    "q": ("params", _frac, None),
    "p0": ("params", _frac, None),
    "t": ("params", float, None),
    "rtol": ("params", float, None),
    "workers": ("sweep", _positive_int, None),
    "samples": ("oracle", _positive_int, 10 ** 6),
    "seed": ("oracle", int, 0),
    "functional": ("oracle", _choice("B1", "B2", "both"), "both"),
    "M": ("torus", _positive_int, 64),
    "steps": ("torus", _positive_int, 256),
    "mode": ("torus", _choice("P", "PI", "PI1"), "PI"),
    "identities_every": ("torus", int, 1),
    "strict": ("torus", _bool, True),
    "out": ("output", str, "results"),
    "prefix": ("output", str, ""),
}

_ALIASES = {"n": "N", "m": "M", "epsilon": "eps", "epsilon1": "eps1", "k_0": "k0"}


def _canonical(key: str) -> str:
    k = key.strip()
    if "." in k:
        sec, k = k.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {sec!r}")
    if k in SCHEMA:
        return k
    if k.lower() in _ALIASES:
        return _ALIASES[k.lower()]
    for name in SCHEMA:
        if name.lower() == k.lower():
            return name
    raise ConfigError(f"unknown configuration key {key!r}")


@dataclass
class ExperimentConfig:
    command: str
    values: dict = field(default_factory=dict)
    source: list = field(default_factory=list)

    def get(self, key):
        if key in self.values:
            return self.values[key]
        return SCHEMA[key][2]

    def set(self, key, raw, origin="cli"):
        name = _canonical(key)
        parser = SCHEMA[name][1]
        try:
            self.values[name] = parser(raw)
        except (ValueError, ZeroDivisionError, TypeError) as exc:
            raise ConfigError(f"bad value for {name}: {exc}") from None
        self.source.append(f"{name}={raw}")

    # -- parameter sets ---------------------------------------------------
    @property
    def N_list(self):
        return self.get("N")

    @property
    def N(self):
        ns = self.get("N")
        if ns is None:
            return None
        if len(ns) != 1:
            raise ConfigError("this command takes a single N")
        return ns[0]

    def param_set(self, N=None, default_N=200, default_k0=100) -> ParamSet:
        regime = self.get("regime")
        N = N if N is not None else (self.N or default_N)
        k0 = self.get("k0")
        k0 = default_k0 if k0 is None else k0
        mu = self.get("mu")
        p = self.get("p")
        if regime == "APPENDIX_A":
            p = p or "inf"
        elif p is None:
            p = "12" if regime == "THM1" else "24"
        ps = preset(regime, p=None if p == "inf" else Fraction(p), N=N, k0=k0, mu=mu)
        eps, eps1 = self.get("eps"), self.get("eps1")
        if (eps is None) != (eps1 is None):
            raise ConfigError("eps and eps1 must be given together")
        changes = {}
        if eps is not None:
            changes.update(eps=Fraction(eps), eps1=Fraction(eps1))
        for name in ("q", "p0"):
            if self.get(name) is not None:
                changes[name] = Fraction(self.get(name))
        return replace(ps, **changes) if changes else ps

    # -- provenance -------------------------------------------------------
    def resolved(self) -> dict:
        out = {"command": self.command}
        for name in SCHEMA:
            v = self.get(name)
            if name in self.values or v is not None:
                out[name] = v
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True, default=str)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def text(self) -> str:
        """The configuration as a sectioned key=value file."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name, v in self.resolved().items():
            if name == "command":
                continue
            sec = SCHEMA[name][0]
            if not cp.has_section(sec):
                cp.add_section(sec)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            cp.set(sec, name, str(v))
        lines = [f"# command: {self.command}"]
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp.items(sec)]
        return "\n".join(lines) + "\n"


def load_config(command: str, path=None, overrides=()) -> ExperimentConfig:
    """Read an optional config file, then apply key=value overrides."""
    cfg = ExperimentConfig(command)
    if path:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(path) as fh:
                text = fh.read()
            if not text.lstrip().startswith("["):
                text = "[params]\n" + text
            cp.read_string(text)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            for k, v in cp.items(sec):
                cfg.set(k, v, origin=str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    return cfg

