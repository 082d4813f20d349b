"""Experiment configuration: key=value files plus command-line overrides.

A config file is plain text, one ``key = value`` per line; ``#`` starts a
comment. Every resolved field remembers where its value came from
(``default``, ``file:LINE`` or ``flag --name``).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from rlattrib.envs import EnvId
from rlattrib.filtering import FilterConfig, Strategy
from rlattrib.ppo import PpoConfig

OUTPUT_ENV_VAR = "IIF_OUTPUT_DIR"

# p that works best per environment family; used when p is not given
DEFAULT_P = {EnvId.FROZENLAKE: 0.5, EnvId.CHAIN: 0.5, EnvId.EMPTYGRID: 0.125}


class ParseError(ValueError):
    pass


class UnknownKey(ParseError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    out = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _str_list(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


# key -> (converter, section); section "ppo" keys map onto PpoConfig fields
_KEYS: dict[str, tuple[Callable[[str], Any], str]] = {
    "env": (lambda s: EnvId(s.strip().lower()).value, "top"),
    "seeds": (_int_list, "top"),
    "eval_episodes": (int, "top"),
    "output_dir": (str, "top"),
    "strategies": (_str_list, "top"),
    "attribute": (_bool, "top"),
    "diagnose": (_bool, "top"),
    "influence_advantage": (str, "top"),
    "random_pairing": (str, "top"),
    "workers": (int, "top"),
    "chain_length": (int, "top"),
    "p": (float, "filter"),
    "alpha": (float, "filter"),
    "random_fraction": (_optional_float, "filter"),
    "n_steps": (int, "ppo"),
    "batch_size": (int, "ppo"),
    "n_epochs": (int, "ppo"),
    "lr": (float, "ppo"),
    "clip_range": (float, "ppo"),
    "gamma": (float, "ppo"),
    "gae_lambda": (float, "ppo"),
    "vf_coef": (float, "ppo"),
    "ent_coef": (float, "ppo"),
    "max_grad_norm": (float, "ppo"),
    "rounds": (int, "ppo"),
    "normalize_advantage": (str, "ppo"),
    "hidden": (lambda s: tuple(int(x) for x in _str_list(s)), "ppo"),
}
_ALIASES = {"total_rounds": "rounds", "clip": "clip_range", "lam": "gae_lambda", "seed": "seeds",
            "strategy": "strategies"}


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = EnvId.FROZENLAKE.value
    ppo: PpoConfig = field(default_factory=PpoConfig)
    p: float = 0.5
    alpha: float = 0.6
    random_fraction: float | None = None
    strategies: tuple = ("iif",)
    seeds: tuple = (0,)
    eval_episodes: int = 1000
    output_dir: str = "runs"
    attribute: bool = False
    diagnose: bool = False
    influence_advantage: str = "normalized"
    random_pairing: str = "paired"
    workers: int = 1
    chain_length: int = 5
    provenance: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")
        for s in self.strategies:
            Strategy(s)
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be positive")
        if self.influence_advantage not in ("raw", "normalized", "train"):
            raise ValueError(f"unknown influence_advantage {self.influence_advantage!r}")
        if self.random_pairing not in ("paired", "fraction"):
            raise ValueError(f"unknown random_pairing {self.random_pairing!r}")
        if self.workers < 1:
            raise ValueError("workers must be positive")

    def filter_config(self, strategy: str | Strategy) -> FilterConfig:
        return FilterConfig(Strategy(strategy), self.p, self.alpha, self.random_fraction)

    @property
    def env_kwargs(self) -> dict:
        return {"length": self.chain_length} if self.env == EnvId.CHAIN.value else {}

    def to_dict(self, with_output: bool = True) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "provenance"}
        d["ppo"] = dataclasses.asdict(self.ppo)
        if not with_output:
            d.pop("output_dir")
            d.pop("workers")
        return json.loads(json.dumps(d))

    def hash(self) -> str:
        """Digest of everything that can change an emitted byte (not where output goes)."""
        blob = json.dumps(self.to_dict(with_output=False), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def describe(self) -> str:
        lines = []
        flat = self.to_dict()
        ppo = flat.pop("ppo")
        ppo["rounds"] = ppo.pop("total_rounds")
        for key, value in sorted({**flat, **ppo}.items()):
            if key == "seed":
                continue
            lines.append(f"{key} = {value}  [{self.provenance.get(key, 'default')}]")
        return "\n".join(lines)


def _canonical(key: str) -> str:
    key = key.strip().replace("-", "_")
    return _ALIASES.get(key, key)


def _convert(key: str, text: str, where: str):
    if key not in _KEYS:
        raise UnknownKey(f"{where}: unknown key {key!r}")
    conv, _ = _KEYS[key]
    try:
        return conv(text)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_file(text: str, name: str = "<config>") -> tuple[dict, dict]:
    values, prov = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{name}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = _canonical(key)
        where = f"{name}:{lineno}"
        values[key] = _convert(key, value.strip(), where)
        prov[key] = f"file:{lineno}"
    return values, prov


def parse_config(path: str | os.PathLike | None = None, flags: dict | None = None) -> ExperimentConfig:
    """Resolve a config from an optional file and a mapping of flag overrides.

    ``flags`` maps key names to raw strings (or already-typed values); a
    ``None`` value means the flag was not given.
    """
    values, prov = {}, {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ParseError(f"cannot read config {p}: {exc}") from None
        values, prov = parse_file(text, str(p))
    for raw_key, raw in (flags or {}).items():
        if raw is None:
            continue
        key = _canonical(raw_key)
        where = f"flag --{raw_key.replace('_', '-')}"
        values[key] = _convert(key, raw, where) if isinstance(raw, str) else raw
        prov[key] = where
    if "output_dir" not in values and os.environ.get(OUTPUT_ENV_VAR):
        values["output_dir"] = os.environ[OUTPUT_ENV_VAR]
        prov["output_dir"] = f"env {OUTPUT_ENV_VAR}"

    ppo_kw, top = {}, {}
    for key, value in values.items():
        section = _KEYS[key][1]
        if section == "ppo":
            ppo_kw["total_rounds" if key == "rounds" else key] = value
        else:
            top[key] = value
    env = EnvId(top.get("env", EnvId.FROZENLAKE.value))
    top.setdefault("p", DEFAULT_P[env])
    try:
        ppo = PpoConfig(**ppo_kw)
        return ExperimentConfig(ppo=ppo, provenance=prov, **top)
    except ValueError as exc:
        culprit = next((prov[k] for k in prov if re.match(rf"{k}\b", str(exc))), "config")
        raise ParseError(f"{culprit}: {exc}") from None
