"""Typed configuration: INI file, environment overrides, full schema check.

Config files are plain key = value sections. Every key is declared in
SCHEMA with its type and default; unknown sections or keys fail validation
(exit code 2 at the CLI). Environment variables override file values using
the prefix TIRKIT_, two underscores between section and key, and dots in
key names flattened to underscores, e.g.

    TIRKIT_TOOL__CODE_TIMEOUT_MS=2000
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from typing import Any

from .curator import CriteriaConfig
from .errors import ConfigError
from .sampler import SamplerConfig

ENV_PREFIX = "TIRKIT_"


def _ratio(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError as exc:
        raise ConfigError(f"bad ratio {text!r}, expected A:B") from exc


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "run": {
        "seed": (int, 0),
        "run_dir": (str, "runs/default"),
        "endpoint": (str, ""),
        "workers": (int, 1),
    },
    "sampling": {
        "m": (int, 10),
        "branch_k": (int, 3),
        "branch_b": (int, 2),
        "max_total_tokens": (int, 4096),
        "max_call_tokens": (int, 1024),
        "temperature": (float, 1.0),
        "top_logprobs": (int, 20),
        "residual_mode": (str, "lump"),
        "min_rollout_success": (float, 0.5),
    },
    "tool": {
        "per_tool_limit": (int, 4),
        "code.timeout_ms": (int, 5000),
        "code.interpreter": (str, ""),
        "search.backend": (str, "local"),
        "search.corpus": (str, ""),
        "search.k": (int, 3),
        "search.remote_url": (str, ""),
    },
    "scoring": {
        "math.backend": (str, "exact"),
        "math.judge_url": (str, ""),
    },
    "curation": {
        "entropy_hard_max": (float, 0.5),
        "vanilla_hard_max": (float, 0.4),
        "vanilla_easy_min": (float, 0.7),
        "hard_easy_ratio": (_ratio, (2, 1)),
        "strategy_mix": (_ratio, (13, 7)),
    },
    "loop": {
        "max_loops": (int, 2),
        "convergence_epsilon": (float, 0.005),
        "trainer_hook": (str, ""),
        "eval_set": (str, ""),
    },
    "data": {
        "sft_corpus": (str, ""),
        "eval_m": (int, 1),
    },
}

# loop.endpoint.N keys map a loop index to its model endpoint; they are
# validated dynamically since N is open-ended.
_DYNAMIC_PREFIXES = {("loop", "endpoint.")}


@dataclass
class Config:
    values: dict[tuple[str, str], Any] = field(default_factory=dict)

    def get(self, section: str, key: str) -> Any:
        if (section, key) in self.values:
            return self.values[(section, key)]
        try:
            return SCHEMA[section][key][1]
        except KeyError as exc:
            raise ConfigError(f"unknown config key {section}.{key}") from exc

    def set(self, section: str, key: str, raw: str) -> None:
        parser = self._parser_for(section, key)
        try:
            self.values[(section, key)] = parser(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc

    @staticmethod
    def _parser_for(section: str, key: str):
        if section in SCHEMA and key in SCHEMA[section]:
            return SCHEMA[section][key][0]
        for sec, prefix in _DYNAMIC_PREFIXES:
            if section == sec and key.startswith(prefix):
                return str
        raise ConfigError(f"unknown config key {section}.{key}")

    def loop_endpoints(self) -> dict[int, str]:
        out = {}
        for (section, key), value in self.values.items():
            if section == "loop" and key.startswith("endpoint."):
                out[int(key.split(".", 1)[1])] = value
        return out

    def effective(self) -> dict[str, dict[str, Any]]:
        """Full effective config: schema defaults overlaid with set values."""
        out: dict[str, dict[str, Any]] = {}
        for section, keys in SCHEMA.items():
            out[section] = {key: self.get(section, key) for key in keys}
        for (section, key), value in self.values.items():
            out.setdefault(section, {})[key] = value
        return out

    def snapshot(self) -> dict:
        """JSON-serializable copy for run manifests."""
        out = {}
        for section, keys in self.effective().items():
            for key, value in keys.items():
                if isinstance(value, tuple):
                    value = ":".join(str(v) for v in value)
                out[f"{section}.{key}"] = value
        return out

    # --- typed views ---

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            max_total_tokens=self.get("sampling", "max_total_tokens"),
            max_call_tokens=self.get("sampling", "max_call_tokens"),
            per_tool_limit=self.get("tool", "per_tool_limit"),
            temperature=self.get("sampling", "temperature"),
            top_logprobs=self.get("sampling", "top_logprobs"),
            residual_mode=self.get("sampling", "residual_mode"),
            rollouts=self.get("sampling", "m"),
            branch_k=self.get("sampling", "branch_k"),
            branch_b=self.get("sampling", "branch_b"),
            min_rollout_success=self.get("sampling", "min_rollout_success"))

    def criteria_config(self) -> CriteriaConfig:
        return CriteriaConfig(
            entropy_hard_max=self.get("curation", "entropy_hard_max"),
            vanilla_hard_max=self.get("curation", "vanilla_hard_max"),
            vanilla_easy_min=self.get("curation", "vanilla_easy_min"),
            hard_easy_ratio=self.get("curation", "hard_easy_ratio"),
            strategy_mix=self.get("curation", "strategy_mix"))


def load_config(path: str | None = None, env: dict[str, str] | None = None,
                overrides: dict[tuple[str, str], str] | None = None) -> Config:
    """Load config from file, then environment, then explicit overrides."""
    cfg = Config()
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section_part, key_part = name[len(ENV_PREFIX):].split("__", 1)
        section = section_part.lower()
        cfg.set(section, _match_key(section, key_part), raw)
    for (section, key), raw in (overrides or {}).items():
        cfg.set(section, key, raw)
    return cfg


def _match_key(section: str, env_key: str) -> str:
    """Resolve an env key (dots flattened to underscores) to the schema key."""
    wanted = env_key.lower()
    for key in SCHEMA.get(section, {}):
        if key.replace(".", "_") == wanted:
            return key
    return wanted.replace("_", ".", 1) if section == "loop" and wanted.startswith("endpoint_") \
        else wanted
