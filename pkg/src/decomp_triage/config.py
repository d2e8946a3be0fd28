"""Layered pipeline configuration: file, then environment, then flags.

The config file is YAML (a human-editable tree document). API keys are
NEVER read from it: provider entries name an environment variable and the
key is resolved from the process environment at request time.

Environment overrides (applied on top of the file, below CLI flags):
  DECOMP_TRIAGE_STORE_DIR, DECOMP_TRIAGE_DECOMP_CACHE_DIR,
  DECOMP_TRIAGE_RUNS_DIR, DECOMP_TRIAGE_GHIDRA_HOME,
  DECOMP_TRIAGE_DEFAULT_PROFILE
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import yaml

from .decompiler import DecompilerConfig
from .errors import ConfigError
from .llm import ProviderProfile
from .tokens import ModelProfile

DEFAULT_CONFIG_FILENAME = "decomp-triage.yaml"
ENV_PREFIX = "DECOMP_TRIAGE_"

_FORBIDDEN_PROVIDER_KEYS = {"api_key", "apikey", "key", "token", "secret"}


@dataclass(frozen=True)
class PipelineConfig:
    store_dir: Path
    decomp_cache_dir: Path
    runs_dir: Path
    decompiler: DecompilerConfig
    model_profiles: dict[str, ModelProfile]
    provider_profiles: dict[str, ProviderProfile]
    default_profile: str

    def model_profile(self, name: str | None = None) -> ModelProfile:
        return self.model_profiles[name or self.default_profile]

    def provider_profile(self, name: str | None = None) -> ProviderProfile:
        return self.provider_profiles[name or self.default_profile]


def default_config_text() -> str:
    """A commented starter config, written by `config init`."""
    return """\
# Pipeline directories (relative paths resolve against this file).
store_dir: ./data
decomp_cache_dir: ./data/decomp
runs_dir: ./runs

# Name of the model/provider profile pair used when no flag is given.
default_profile: default

decompiler:
  ghidra_home: /opt/ghidra
  project_dir: ./ghidra-projects
  timeout_s: 600
  analysis_enabled: true
  script_dir: ./ghidra_scripts

model_profiles:
  default:
    # Placeholder limit: set this to your model's real context window.
    context_limit_tokens: 128000
    chars_per_token: 4.0
    reserved_output_tokens: 64

provider_profiles:
  default:
    provider_name: mock
    endpoint_url: ""
    model_id: mock-model
    # The API key is read from this environment variable at request
    # time. Never put key material in this file.
    api_key_env_var: LLM_API_KEY
    requests_per_minute: 60
    max_retries: 3
    temperature: 0.0
"""


def _require_mapping(value, context: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{context} must be a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(section: dict, allowed: set[str], context: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")


def _path(value, base: Path, context: str) -> Path:
    if not isinstance(value, str) or not value:
        raise ConfigError(f"{context} must be a non-empty path string")
    path = Path(os.path.expanduser(value))
    if not path.is_absolute():
        path = base / path
    return path.resolve()


def _model_profile(name: str, section: dict) -> ModelProfile:
    allowed = {"context_limit_tokens", "chars_per_token", "reserved_output_tokens"}
    _reject_unknown(section, allowed, f"model_profiles.{name}")
    try:
        return ModelProfile(
            name=name,
            context_limit_tokens=int(section["context_limit_tokens"]),
            chars_per_token=float(section.get("chars_per_token", 4.0)),
            reserved_output_tokens=int(section.get("reserved_output_tokens", 64)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"model_profiles.{name}: {exc}") from exc


def _provider_profile(name: str, section: dict) -> ProviderProfile:
    lowered = {k.lower() for k in section}
    leaked = lowered & _FORBIDDEN_PROVIDER_KEYS
    if leaked:
        raise ConfigError(
            f"provider_profiles.{name}: refusing key material in config"
            f" ({sorted(leaked)}); use api_key_env_var instead"
        )
    allowed = {
        "provider_name", "endpoint_url", "model_id", "api_key_env_var",
        "requests_per_minute", "max_retries", "temperature", "timeout_s",
    }
    _reject_unknown(section, allowed, f"provider_profiles.{name}")
    try:
        return ProviderProfile(
            provider_name=str(section.get("provider_name", name)),
            endpoint_url=str(section.get("endpoint_url", "")),
            model_id=str(section["model_id"]),
            api_key_env_var=str(section.get("api_key_env_var", "LLM_API_KEY")),
            requests_per_minute=float(section.get("requests_per_minute", 60)),
            max_retries=int(section.get("max_retries", 3)),
            temperature=float(section.get("temperature", 0.0)),
            timeout_s=float(section.get("timeout_s", 120.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"provider_profiles.{name}: {exc}") from exc


def load_config(
    path: Path | str | None = None, env: Mapping[str, str] | None = None
) -> PipelineConfig:
    """Parse and validate a config file, applying environment overrides."""
    env = os.environ if env is None else env
    if path is None:
        path = env.get(ENV_PREFIX + "CONFIG", DEFAULT_CONFIG_FILENAME)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    raw = _require_mapping(raw, str(path))
    base = path.resolve().parent

    allowed_top = {
        "store_dir", "decomp_cache_dir", "runs_dir", "decompiler",
        "model_profiles", "provider_profiles", "default_profile",
    }
    _reject_unknown(raw, allowed_top, str(path))

    store_dir = _path(
        env.get(ENV_PREFIX + "STORE_DIR") or raw.get("store_dir", "./data"),
        base, "store_dir",
    )
    cache_dir = _path(
        env.get(ENV_PREFIX + "DECOMP_CACHE_DIR")
        or raw.get("decomp_cache_dir", "./data/decomp"),
        base, "decomp_cache_dir",
    )
    runs_dir = _path(
        env.get(ENV_PREFIX + "RUNS_DIR") or raw.get("runs_dir", "./runs"),
        base, "runs_dir",
    )

    decomp_raw = _require_mapping(raw.get("decompiler", {}), "decompiler")
    allowed_decomp = {
        "ghidra_home", "project_dir", "timeout_s", "analysis_enabled", "script_dir",
    }
    _reject_unknown(decomp_raw, allowed_decomp, "decompiler")
    ghidra_home = env.get(ENV_PREFIX + "GHIDRA_HOME") or decomp_raw.get(
        "ghidra_home", "/opt/ghidra"
    )
    timeout_s = decomp_raw.get("timeout_s", 600)
    try:
        timeout_s = float(timeout_s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"decompiler.timeout_s: {exc}") from exc
    if timeout_s <= 0:
        raise ConfigError("decompiler.timeout_s must be positive")
    script_dir = decomp_raw.get("script_dir")
    decompiler = DecompilerConfig(
        ghidra_home=_path(str(ghidra_home), base, "decompiler.ghidra_home"),
        project_dir=_path(
            decomp_raw.get("project_dir", "./ghidra-projects"),
            base, "decompiler.project_dir",
        ),
        timeout_s=timeout_s,
        analysis_enabled=bool(decomp_raw.get("analysis_enabled", True)),
        script_dir=(
            _path(script_dir, base, "decompiler.script_dir") if script_dir else None
        ),
    )

    model_raw = _require_mapping(raw.get("model_profiles", {}), "model_profiles")
    model_profiles = {
        name: _model_profile(name, _require_mapping(sec, f"model_profiles.{name}"))
        for name, sec in model_raw.items()
    }
    provider_raw = _require_mapping(raw.get("provider_profiles", {}), "provider_profiles")
    provider_profiles = {
        name: _provider_profile(name, _require_mapping(sec, f"provider_profiles.{name}"))
        for name, sec in provider_raw.items()
    }

    default_profile = str(
        env.get(ENV_PREFIX + "DEFAULT_PROFILE") or raw.get("default_profile", "default")
    )
    if default_profile not in model_profiles:
        raise ConfigError(
            f"default_profile {default_profile!r} not in model_profiles"
            f" {sorted(model_profiles)}"
        )
    if default_profile not in provider_profiles:
        raise ConfigError(
            f"default_profile {default_profile!r} not in provider_profiles"
            f" {sorted(provider_profiles)}"
        )

    return PipelineConfig(
        store_dir=store_dir,
        decomp_cache_dir=cache_dir,
        runs_dir=runs_dir,
        decompiler=decompiler,
        model_profiles=model_profiles,
        provider_profiles=provider_profiles,
        default_profile=default_profile,
    )
