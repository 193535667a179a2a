"""Configuration file (YAML) and endpoint registry.

Example::

    store: ./prism-store
    seed: 0
    parallelism: 4
    instruction: generic:human1
    endpoints:
      - name: gpt4o
        modality: vision
        base_url: https://api.openai.com/v1
        model_id: gpt-4o-2024-05-13
        credential: OPENAI_API_KEY
        max_retries: 3
        rate_limit: 60
        timeout: 120
      - name: chatgpt
        modality: text
        base_url: https://api.openai.com/v1
        model_id: gpt-3.5-turbo-0125
        credential: OPENAI_API_KEY

Precedence: command-line flags, then environment (``PRISM_STORE``,
``PRISM_SEED``, ``PRISM_PARALLELISM``, ``PRISM_INSTRUCTION``), then the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .endpoints import EndpointConfig, mock_endpoint
from .errors import ConfigError

CONFIG_ENV = "PRISM_CONFIG"
DEFAULT_CONFIG_FILES = ("prism.yaml", "prism.yml")

BUILTIN_MOCKS = {
    "mock-vision": ("echo", "vision"),
    "mock-llm": ("echo", "text"),
}


@dataclass
class Config:
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    instruction: str = "generic:human1"
    seed: int = 0
    store: str | None = None
    parallelism: int = 4
    source: str | None = None

    def endpoint(self, name: str) -> EndpointConfig:
        """Look up ``name``; ``mock:<spec>`` names create an ad-hoc mock endpoint."""
        if name in self.endpoints:
            return self.endpoints[name]
        if name in BUILTIN_MOCKS:
            spec, modality = BUILTIN_MOCKS[name]
            return mock_endpoint(name, spec, modality)
        if name.startswith("mock:"):
            # vision modality so an ad-hoc mock can fill both roles
            return mock_endpoint(name, name[len("mock:"):], "vision")
        known = sorted([*self.endpoints, *BUILTIN_MOCKS])
        raise ConfigError(f"unknown endpoint {name!r} (known: {', '.join(known)}; or use mock:<spec>)")

    def credential_vars(self) -> list[str]:
        return sorted({e.credential for e in self.endpoints.values() if e.credential})


def _int_env(name: str) -> int | None:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from None


def load_config(path: str | Path | None = None) -> Config:
    path = path or os.environ.get(CONFIG_ENV)
    if path is None:
        path = next((p for p in DEFAULT_CONFIG_FILES if Path(p).exists()), None)
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    unknown = set(data) - {"endpoints", "instruction", "seed", "store", "parallelism"}
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
    endpoints: dict[str, EndpointConfig] = {}
    for entry in data.get("endpoints") or []:
        try:
            ep = EndpointConfig.from_dict(entry)
        except TypeError as exc:
            raise ConfigError(f"config {path}: bad endpoint entry: {exc}") from None
        if ep.name in endpoints:
            raise ConfigError(f"config {path}: duplicate endpoint name {ep.name!r}")
        endpoints[ep.name] = ep
    cfg = Config(
        endpoints=endpoints,
        instruction=data.get("instruction", "generic:human1"),
        seed=int(data.get("seed", 0)),
        store=data.get("store"),
        parallelism=int(data.get("parallelism", 4)),
        source=str(path) if path else None,
    )
    seed = _int_env("PRISM_SEED")
    if seed is not None:
        cfg.seed = seed
    par = _int_env("PRISM_PARALLELISM")
    if par is not None:
        cfg.parallelism = par
    if os.environ.get("PRISM_INSTRUCTION"):
        cfg.instruction = os.environ["PRISM_INSTRUCTION"]
    return cfg
