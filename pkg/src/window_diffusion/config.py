"""JSON run configuration and backend construction.

A config file looks like::

    {
      "backend": "toy",                 # or "oracle"
      "model": {...ModelConfig fields...},
      "oracle": {...OracleConfig fields...},
      "generation": {...GenerationConfig fields...},
      "weights_path": "weights.json",   # optional; toy weights are seeded otherwise
      "prompt": [1, 2, 3],
      "obs": {...harness parameters...}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .decoding import GenerationConfig
from .errors import ConfigError
from .model import ModelConfig, ToyTransformer, init_weights, load_weights
from .oracle import OracleConfig, SyntheticOracle

_TOP_LEVEL = {"backend", "model", "oracle", "generation", "weights_path", "prompt", "obs"}


@dataclass
class RunConfig:
    backend: str = "toy"
    model: ModelConfig = field(default_factory=ModelConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    weights_path: str | None = None
    prompt: list[int] = field(default_factory=list)
    obs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in ("toy", "oracle"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.generation.backend != self.backend:
            self.generation = replace(self.generation, backend=self.backend)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - _TOP_LEVEL
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        prompt = d.get("prompt", [])
        if not isinstance(prompt, list) or not all(isinstance(t, int) for t in prompt):
            raise ConfigError("prompt must be a list of integer token ids")
        return cls(
            backend=d.get("backend", "toy"),
            model=ModelConfig.from_dict(d.get("model", {})),
            oracle=OracleConfig.from_dict(d.get("oracle", {})),
            generation=GenerationConfig.from_dict(d.get("generation", {})),
            weights_path=d.get("weights_path"),
            prompt=list(prompt),
            obs=dict(d.get("obs", {})),
        )

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "model": self.model.to_dict(),
            "oracle": self.oracle.to_dict(),
            "generation": self.generation.to_dict(),
            "weights_path": self.weights_path,
            "prompt": list(self.prompt),
            "obs": dict(self.obs),
        }

    def build_backend(self):
        if self.backend == "oracle":
            return SyntheticOracle(self.oracle)
        if self.weights_path:
            path = Path(self.weights_path)
            if not path.exists():
                raise ConfigError(f"weights file {path} does not exist")
            weights, model_cfg = load_weights(path)
            return ToyTransformer(weights, model_cfg)
        return ToyTransformer(init_weights(self.model), self.model)


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)
