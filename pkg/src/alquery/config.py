"""Engine configuration: defaults, validation, file/flag merging."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .similarity import KINDS
from .uncertainty import MEASURES


@dataclass(frozen=True)
class EngineConfig:
    """Hyper-parameters of the selection engine.

    Defaults follow the reference setting: xi 0.6, initial momentum 0.99,
    alpha 0.3, beta 0.2, pool expansion delta 4, 100 kmeans iterations.
    """

    xi: float = 0.6
    m0: float = 0.99
    alpha: float = 0.3
    beta: float = 0.2
    delta: float = 4.0
    kmeans_max_iter: int = 100
    m_cap: int = 100
    measure: str = "entropy"
    similarity_kind: str = "ccms"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"xi must lie in [0, 1], got {self.xi!r}")
        if not 0.0 < self.m0 < 1.0:
            raise ValueError(f"m0 must lie in (0, 1), got {self.m0!r}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be > 0, got {self.alpha!r}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta!r}")
        if self.delta < 1.0:
            raise ValueError(f"delta must be >= 1, got {self.delta!r}")
        if self.kmeans_max_iter < 1:
            raise ValueError(f"kmeans_max_iter must be >= 1, got {self.kmeans_max_iter!r}")
        if self.m_cap < 1:
            raise ValueError(f"m_cap must be >= 1, got {self.m_cap!r}")
        if self.measure not in MEASURES:
            raise ValueError(f"measure must be one of {MEASURES}, got {self.measure!r}")
        if self.similarity_kind not in KINDS:
            raise ValueError(
                f"similarity_kind must be one of {KINDS}, got {self.similarity_kind!r}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "EngineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def load(cls, path) -> "EngineConfig":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(payload, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(payload)

    def merged(self, overrides: dict) -> "EngineConfig":
        """New config with non-None override values applied."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **changes) if changes else self
