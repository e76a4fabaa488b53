"""Shipped SoC profiles, stored as JSON data files next to this module."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .cache_model import HierarchyConfig, Side
from .eviction import EvictionStrategy, parse_triple

PROFILE_NAMES = ("A7", "A15", "A53", "A57", "Krait450")


class UnknownProfile(KeyError):
    pass


@dataclass(frozen=True)
class SoCProfile:
    name: str
    description: str
    config: HierarchyConfig
    strategy: tuple[int, int, int]
    strategy_side: Side
    ground_truth_autolock: bool

    def eviction_strategy(self, target: int, config: HierarchyConfig | None = None
                          ) -> EvictionStrategy:
        n, a, d = self.strategy
        return EvictionStrategy.for_target(config or self.config, target, n, a, d,
                                           self.strategy_side)

    def with_config(self, **changes) -> "SoCProfile":
        """Copy with hierarchy fields replaced (ground truth follows autolock)."""
        cfg = self.config.with_(**changes)
        return SoCProfile(self.name, self.description, cfg, self.strategy,
                          self.strategy_side, cfg.autolock)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "ground_truth_autolock": self.ground_truth_autolock,
            "strategy": "-".join(str(x) for x in self.strategy),
            "strategy_side": self.strategy_side.value,
            "hierarchy": self.config.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SoCProfile":
        return cls(d["name"], d.get("description", ""),
                   HierarchyConfig.from_dict(d["hierarchy"]),
                   parse_triple(d["strategy"]), Side(d["strategy_side"]),
                   bool(d["ground_truth_autolock"]))

    @classmethod
    def from_json(cls, text: str) -> "SoCProfile":
        return cls.from_dict(json.loads(text))


def profile_text(name: str) -> str:
    if name not in PROFILE_NAMES:
        raise UnknownProfile(f"unknown profile {name!r}; known: {', '.join(PROFILE_NAMES)}")
    return resources.files(__package__).joinpath("profiles", f"{name}.json").read_text()


def load_profile(name_or_path: str) -> SoCProfile:
    """Load a shipped profile by name, or any profile file by path."""
    if name_or_path in PROFILE_NAMES:
        return SoCProfile.from_json(profile_text(name_or_path))
    path = Path(name_or_path)
    if path.suffix == ".json" and path.is_file():
        return SoCProfile.from_json(path.read_text())
    raise UnknownProfile(f"unknown profile {name_or_path!r}; known: {', '.join(PROFILE_NAMES)}")


def all_profiles() -> list[SoCProfile]:
    return [load_profile(n) for n in PROFILE_NAMES]
