"""Label groups: mutually exclusive states per prediction target."""

from __future__ import annotations

from dataclasses import dataclass, field

from abdtrauma.errors import ConfigurationError


@dataclass(frozen=True)
class LabelGroup:
    name: str
    states: tuple[str, ...]
    healthy: int = 0
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.states) < 2:
            raise ConfigurationError(f"group {self.name!r} needs at least 2 states")
        if not 0 <= self.healthy < len(self.states):
            raise ConfigurationError(f"group {self.name!r}: healthy index {self.healthy} out of range")
        if not self.weights:
            object.__setattr__(self, "weights", (1.0,) * len(self.states))
        if len(self.weights) != len(self.states):
            raise ConfigurationError(f"group {self.name!r}: one weight per state required")
        if any(not w > 0 for w in self.weights):
            raise ConfigurationError(f"group {self.name!r}: weights must be positive")
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def n_states(self) -> int:
        return len(self.states)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "states": list(self.states),
            "healthy": self.healthy,
            "weights": list(self.weights),
        }


@dataclass(frozen=True)
class LabelSchema:
    groups: tuple[LabelGroup, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.groups:
            raise ConfigurationError("schema has no label groups")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate group names in {names}")

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.groups]

    @property
    def total_states(self) -> int:
        return sum(g.n_states for g in self.groups)

    def offsets(self) -> list[int]:
        """Start column of every group inside a flat (n_classes,) score vector."""
        out, acc = [], 0
        for g in self.groups:
            out.append(acc)
            acc += g.n_states
        return out

    def group(self, name: str) -> LabelGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"groups": [g.to_dict() for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSchema":
        groups = []
        for g in d["groups"]:
            groups.append(
                LabelGroup(
                    name=g["name"],
                    states=tuple(g["states"]),
                    healthy=int(g.get("healthy", 0)),
                    weights=tuple(g.get("weights", ())),
                )
            )
        return cls(tuple(groups))


def default_schema() -> LabelSchema:
    """Three 3-state organ groups plus one binary effusion group."""
    organ_states = ("healthy", "low", "high")
    return LabelSchema(
        (
            LabelGroup("liver", organ_states),
            LabelGroup("spleen", organ_states),
            LabelGroup("kidney", organ_states),
            LabelGroup("effusion", ("healthy", "injury")),
        )
    )
