"""
Metrics records emitted by training and evaluation.
"""

from dataclasses import asdict, dataclass, fields
from typing import Any, Optional

# Column order of every CSV/JSONL file.
FIELDS = (
    "kind",
    "method",
    "model",
    "seed",
    "epoch",
    "metric",
    "value",
    "epsilon",
    "steps",
    "step_size",
    "restarts",
    "alpha",
    "tag",
)

_INT_FIELDS = {"seed", "epoch", "steps", "restarts"}
_FLOAT_FIELDS = {"value", "epsilon", "step_size", "alpha"}


@dataclass(frozen=True)
class MetricsRecord:
    """
    One result row with its attack parameters embedded.

    ``kind`` names the producing stage (train, eval, sweep_alpha, ...),
    ``model`` the role (robust/natural) or model name, ``tag`` any extra key
    such as a layer name, a surrogate->target pair or an example index.
    """

    kind: str
    metric: str
    value: float
    method: str = ""
    model: str = ""
    seed: Optional[int] = None
    epoch: Optional[int] = None
    epsilon: Optional[float] = None
    steps: Optional[int] = None
    step_size: Optional[float] = None
    restarts: Optional[int] = None
    alpha: Optional[float] = None
    tag: str = ""

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        return {name: data[name] for name in FIELDS}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricsRecord":
        """Rebuild a record from parsed CSV strings or JSON values."""
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown metrics fields: {sorted(unknown)}")
        parsed: dict[str, Any] = {}
        for name, raw in data.items():
            if raw is None or raw == "":
                parsed[name] = "" if name not in _INT_FIELDS | _FLOAT_FIELDS else None
            elif name in _INT_FIELDS:
                parsed[name] = int(raw)
            elif name in _FLOAT_FIELDS:
                parsed[name] = float(raw)
            else:
                parsed[name] = str(raw)
        if parsed.get("value") is None:
            raise ValueError("Metrics record is missing its value")
        return cls(**parsed)
