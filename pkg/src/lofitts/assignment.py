"""Per-layer precision assignments shared by the pipeline, search and simulator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from .fidelity import FidelityLevel

STORAGE_FORMATS = ("BF16", "BFP8")


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class LayerPrecision:
    storage_format: str = "BF16"
    fidelity: FidelityLevel = FidelityLevel.HiFi4
    # tile-ops fused per compute op; only the simulator's cost model reads it
    fusion: int = 1

    def __post_init__(self) -> None:
        fmt = self.storage_format.upper()
        if fmt not in STORAGE_FORMATS:
            raise AssignmentError(f"storage format must be one of {STORAGE_FORMATS}, got {self.storage_format!r}")
        object.__setattr__(self, "storage_format", fmt)
        object.__setattr__(self, "fidelity", FidelityLevel.parse(self.fidelity))
        if self.fusion < 1:
            raise AssignmentError("fusion must be >= 1")

    def to_dict(self) -> dict:
        d = {"format": self.storage_format, "fidelity": self.fidelity.name}
        if self.fusion != 1:
            d["fusion"] = self.fusion
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerPrecision":
        return cls(d.get("format", "BF16"), d.get("fidelity", "HiFi4"), int(d.get("fusion", 1)))


BASELINE = LayerPrecision("BF16", FidelityLevel.HiFi4)
DEMOTED = LayerPrecision("BFP8", FidelityLevel.LoFi)


class PrecisionAssignment(Mapping[str, LayerPrecision]):
    """Immutable map ``layer_id -> LayerPrecision`` in graph order."""

    def __init__(self, layers: Mapping[str, LayerPrecision] | Iterable[tuple[str, LayerPrecision]]):
        items = layers.items() if isinstance(layers, Mapping) else layers
        self._layers: dict[str, LayerPrecision] = {}
        for layer_id, prec in items:
            if layer_id in self._layers:
                raise AssignmentError(f"layer {layer_id!r} assigned twice")
            self._layers[layer_id] = prec

    @classmethod
    def uniform(cls, layer_ids: Iterable[str], precision: LayerPrecision = BASELINE) -> "PrecisionAssignment":
        return cls((lid, precision) for lid in layer_ids)

    def __getitem__(self, key: str) -> LayerPrecision:
        return self._layers[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, PrecisionAssignment):
            return self._layers == other._layers
        return NotImplemented

    def __repr__(self) -> str:
        return f"PrecisionAssignment({len(self)} layers, bfp8={self.coverage_bfp8():.3f}, lofi={self.coverage_lofi():.3f})"

    def with_layers(self, changes: Mapping[str, LayerPrecision]) -> "PrecisionAssignment":
        unknown = set(changes) - set(self._layers)
        if unknown:
            raise AssignmentError(f"unknown layers: {sorted(unknown)}")
        return PrecisionAssignment({k: changes.get(k, v) for k, v in self._layers.items()})

    def check_covers(self, layer_ids: Iterable[str]) -> None:
        layer_ids = list(layer_ids)
        missing = [lid for lid in layer_ids if lid not in self._layers]
        if missing:
            raise AssignmentError(f"assignment is missing layers: {missing}")
        extra = sorted(set(self._layers) - set(layer_ids))
        if extra:
            raise AssignmentError(f"assignment names unknown layers: {extra}")

    def coverage_bfp8(self) -> float:
        if not self._layers:
            return 0.0
        return sum(p.storage_format == "BFP8" for p in self._layers.values()) / len(self._layers)

    def coverage_lofi(self) -> float:
        if not self._layers:
            return 0.0
        return sum(p.fidelity is FidelityLevel.LoFi for p in self._layers.values()) / len(self._layers)

    def to_dict(self) -> dict:
        return {"layers": {k: v.to_dict() for k, v in self._layers.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PrecisionAssignment":
        layers = d["layers"] if "layers" in d else d
        return cls((k, LayerPrecision.from_dict(v)) for k, v in layers.items())

    @classmethod
    def from_json(cls, text: str) -> "PrecisionAssignment":
        return cls.from_dict(json.loads(text))
