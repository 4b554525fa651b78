"""Tissue-class catalogue and one-hot class encoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidClass, UnknownTissue

# Pixel pitch at native 40x magnification, in microns.
MICRONS_PER_PIXEL_40X = 0.25

# Fixed reporting order; ids 1..6 follow this order in the default registry.
DEFAULT_CLASS_NAMES = ("DT", "PT", "CAP", "TUFT", "VES", "PTC")


@dataclass(frozen=True)
class TissueClass:
    """One registered tissue type and the scale it is segmented at."""

    id: int
    name: str
    downsample_factor: int = 1

    def __post_init__(self):
        if self.id < 1:
            raise InvalidClass(f"class id must be >= 1, got {self.id}")
        if self.downsample_factor < 1:
            raise InvalidClass(
                f"downsample_factor must be >= 1, got {self.downsample_factor}"
            )
        if not self.name or not self.name.strip():
            raise InvalidClass("class name must be nonempty")

    @property
    def microns_per_pixel(self) -> float:
        """Pixel pitch at this class's working scale."""
        return MICRONS_PER_PIXEL_40X * self.downsample_factor


@dataclass(frozen=True)
class ClassVector:
    """One-hot encoding of a class id over m registered classes."""

    values: np.ndarray
    class_id: int


def encode_class(class_id: int, m: int) -> ClassVector:
    """One-hot vector of length m with the 1 at position class_id (1-based)."""
    if not 1 <= class_id <= m:
        raise InvalidClass(f"class id {class_id} outside [1, {m}]")
    values = np.zeros(m, dtype=np.float32)
    values[class_id - 1] = 1.0
    return ClassVector(values=values, class_id=class_id)


class Registry:
    """Immutable catalogue of tissue classes with contiguous ids 1..m.

    Name lookup is case-insensitive after trimming.
    """

    def __init__(self, classes: Iterable[TissueClass]):
        classes = tuple(classes)
        if not classes:
            raise InvalidClass("registry needs at least one class")
        ids = sorted(c.id for c in classes)
        if ids != list(range(1, len(classes) + 1)):
            raise InvalidClass(
                f"class ids must be unique and contiguous from 1, got {ids}"
            )
        self._classes = tuple(sorted(classes, key=lambda c: c.id))
        self._by_name = {c.name.strip().lower(): c for c in self._classes}
        if len(self._by_name) != len(self._classes):
            raise InvalidClass("class names must be unique (case-insensitive)")

    @property
    def classes(self) -> Sequence[TissueClass]:
        return self._classes

    @property
    def m(self) -> int:
        return len(self._classes)

    def lookup(self, name: str) -> TissueClass:
        """Return the class registered under `name` (trimmed, any case)."""
        key = name.strip().lower()
        if key not in self._by_name:
            known = ", ".join(c.name for c in self._classes)
            raise UnknownTissue(f"unknown tissue {name!r}; registered: {known}")
        return self._by_name[key]

    def by_id(self, class_id: int) -> TissueClass:
        if not 1 <= class_id <= self.m:
            raise InvalidClass(f"class id {class_id} outside [1, {self.m}]")
        return self._classes[class_id - 1]

    def encode(self, class_id: int) -> ClassVector:
        return encode_class(class_id, self.m)

    def __iter__(self):
        return iter(self._classes)

    def __len__(self):
        return self.m

    def __eq__(self, other):
        if not isinstance(other, Registry):
            return NotImplemented
        return self._classes == other._classes

    def to_config(self) -> list:
        """Serializable snapshot, the inverse of `from_config`."""
        return [
            {"name": c.name, "id": c.id, "downsample_factor": c.downsample_factor}
            for c in self._classes
        ]

    @classmethod
    def from_config(cls, entries: Sequence[dict]) -> "Registry":
        classes = []
        for entry in entries:
            extra = set(entry) - {"name", "id", "downsample_factor"}
            if extra:
                raise InvalidClass(f"unknown class entry keys: {sorted(extra)}")
            classes.append(
                TissueClass(
                    id=int(entry["id"]),
                    name=str(entry["name"]),
                    downsample_factor=int(entry.get("downsample_factor", 1)),
                )
            )
        return cls(classes)


def default_registry() -> Registry:
    """Six renal tissue classes at native magnification."""
    return Registry(
        TissueClass(id=i, name=name)
        for i, name in enumerate(DEFAULT_CLASS_NAMES, start=1)
    )
