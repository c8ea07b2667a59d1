"""Shared grid conventions, dataset description, and the panoptic id codec.

Dense images are plain numpy arrays in row-major layout with the origin at
the top-left corner and coordinates ordered (row, col):

* label maps      -- 2-D integer arrays holding category ids or panoptic ids
* heatmaps        -- 2-D float arrays
* offset fields   -- (H, W, 2) float arrays storing (delta_row, delta_col)
* masks / weights -- 2-D bool / float arrays

Every function in this package treats its array arguments as read-only and
returns freshly allocated outputs, so values can be shared freely between
threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "Dims",
    "CategorySpec",
    "DatasetSpec",
    "InstanceCenter",
    "encode_panoptic_id",
    "decode_panoptic_id",
    "validate",
]

# Violations past this count are folded into a single summary entry.
_MAX_REPORTED = 100


@dataclass(frozen=True)
class Dims:
    """Grid extent in pixels."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"dims must be >= 1x1, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def area(self) -> int:
        return self.height * self.width

    @classmethod
    def of(cls, array: np.ndarray) -> "Dims":
        return cls(int(array.shape[0]), int(array.shape[1]))


@dataclass(frozen=True)
class CategorySpec:
    """One category of a dataset; ``is_thing`` marks countable instances."""

    id: int
    name: str
    is_thing: bool

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"category id must be >= 0, got {self.id}")


@dataclass(frozen=True)
class DatasetSpec:
    """Category table plus the constants that shape panoptic encoding.

    ``label_divisor`` packs (category, instance) into one integer id;
    ``ignore_label`` marks pixels excluded from training and evaluation;
    ``stuff_area_threshold`` is the minimum pixel area below which stuff
    segments are re-assigned to VOID during post-processing.
    """

    categories: tuple[CategorySpec, ...]
    ignore_label: int
    label_divisor: int = 1000
    stuff_area_threshold: int = 0

    def __post_init__(self):
        # Canonical ascending-id order; construction order never matters.
        object.__setattr__(
            self, "categories", tuple(sorted(self.categories, key=lambda c: c.id))
        )
        if not self.categories:
            raise ValueError("categories: at least one category required")
        if self.label_divisor < 1:
            raise ValueError(f"label_divisor: must be >= 1, got {self.label_divisor}")
        if self.stuff_area_threshold < 0:
            raise ValueError(
                f"stuff_area_threshold: must be >= 0, got {self.stuff_area_threshold}"
            )
        if self.ignore_label < 0:
            raise ValueError(f"ignore_label: must be >= 0, got {self.ignore_label}")
        seen: set[int] = set()
        for cat in self.categories:
            if cat.id in seen:
                raise ValueError(f"categories: duplicate category id {cat.id}")
            if cat.id >= self.label_divisor:
                raise ValueError(
                    f"categories: id {cat.id} >= label_divisor {self.label_divisor}"
                )
            seen.add(cat.id)
        if self.ignore_label in seen:
            raise ValueError(
                f"ignore_label: {self.ignore_label} collides with a category id"
            )

    @cached_property
    def category_ids(self) -> tuple[int, ...]:
        """All category ids in ascending order (the channel order for
        probability and logit grids)."""
        return tuple(sorted(c.id for c in self.categories))

    @cached_property
    def thing_ids(self) -> frozenset[int]:
        return frozenset(c.id for c in self.categories if c.is_thing)

    @cached_property
    def stuff_ids(self) -> frozenset[int]:
        return frozenset(c.id for c in self.categories if not c.is_thing)

    @cached_property
    def channel_of(self) -> dict[int, int]:
        """Category id -> channel index in probability grids."""
        return {cid: i for i, cid in enumerate(self.category_ids)}

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def void_id(self) -> int:
        """Panoptic id carried by VOID pixels."""
        return self.ignore_label * self.label_divisor

    @cached_property
    def max_known_label(self) -> int:
        return max(max(self.category_ids), self.ignore_label)

    @cached_property
    def _thing_lut(self) -> np.ndarray:
        lut = np.zeros(self.max_known_label + 1, dtype=bool)
        lut[list(self.thing_ids)] = True
        return lut

    @cached_property
    def _known_lut(self) -> np.ndarray:
        lut = np.zeros(self.max_known_label + 1, dtype=bool)
        lut[list(self.category_ids)] = True
        return lut

    def thing_lookup(self, labels: np.ndarray) -> np.ndarray:
        """Boolean array, true where ``labels`` holds a thing category id.

        Labels must lie in [0, max_known_label]; run :func:`validate` first
        for untrusted inputs.
        """
        if labels.size and (labels.min() < 0 or labels.max() > self.max_known_label):
            raise ValueError("label map contains ids unknown to the dataset spec")
        return self._thing_lut[labels]


@dataclass(frozen=True)
class InstanceCenter:
    """A detected or annotated instance center at sub-pixel precision."""

    row: float
    col: float
    score: float = 1.0

    def __post_init__(self):
        if self.score < 0:
            raise ValueError(f"center score must be >= 0, got {self.score}")


def encode_panoptic_id(category: int, instance: int, divisor: int) -> int:
    """Pack a (category, instance) pair into a single panoptic id.

    Instance 0 is the conventional encoding for stuff segments.
    """
    if divisor < 1:
        raise ValueError(f"divisor must be >= 1, got {divisor}")
    if category < 0:
        raise ValueError(f"category must be >= 0, got {category}")
    if not 0 <= instance < divisor:
        raise ValueError(f"instance {instance} outside [0, {divisor})")
    return category * divisor + instance


def decode_panoptic_id(panoptic_id: int, divisor: int) -> tuple[int, int]:
    """Inverse of :func:`encode_panoptic_id`: returns (category, instance)."""
    if divisor < 1:
        raise ValueError(f"divisor must be >= 1, got {divisor}")
    if panoptic_id < 0:
        raise ValueError(f"panoptic id must be >= 0, got {panoptic_id}")
    return panoptic_id // divisor, panoptic_id % divisor


def _report(violations: list[str], mask: np.ndarray, describe) -> None:
    idx = np.flatnonzero(mask)
    for i in idx[:_MAX_REPORTED]:
        violations.append(describe(int(i)))
    if idx.size > _MAX_REPORTED:
        violations.append(f"... and {idx.size - _MAX_REPORTED} more")


def validate(
    array: np.ndarray,
    spec: DatasetSpec,
    kind: str,
    encoded_target: bool = False,
) -> list[str]:
    """Check an array against the dataset spec; returns a violation list.

    ``kind`` is one of ``semantic``, ``panoptic``, ``heatmap``, ``offsets``,
    ``weights``. An empty list means the array is well-formed. This is a
    diagnostic: it never raises for content problems, only reports them.
    ``encoded_target`` additionally enforces the [0, 1] range that encoded
    heatmap targets must satisfy (predicted heatmaps may be arbitrary reals).
    """
    v: list[str] = []
    if kind in ("semantic", "panoptic", "heatmap", "weights"):
        if array.ndim != 2:
            return [f"{kind}: expected 2-D array, got {array.ndim}-D"]
    elif kind == "offsets":
        if array.ndim != 3 or array.shape[2] != 2:
            return [f"offsets: expected (H, W, 2) array, got shape {array.shape}"]
    else:
        raise ValueError(f"unknown kind {kind!r}")
    if array.shape[0] < 1 or array.shape[1] < 1:
        return [f"{kind}: empty dims {array.shape}"]

    flat = array.reshape(array.shape[0] * array.shape[1], -1)
    if kind in ("semantic", "panoptic"):
        if not np.issubdtype(array.dtype, np.integer):
            return [f"{kind}: expected integer dtype, got {array.dtype}"]
        labels = flat[:, 0].astype(np.int64)
        if kind == "semantic":
            known = np.isin(labels, spec.category_ids) | (labels == spec.ignore_label)
            _report(v, ~known, lambda i: f"{kind}: pixel {i}: unknown category id {int(labels[i])}")
        else:
            category = labels // spec.label_divisor
            instance = labels % spec.label_divisor
            known = np.isin(category, spec.category_ids) | (category == spec.ignore_label)
            _report(
                v,
                ~known,
                lambda i: f"panoptic: pixel {i}: unknown category id {int(category[i])}",
            )
            stuff_ids = np.fromiter(spec.stuff_ids, dtype=np.int64, count=len(spec.stuff_ids))
            nonzero_stuff = np.isin(category, stuff_ids) & (instance != 0)
            _report(
                v,
                nonzero_stuff,
                lambda i: f"panoptic: pixel {i}: stuff category {int(category[i])} "
                f"with nonzero instance {int(instance[i])}",
            )
            void_inst = (category == spec.ignore_label) & (instance != 0)
            _report(
                v,
                void_inst,
                lambda i: f"panoptic: pixel {i}: VOID with nonzero instance {int(instance[i])}",
            )
    else:
        if not np.issubdtype(array.dtype, np.floating):
            return [f"{kind}: expected float dtype, got {array.dtype}"]
        values = flat.astype(np.float64, copy=False)
        bad = ~np.isfinite(values).all(axis=1)
        _report(v, bad, lambda i: f"{kind}: pixel {i}: non-finite value")
        if kind == "heatmap" and encoded_target:
            out = ((values[:, 0] < 0.0) | (values[:, 0] > 1.0)) & ~bad
            _report(
                v, out, lambda i: f"heatmap: pixel {i}: value {values[i, 0]} outside [0, 1]"
            )
        if kind == "weights":
            neg = (values[:, 0] < 0.0) & ~bad
            _report(v, neg, lambda i: f"weights: pixel {i}: negative weight {values[i, 0]}")
    return v
