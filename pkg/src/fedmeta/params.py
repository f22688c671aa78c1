"""Named parameter tensors partitioned into representation and task blocks."""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from .errors import PartitionError, ShapeError

REPRESENTATION = "representation"
TASK = "task"
BLOCKS = (REPRESENTATION, TASK)


@dataclass(frozen=True)
class BlockPartition:
    representation: tuple[str, ...]
    task: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.representation) & set(self.task)
        if overlap:
            raise PartitionError(f"keys in both blocks: {sorted(overlap)}")

    def keys(self, block: str) -> tuple[str, ...]:
        if block == REPRESENTATION:
            return self.representation
        if block == TASK:
            return self.task
        raise ValueError(f"unknown block {block!r}")

    @property
    def all_keys(self) -> tuple[str, ...]:
        return self.representation + self.task


def _as_tensor(name: str, value) -> np.ndarray:
    if (isinstance(value, np.ndarray) and value.dtype == np.float32
            and not value.flags.writeable and value.flags.owndata):
        return value
    arr = np.array(value, dtype=np.float32, copy=True)
    if arr.ndim == 0:
        raise ShapeError(f"parameter {name!r} must have at least one dimension")
    if 0 in arr.shape:
        raise ShapeError(f"parameter {name!r} has an empty dimension: {arr.shape}")
    arr.flags.writeable = False
    return arr


class ParameterSet(Mapping):
    """Immutable mapping of parameter name to a float32 array.

    ``partition`` is optional: sets that came off the wire or were produced by
    ``split`` carry no partition of their own.
    """

    __slots__ = ("_entries", "partition")

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable = (),
                 partition: BlockPartition | None = None):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries = {str(k): _as_tensor(k, v) for k, v in items}
        self.partition = partition
        if partition is not None:
            missing = [k for k in partition.all_keys if k not in self._entries]
            if missing:
                raise PartitionError(f"partition keys missing from entries: {missing}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._entries.items())
        return f"ParameterSet({shapes})"

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    def bitwise_equal(self, other: Mapping[str, np.ndarray]) -> bool:
        if set(self) != set(other):
            return False
        for k, v in self._entries.items():
            o = np.asarray(other[k])
            if v.shape != o.shape or v.dtype != o.dtype or v.tobytes() != o.tobytes():
                return False
        return True

    def with_partition(self, partition: BlockPartition | None) -> "ParameterSet":
        return ParameterSet(self._entries, partition)


def split(params: ParameterSet, block: str, partition: BlockPartition | None = None) -> ParameterSet:
    """Restrict ``params`` to one block; the result carries no partition."""
    partition = partition or params.partition
    if partition is None:
        raise PartitionError("parameter set has no partition to split on")
    keys = partition.keys(block)
    missing = [k for k in keys if k not in params]
    if missing:
        raise PartitionError(f"{block} block keys missing: {missing}")
    return ParameterSet({k: params[k] for k in keys})


def merge(base: ParameterSet, overlay: Mapping[str, np.ndarray]) -> ParameterSet:
    """Replace entries of ``base`` with those of ``overlay``."""
    entries = dict(base.items())
    for k, v in overlay.items():
        if k not in entries:
            raise PartitionError(f"overlay key {k!r} not in base")
        v = np.asarray(v)
        if v.shape != entries[k].shape:
            raise ShapeError(f"{k}: overlay dims {v.shape} != base dims {entries[k].shape}")
        entries[k] = v
    return ParameterSet(entries, base.partition)
