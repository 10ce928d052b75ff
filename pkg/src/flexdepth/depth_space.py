"""Divisor-based depth spaces and the multi-task depth grid.

A model of total depth D supports running at every depth d that divides D:
each run compresses every D/d layers into one kept layer. The cross product
of the encoder's and decoder's supported depths is the task grid that
multi-task training iterates over.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class DepthSet:
    """All supported depths of one stack (encoder or decoder).

    ``depths`` is strictly increasing, contains 1 and ``total_depth``, and
    every element divides ``total_depth``.
    """

    total_depth: int
    depths: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.total_depth < 1:
            raise ValueError(f"total depth must be >= 1, got {self.total_depth}")
        if not self.depths:
            raise ValueError("depth set is empty")
        if list(self.depths) != sorted(set(self.depths)):
            raise ValueError(f"depths must be strictly increasing, got {self.depths}")
        if self.depths[0] != 1 or self.depths[-1] != self.total_depth:
            raise ValueError(f"depth set must contain 1 and {self.total_depth}, got {self.depths}")
        for d in self.depths:
            if self.total_depth % d != 0:
                raise ValueError(f"{d} does not divide total depth {self.total_depth}")

    def __iter__(self):
        return iter(self.depths)

    def __len__(self) -> int:
        return len(self.depths)


@dataclass(frozen=True)
class DepthGrid:
    """The task grid: every (encoder depth, decoder depth) combination.

    ``tasks`` is row-major over encoder depths ascending, then decoder
    depths ascending, so grid iteration order is canonical.
    """

    encoder: DepthSet
    decoder: DepthSet
    tasks: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self) -> None:
        expected = tuple((m, n) for m in self.encoder.depths for n in self.decoder.depths)
        if self.tasks == ():
            object.__setattr__(self, "tasks", expected)
        elif self.tasks != expected:
            raise ValueError("tasks are not the row-major cross product of the depth sets")

    def __len__(self) -> int:
        return len(self.tasks)


def divisor_depths(total_depth: int) -> DepthSet:
    """Return the set of all positive divisors of ``total_depth``, ascending."""
    if total_depth < 1:
        raise ValueError(f"total depth must be >= 1, got {total_depth}")
    small, large = [], []
    d = 1
    while d * d <= total_depth:
        if total_depth % d == 0:
            small.append(d)
            if d != total_depth // d:
                large.append(total_depth // d)
        d += 1
    return DepthSet(total_depth, tuple(small + large[::-1]))


def task_grid(enc_depth: int, dec_depth: int) -> DepthGrid:
    """Cross the divisor depths of both stacks into the multi-task grid."""
    return DepthGrid(divisor_depths(enc_depth), divisor_depths(dec_depth))


def is_composite(total_depth: int) -> bool:
    """True when the depth admits more than the trivial {1, D} configurations."""
    return len(divisor_depths(total_depth)) > 2
