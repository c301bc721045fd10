"""Cell geometry of the detection grid.

An utterance of ``T`` frames is split into ``C`` equal, half-open cells
``[i*W, (i+1)*W)``.  Every conversion between absolute event spans and
cell-relative ``(center, duration)`` coordinates lives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class GridError(ValueError):
    """Raised for invalid grid geometry or out-of-range coordinates."""


@dataclass(frozen=True)
class EventSpan:
    """Half-open span ``[start, end)`` in (real-valued) frames."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise GridError(f"non-finite span ({self.start}, {self.end})")
        if self.start < 0 or self.end <= self.start:
            raise GridError(f"invalid span ({self.start}, {self.end})")

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class CellLocal:
    """An event expressed relative to the cell that owns its center."""

    cell_index: int
    rel_center: float
    duration: float


@dataclass(frozen=True)
class CellGrid:
    total_frames: int
    num_cells: int

    def __post_init__(self):
        if self.total_frames <= 0 or self.num_cells <= 0:
            raise GridError(
                f"total_frames and num_cells must be positive, got "
                f"T={self.total_frames}, C={self.num_cells}"
            )
        if self.total_frames % self.num_cells:
            raise GridError(
                f"num_cells={self.num_cells} does not divide total_frames={self.total_frames}"
            )

    @property
    def cell_width(self) -> int:
        return self.total_frames // self.num_cells

    def cell_start(self, i: int) -> int:
        if not 0 <= i < self.num_cells:
            raise GridError(f"cell index {i} outside [0, {self.num_cells})")
        return i * self.cell_width

    def boundaries(self) -> list[tuple[int, int]]:
        w = self.cell_width
        return [(i * w, (i + 1) * w) for i in range(self.num_cells)]

    def assign_cell(self, center: float) -> int:
        """Index of the cell owning ``center``; ``center == T`` goes to the last cell."""
        if not (0 <= center <= self.total_frames):
            raise GridError(f"center {center} outside [0, {self.total_frames}]")
        return min(int(center // self.cell_width), self.num_cells - 1)

    def indicator(self, center: float) -> list[int]:
        owner = self.assign_cell(center)
        return [int(i == owner) for i in range(self.num_cells)]

    def to_cell_local(self, span: EventSpan) -> CellLocal:
        if span.end > self.total_frames:
            raise GridError(f"span end {span.end} beyond T={self.total_frames}")
        i = self.assign_cell(span.center)
        return CellLocal(i, span.center - self.cell_start(i), span.duration)

    def to_absolute_span(self, local: CellLocal) -> EventSpan:
        # Clamped to [0, T]; the center always lies inside the grid so the
        # clamped span stays non-empty.
        center = self.cell_start(local.cell_index) + local.rel_center
        half = 0.5 * local.duration
        start = min(max(center - half, 0.0), float(self.total_frames))
        end = min(max(center + half, 0.0), float(self.total_frames))
        return EventSpan(start, end)


def cell_boundaries(grid: CellGrid) -> list[tuple[int, int]]:
    return grid.boundaries()


def assign_cell(grid: CellGrid, center: float) -> int:
    return grid.assign_cell(center)


def to_cell_local(grid: CellGrid, span: EventSpan) -> CellLocal:
    return grid.to_cell_local(span)


def to_absolute_span(grid: CellGrid, local: CellLocal) -> EventSpan:
    return grid.to_absolute_span(local)
