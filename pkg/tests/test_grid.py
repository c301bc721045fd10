import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridstd.grid import (CellGrid, CellLocal, EventSpan, GridError, assign_cell, cell_boundaries,
                          to_absolute_span, to_cell_local)

G = CellGrid(96, 3)


@pytest.mark.parametrize("T,C,expected", [
    (96, 3, [(0, 32), (32, 64), (64, 96)]),
    (100, 1, [(0, 100)]),
    (9, 3, [(0, 3), (3, 6), (6, 9)]),
])
def test_cell_boundaries(T, C, expected):
    assert cell_boundaries(CellGrid(T, C)) == expected


@pytest.mark.parametrize("T,C", [(100, 3), (0, 1), (10, 0), (-3, 1)])
def test_bad_grid(T, C):
    with pytest.raises(GridError):
        CellGrid(T, C)


@pytest.mark.parametrize("center,cell", [(35, 1), (32, 1), (96, 2), (0, 0), (31.999, 0)])
def test_assign_cell(center, cell):
    assert assign_cell(G, center) == cell


@pytest.mark.parametrize("center", [-0.01, 96.01, math.nan])
def test_assign_cell_out_of_range(center):
    with pytest.raises(GridError):
        G.assign_cell(center)


@pytest.mark.parametrize("span,local", [
    ((40, 50), (1, 13, 10)),
    ((20, 40), (0, 30, 20)),
    ((10, 58), (1, 2, 48)),
])
def test_to_cell_local(span, local):
    assert to_cell_local(G, EventSpan(*span)) == CellLocal(*local)


@pytest.mark.parametrize("local,span", [
    ((1, 13, 10), (40, 50)),
    ((0, 2, 20), (0, 12)),
    ((2, 0, 0.5), (63.75, 64.25)),
])
def test_to_absolute_span(local, span):
    assert to_absolute_span(G, CellLocal(*local)) == EventSpan(*span)


def test_span_beyond_grid_rejected():
    with pytest.raises(GridError):
        G.to_cell_local(EventSpan(90, 97))


def test_right_clamp():
    assert G.to_absolute_span(CellLocal(2, 30, 10)) == EventSpan(89, 96)


@pytest.mark.parametrize("start,end", [(-1, 2), (3, 3), (4, 2), (0, math.inf)])
def test_invalid_span(start, end):
    with pytest.raises(GridError):
        EventSpan(start, end)


@given(st.integers(1, 12), st.integers(1, 40), st.floats(0, 1), st.floats(0, 1))
def test_round_trip_without_clamping(C, W, a, b):
    grid = CellGrid(C * W, C)
    T = grid.total_frames
    lo, hi = sorted((a * T, b * T))
    if hi - lo < 1e-6:
        return
    span = EventSpan(lo, hi)
    back = grid.to_absolute_span(grid.to_cell_local(span))
    assert abs(back.start - span.start) <= 1e-9 and abs(back.end - span.end) <= 1e-9


@given(st.integers(1, 12), st.integers(1, 40), st.floats(0, 1))
def test_partition(C, W, u):
    grid = CellGrid(C * W, C)
    center = u * grid.total_frames
    ind = grid.indicator(center)
    assert sum(ind) == 1
    i = ind.index(1)
    lo, hi = grid.boundaries()[i]
    assert lo <= center < hi or (center == grid.total_frames and i == C - 1)


def test_widths_sum_to_T():
    for T, C in [(96, 3), (96, 1), (12, 4)]:
        b = CellGrid(T, C).boundaries()
        widths = [e - s for s, e in b]
        assert len(set(widths)) == 1 and sum(widths) == T
        assert all(s1 < s2 for (s1, _), (s2, _) in zip(b, b[1:]))


@given(st.integers(0, 2), st.floats(0, 32, exclude_max=True), st.floats(1e-3, 200))
def test_reconstruction_inside_grid(i, t, d):
    span = G.to_absolute_span(CellLocal(i, t, d))
    assert 0 <= span.start < span.end <= 96
