"""
Spatial grid, cell classes and the per-step reward.

Cells are indexed row-major: index = row * cols + col, with (0, 0) at the
north-west corner. All per-cell arrays are flat numpy arrays of length
rows * cols and are made read-only once a GridState is built, so states can be
shared freely between particles, tree nodes and worker processes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property, lru_cache
from typing import Iterable

import numpy as np

from app.core.exceptions import DimensionMismatchError, InvalidActionError, InvalidCellError

# (d_row, d_col) of the 8-connected Moore neighborhood, clockwise from north.
MOORE_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


class CellClass(IntEnum):
    RED = 0      # residences
    YELLOW = 1   # valuable ecological resource
    GREEN = 2    # wildland


@dataclass(frozen=True)
class UtilityMap:
    """Negative utility per burning cell per time step, by cell class."""

    red: float = -10.0
    yellow: float = -5.0
    green: float = -1.0

    def __post_init__(self):
        if not (self.red < self.yellow < self.green <= 0):
            raise ValueError(
                f"utilities must satisfy red < yellow < green <= 0, got "
                f"({self.red}, {self.yellow}, {self.green})"
            )

    @cached_property
    def values(self) -> np.ndarray:
        """Utilities indexed by CellClass value."""
        arr = np.array([self.red, self.yellow, self.green], dtype=float)
        arr.setflags(write=False)
        return arr

    def as_array(self) -> np.ndarray:
        return self.values

    def __getitem__(self, cell_class: CellClass) -> float:
        return float(self.as_array()[int(cell_class)])

    @property
    def worst(self) -> float:
        return self.red


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridState:
    """
    Fire status, fuel level and cell class of every cell at one time step.

    `prev` optionally holds the state one step earlier (without its own `prev`),
    which the observation model needs to re-derive what would have been seen.
    """

    rows: int
    cols: int
    fire: np.ndarray
    fuel: np.ndarray
    classes: np.ndarray
    prev: GridState | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.rows * self.cols
        if self.rows < 1 or self.cols < 1:
            raise DimensionMismatchError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        object.__setattr__(self, "fire", _frozen(self.fire, bool))
        object.__setattr__(self, "fuel", _frozen(self.fuel, np.int16))
        object.__setattr__(self, "classes", _frozen(self.classes, np.int8))
        for name in ("fire", "fuel", "classes"):
            if getattr(self, name).size != n:
                raise DimensionMismatchError(
                    f"{name} has {getattr(self, name).size} entries, expected {n}"
                )
        if np.any(self.fire & (self.fuel < 1)):
            raise ValueError("a burning cell must have fuel >= 1")
        if np.any(self.fuel < 0):
            raise ValueError("fuel must be non-negative")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def is_burning(self) -> bool:
        return bool(self.fire.any())

    def burning_cells(self) -> list[int]:
        return np.flatnonzero(self.fire).tolist()

    def with_fire(self, fire: np.ndarray, fuel: np.ndarray | None = None, prev: GridState | None = None) -> GridState:
        """Copy with a new fire map (and optionally fuel) sharing the class map."""
        return GridState(
            self.rows,
            self.cols,
            fire,
            self.fuel if fuel is None else fuel,
            self.classes,
            prev=prev,
        )

    def detached(self) -> GridState:
        """The same state without its predecessor."""
        if self.prev is None:
            return self
        return GridState(self.rows, self.cols, self.fire, self.fuel, self.classes)

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise InvalidCellError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def same_grid(self, other: GridState) -> bool:
        return self.shape == other.shape


def check_cell(state: GridState, cell: int) -> None:
    if not (0 <= int(cell) < state.n_cells):
        raise InvalidCellError(f"cell index {cell} outside grid of {state.n_cells} cells")


@lru_cache(maxsize=64)
def neighbor_table(rows: int, cols: int) -> np.ndarray:
    """
    (rows*cols, 8) table of Moore neighbor indices, one column per entry of
    MOORE_OFFSETS; -1 marks positions clipped by the grid edge.
    """
    r, c = np.divmod(np.arange(rows * cols), cols)
    table = np.full((rows * cols, len(MOORE_OFFSETS)), -1, dtype=np.int64)
    for k, (dr, dc) in enumerate(MOORE_OFFSETS):
        nr, nc = r + dr, c + dc
        ok = (nr >= 0) & (nr < rows) & (nc >= 0) & (nc < cols)
        table[ok, k] = nr[ok] * cols + nc[ok]
    table.setflags(write=False)
    return table


def neighbors(state: GridState, cell: int) -> frozenset[int]:
    """Indices of the 8-connected neighbors of `cell`, clipped at the grid edge."""
    check_cell(state, cell)
    row = neighbor_table(state.rows, state.cols)[int(cell)]
    return frozenset(int(j) for j in row if j >= 0)


def reward(state: GridState, utilities: UtilityMap) -> float:
    """Sum of the class utility over burning cells; 0 when nothing burns."""
    return float(utilities.as_array()[state.classes[state.fire]].sum())


@dataclass(frozen=True)
class Action:
    """Cells receiving suppression this step. The empty action is the no-op."""

    targets: frozenset[int] = frozenset()

    @classmethod
    def of(cls, *cells: int) -> Action:
        return cls(frozenset(int(c) for c in cells))

    @property
    def is_noop(self) -> bool:
        return not self.targets

    def sorted_targets(self) -> list[int]:
        return sorted(self.targets)

    def validate(self, state: GridState, k_max: int | None = None) -> None:
        for cell in self.targets:
            if not (0 <= cell < state.n_cells):
                raise InvalidActionError(f"target {cell} outside grid of {state.n_cells} cells")
        if k_max is not None and len(self.targets) > k_max:
            raise InvalidActionError(f"{len(self.targets)} targets exceed the budget of {k_max}")

    def mask(self, n_cells: int) -> np.ndarray:
        m = np.zeros(n_cells, dtype=bool)
        if self.targets:
            m[list(self.targets)] = True
        return m


def make_action(cells: Iterable[int], k_max: int | None = None) -> Action:
    """Action from a list of cells, rejecting duplicates and budget overruns."""
    cells = [int(c) for c in cells]
    if len(set(cells)) != len(cells):
        raise InvalidActionError(f"duplicate targets in {cells}")
    if k_max is not None and len(cells) > k_max:
        raise InvalidActionError(f"{len(cells)} targets exceed the budget of {k_max}")
    return Action(frozenset(cells))


NOOP = Action()
