"""
Transition model: suppression, fuel burn-down and probabilistic spread.

Within one step effects apply in a fixed order:
  1. each targeted burning cell is put out with probability q
  2. every still-burning cell consumes one unit of fuel; cells reaching 0 go out
  3. every cell that was not burning and still has fuel ignites with the
     noisy-or probability computed from the fire map at the start of the step

Every step draws exactly 2 * n_cells uniforms from the random stream, whatever
the state or action, so two policies fed the same stream see the same spread
randomness at the same step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from app.core.exceptions import DimensionMismatchError, InvalidCellError, TableParseError
from app.services.grid import MOORE_OFFSETS, NOOP, Action, GridState, check_cell, neighbor_table

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["row", "col", "prob"]


def _bearing_into_cell(d_row: int, d_col: int) -> float:
    """
    Compass bearing (0 = north, 90 = east) of the spread direction from the
    neighbor at offset (d_row, d_col) into the center cell.
    """
    north, east = d_row, -d_col
    return math.degrees(math.atan2(east, north)) % 360.0


NEIGHBOR_BEARINGS = np.array([_bearing_into_cell(dr, dc) for dr, dc in MOORE_OFFSETS])


@dataclass(frozen=True)
class SpreadParams:
    """Parametric spread kernel: wind (direction it blows toward, strength) and base rate."""

    wind_direction: float = 0.0
    wind_strength: float = 0.0
    base_rate: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.wind_direction < 360.0:
            raise ValueError(f"wind_direction must be in [0, 360), got {self.wind_direction}")
        if not 0.0 <= self.wind_strength <= 1.0:
            raise ValueError(f"wind_strength must be in [0, 1], got {self.wind_strength}")
        if not 0.0 <= self.base_rate <= 1.0:
            raise ValueError(f"base_rate must be in [0, 1], got {self.base_rate}")

    def contribution(self, bearing: float) -> float:
        """Clamped per-neighbor ignition chance for spread along `bearing`."""
        lam = 1.0 + self.wind_strength * math.cos(math.radians(self.wind_direction - bearing))
        return min(max(self.base_rate * lam, 0.0), 1.0)

    def offset_contributions(self) -> np.ndarray:
        lam = 1.0 + self.wind_strength * np.cos(np.radians(self.wind_direction - NEIGHBOR_BEARINGS))
        return np.clip(self.base_rate * lam, 0.0, 1.0)

    def probabilities(self, state: GridState) -> np.ndarray:
        table = neighbor_table(state.rows, state.cols)
        padded = np.append(state.fire, False)
        burning = padded[table]
        survival = np.where(burning, 1.0 - self.offset_contributions()[None, :], 1.0).prod(axis=1)
        return 1.0 - survival


@dataclass(frozen=True, eq=False)
class TableSpread:
    """
    File-loaded spread model: `probs[cell]` is the chance that one burning
    neighbor ignites `cell` in one step; neighbors combine by noisy-or.
    """

    rows: int
    cols: int
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float).reshape(-1)
        if probs.size != self.rows * self.cols:
            raise DimensionMismatchError(
                f"spread table has {probs.size} cells, grid has {self.rows * self.cols}"
            )
        if np.any((probs < 0) | (probs > 1)):
            raise ValueError("spread table probabilities must lie in [0, 1]")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def probabilities(self, state: GridState) -> np.ndarray:
        if state.shape != (self.rows, self.cols):
            raise DimensionMismatchError(
                f"spread table is {self.rows}x{self.cols}, state is {state.rows}x{state.cols}"
            )
        table = neighbor_table(state.rows, state.cols)
        count = np.append(state.fire, False)[table].sum(axis=1)
        return 1.0 - (1.0 - self.probs) ** count


Spread = Union[SpreadParams, TableSpread]


@dataclass(frozen=True)
class DynamicsParams:
    q: float = 1.0
    spread: Spread = SpreadParams()
    # ignite iff the ignition probability is at least 0.5
    deterministic: bool = False

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"q must be in [0, 1], got {self.q}")


def ignition_probabilities(state: GridState, spread: Spread) -> np.ndarray:
    """Ignition probability of every cell; 0 for burning or fuel-exhausted cells."""
    probs = spread.probabilities(state)
    probs[state.fire | (state.fuel < 1)] = 0.0
    return probs


def ignition_probability(state: GridState, cell: int, spread: Spread) -> float:
    """
    Noisy-or ignition probability of a single non-burning cell that still has fuel.

    Raises InvalidCellError when the cell is burning or has no fuel left.
    """
    check_cell(state, cell)
    if state.fire[cell]:
        raise InvalidCellError(f"cell {cell} is already burning")
    if state.fuel[cell] < 1:
        raise InvalidCellError(f"cell {cell} has no fuel left")
    return float(ignition_probabilities(state, spread)[cell])


def next_fire_marginals(state: GridState, params: DynamicsParams) -> np.ndarray:
    """
    Probability that each cell burns one step after `state` when it is not
    targeted: certain for burning cells with fuel to spare, zero for cells
    burning their last unit, the ignition probability otherwise.
    """
    probs = ignition_probabilities(state, params.spread)
    if params.deterministic:
        probs = (probs >= 0.5).astype(float)
    probs[state.fire] = np.where(state.fuel[state.fire] >= 2, 1.0, 0.0)
    return probs


def step(state: GridState, action: Action, params: DynamicsParams, rng: np.random.Generator) -> GridState:
    """Advance the grid one time step. The input state is left untouched."""
    action.validate(state)
    n = state.n_cells
    u_suppress = rng.random(n)
    u_ignite = rng.random(n)

    fire = state.fire.copy()
    if not action.is_noop:
        hit = action.mask(n) & fire & (u_suppress < params.q)
        fire[hit] = False

    fuel = state.fuel.copy()
    fuel[fire] -= 1
    fire[fuel == 0] = False

    probs = ignition_probabilities(state, params.spread)
    if params.deterministic:
        ignite = probs >= 0.5
    else:
        ignite = u_ignite < probs
    ignite &= ~state.fire & (state.fuel >= 1)
    fire |= ignite

    return GridState(state.rows, state.cols, fire, fuel, state.classes, prev=state.detached())


def simulate(state: GridState, steps: int, params: DynamicsParams, rng: np.random.Generator, action: Action = NOOP) -> GridState:
    """Apply `step` repeatedly with a fixed action."""
    for _ in range(steps):
        state = step(state, action, params, rng)
    return state


def load_table_spread(path: str | Path, rows: int, cols: int) -> TableSpread:
    """
    Read a `row,col,prob` CSV covering every cell of a rows x cols grid.

    Errors name the offending file line (the header is line 1).
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise TableParseError(1, f"unreadable CSV: {e}") from e

    if list(frame.columns) != TABLE_COLUMNS:
        raise TableParseError(1, f"header must be {','.join(TABLE_COLUMNS)}, got {','.join(frame.columns)}")

    probs = np.full(rows * cols, np.nan)
    for offset, (row_s, col_s, prob_s) in enumerate(frame.itertuples(index=False, name=None)):
        line = offset + 2
        try:
            row, col, prob = int(row_s), int(col_s), float(prob_s)
        except ValueError:
            raise TableParseError(line, f"cannot parse ({row_s!r}, {col_s!r}, {prob_s!r})")
        if not (0 <= row < rows and 0 <= col < cols):
            raise TableParseError(line, f"cell ({row}, {col}) outside {rows}x{cols} grid")
        if not 0.0 <= prob <= 1.0:
            raise TableParseError(line, f"probability {prob} outside [0, 1]")
        idx = row * cols + col
        if not np.isnan(probs[idx]):
            raise TableParseError(line, f"cell ({row}, {col}) listed twice")
        probs[idx] = prob

    missing = np.flatnonzero(np.isnan(probs))
    if missing.size:
        first = divmod(int(missing[0]), cols)
        raise TableParseError(len(frame) + 2, f"{missing.size} cells missing, first is {first}")

    logger.info(f"Loaded spread table for {rows}x{cols} grid from {path}")
    return TableSpread(rows, cols, probs)


def save_table_spread(table: TableSpread, path: str | Path) -> None:
    r, c = np.divmod(np.arange(table.rows * table.cols), table.cols)
    frame = pd.DataFrame({"row": r, "col": c, "prob": table.probs})
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
