"""
Observation model.

Targeted cells are seen exactly ("eyes on location"). Every other cell is
reported burning when its one-step burn probability, given the previous true
state, is strictly above the threshold `gamma_obs`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.core.exceptions import DimensionMismatchError
from app.services.dynamics import DynamicsParams, next_fire_marginals
from app.services.grid import Action, GridState

# An observation is a flat boolean array with one entry per cell.
Observation = np.ndarray


@dataclass(frozen=True)
class SensingParams:
    gamma_obs: float = 0.5
    # per-cell disagreement probability; 0 gives the exact-match likelihood
    eta: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma_obs <= 1.0:
            raise ValueError(f"gamma_obs must be in [0, 1], got {self.gamma_obs}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")


def observe(prev_state: GridState, state: GridState, action: Action, dyn: DynamicsParams, sp: SensingParams) -> Observation:
    if not prev_state.same_grid(state):
        raise DimensionMismatchError(
            f"previous state is {prev_state.rows}x{prev_state.cols}, state is {state.rows}x{state.cols}"
        )
    action.validate(state)
    o = next_fire_marginals(prev_state, dyn) > sp.gamma_obs
    if not action.is_noop:
        targets = action.mask(state.n_cells)
        o[targets] = state.fire[targets]
    return o


def full_observation(state: GridState) -> Observation:
    """The exact fire map, used when the true state is known (episode start)."""
    return state.fire.copy()


def emitted_observation(state: GridState, action: Action, dyn: DynamicsParams, sp: SensingParams) -> Observation:
    """
    What `observe` would report for a particle. A particle without a recorded
    predecessor reports its own fire map.
    """
    if state.prev is None:
        return full_observation(state)
    return observe(state.prev, state, action, dyn, sp)


def observation_likelihood(
    o: Observation,
    state: GridState,
    action: Action,
    sp: SensingParams,
    dyn: DynamicsParams,
) -> float:
    """
    Likelihood of seeing `o` from `state` after `action`.

    With eta = 0 this is 1 on an exact match and 0 otherwise; with eta > 0 each
    agreeing cell contributes (1 - eta) and each disagreeing cell eta.
    """
    o = np.asarray(o, dtype=bool)
    if o.size != state.n_cells:
        raise DimensionMismatchError(f"observation has {o.size} cells, state has {state.n_cells}")
    disagree = int(np.count_nonzero(emitted_observation(state, action, dyn, sp) != o))
    if sp.eta == 0.0:
        return 1.0 if disagree == 0 else 0.0
    agree = state.n_cells - disagree
    return float((1.0 - sp.eta) ** agree * sp.eta ** disagree)


def observation_key(o: Observation) -> bytes:
    """Hashable compact form of an observation, used to key search-tree branches."""
    return np.packbits(np.asarray(o, dtype=bool)).tobytes()
