"""Shared builders and a brute-force expectimax for tiny grids."""
import itertools
import math

import numpy as np

from app.services.dynamics import DynamicsParams, ignition_probabilities
from app.services.grid import NOOP, Action, CellClass, GridState, UtilityMap, reward


def make_state(rows, cols, burning=(), fuel=5, classes=None):
    """Grid helper: all Green unless `classes` (flat list) is given."""
    n = rows * cols
    fire = np.zeros(n, dtype=bool)
    fire[list(burning)] = True
    fuel_arr = np.full(n, fuel) if np.isscalar(fuel) else np.asarray(fuel)
    cls = np.full(n, int(CellClass.GREEN)) if classes is None else np.asarray(classes)
    return GridState(rows, cols, fire, fuel_arr, cls)


def transition_outcomes(state: GridState, action: Action, dyn: DynamicsParams):
    """Exact (probability, next state) list of one step, enumerating every draw."""
    probs = ignition_probabilities(state, dyn.spread)
    if dyn.deterministic:
        probs = (probs >= 0.5).astype(float)
    targets = [c for c in sorted(action.targets) if state.fire[c]]
    candidates = [c for c in range(state.n_cells) if probs[c] > 0]
    outcomes = []
    for hits in itertools.product((True, False), repeat=len(targets)):
        p_hit = math.prod(dyn.q if h else 1.0 - dyn.q for h in hits)
        if p_hit == 0:
            continue
        fire = state.fire.copy()
        for cell, hit in zip(targets, hits):
            if hit:
                fire[cell] = False
        fuel = state.fuel.copy()
        fuel[fire] -= 1
        fire[fuel == 0] = False
        for lit in itertools.product((True, False), repeat=len(candidates)):
            p = p_hit * math.prod(probs[c] if on else 1.0 - probs[c] for c, on in zip(candidates, lit))
            if p == 0:
                continue
            nxt = fire.copy()
            nxt[[c for c, on in zip(candidates, lit) if on]] = True
            outcomes.append((p, state.with_fire(nxt, fuel)))
    return outcomes


def expectimax_action(state: GridState, dyn: DynamicsParams, util: UtilityMap, depth: int, gamma: float) -> Action:
    """
    Optimal single-target action for a fully observed state by exhaustive
    expectimax. Ties go to the earliest of (no-op, cell 0, cell 1, ...).
    """
    actions = [NOOP] + [Action.of(c) for c in range(state.n_cells)]
    memo = {}

    def value(s: GridState, d: int) -> float:
        if d == 0 or not s.is_burning:
            return 0.0
        key = (s.fire.tobytes(), s.fuel.tobytes(), d)
        if key not in memo:
            memo[key] = max(q_value(s, a, d) for a in actions)
        return memo[key]

    def q_value(s: GridState, a: Action, d: int) -> float:
        future = sum(p * value(nxt, d - 1) for p, nxt in transition_outcomes(s, a, dyn))
        return reward(s, util) + gamma * future

    scores = [q_value(state, a, depth) for a in actions]
    best = max(scores)
    return actions[next(i for i, v in enumerate(scores) if v >= best - 1e-12)]
