"""
Particle belief and the rejection-free particle filter update.

The update propagates |b| particles drawn uniformly (with replacement) from
the current belief, weights each by the observation likelihood, falls back to
uniform weights when every weight is zero, and multinomially resamples |b|
particles. The returned particles are equally weighted.

`track_belief` is the update used for a belief that follows a real episode:
after the filter update, particles that could not have produced the
observation (all of them when the uniform fallback fired) are reconciled
with it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.core.exceptions import DimensionMismatchError, InvalidCellError
from app.services.dynamics import DynamicsParams, next_fire_marginals, step
from app.services.grid import Action, GridState, check_cell
from app.services.sensing import Observation, SensingParams, emitted_observation, observation_likelihood

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Belief:
    particles: tuple[GridState, ...]

    def __post_init__(self):
        if not self.particles:
            raise ValueError("a belief needs at least one particle")
        first = self.particles[0]
        for p in self.particles[1:]:
            if not p.same_grid(first):
                raise DimensionMismatchError("all particles must share grid dimensions")

    def __len__(self) -> int:
        return len(self.particles)

    @property
    def grid(self) -> GridState:
        return self.particles[0]

    def fire_marginals(self) -> np.ndarray:
        """Per-cell fraction of particles that are burning."""
        return np.mean([p.fire for p in self.particles], axis=0)


def initial_belief(known_state: GridState, n_particles: int) -> Belief:
    if n_particles < 1:
        raise ValueError(f"n_particles must be >= 1, got {n_particles}")
    state = known_state.detached()
    return Belief(tuple(state for _ in range(n_particles)))


def resample_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Multinomial resampling of len(weights) indices proportional to `weights`.
    All-zero weights are replaced by the uniform distribution.
    """
    weights = np.asarray(weights, dtype=float)
    n = weights.size
    total = weights.sum()
    if total <= 0.0:
        logger.debug(f"All {n} particle weights vanished; reweighting uniformly")
        probs = np.full(n, 1.0 / n)
    else:
        probs = weights / total
    return rng.choice(n, size=n, replace=True, p=probs)


def propagate(
    b: Belief,
    a: Action,
    o: Observation,
    dyn: DynamicsParams,
    sp: SensingParams,
    rng: np.random.Generator,
    n_samples: int | None = None,
) -> tuple[list[GridState], np.ndarray]:
    """Sample, advance and weight `n_samples` particles (default |b|)."""
    n_samples = len(b) if n_samples is None else n_samples
    picks = rng.integers(len(b), size=n_samples)
    propagated = []
    weights = np.empty(n_samples)
    for i, k in enumerate(picks):
        s_next = step(b.particles[k], a, dyn, rng)
        propagated.append(s_next)
        weights[i] = observation_likelihood(o, s_next, a, sp, dyn)
    return propagated, weights


def update_belief(
    b: Belief,
    a: Action,
    o: Observation,
    dyn: DynamicsParams,
    sp: SensingParams,
    rng: np.random.Generator,
    n_particles: int | None = None,
) -> Belief:
    """
    Rejection-free particle filter update of `b` after action `a` and observation `o`.

    `n_particles` defaults to |b|, which keeps the particle count constant.
    """
    if len(b) == 0:
        raise ValueError("cannot update an empty belief")
    propagated, weights = propagate(b, a, o, dyn, sp, rng, n_particles)
    keep = resample_indices(weights, rng)
    return Belief(tuple(propagated[k] for k in keep))


def reconcile_particle(s: GridState, a: Action, o: Observation, dyn: DynamicsParams, sp: SensingParams) -> GridState:
    """
    Smallest edit of the propagated particle `s` that agrees with what `o`
    says about the current step:
      - targeted cells take their observed status
      - reported fire the predecessor of `s` cannot account for is lit
      - fire carried over from the predecessor that `o` does not report is put out
    Fresh ignitions `o` is silent about are kept. The result has no predecessor.
    """
    o = np.asarray(o, dtype=bool)
    if o.size != s.n_cells:
        raise DimensionMismatchError(f"observation has {o.size} cells, state has {s.n_cells}")
    if s.prev is None:
        fire = o.copy()
    else:
        marginals = next_fire_marginals(s.prev, dyn)
        fire = s.fire.copy()
        fire[o & ~(marginals > sp.gamma_obs)] = True
        fire[~o & s.prev.fire & (marginals == 1.0)] = False
    if not a.is_noop:
        targets = a.mask(s.n_cells)
        fire[targets] = o[targets]
    fuel = np.where(fire, np.maximum(s.fuel, 1), s.fuel)
    return s.with_fire(fire, fuel=fuel)


def track_belief(
    b: Belief,
    a: Action,
    o: Observation,
    dyn: DynamicsParams,
    sp: SensingParams,
    rng: np.random.Generator,
) -> Belief:
    """`update_belief`, then every particle whose emitted observation differs from `o` is reconciled with it."""
    posterior = update_belief(b, a, o, dyn, sp, rng)
    o = np.asarray(o, dtype=bool)
    # resampling repeats particles; reconcile each distinct one once
    fixed: dict[int, GridState] = {}
    particles = []
    for p in posterior.particles:
        if id(p) not in fixed:
            agrees = np.array_equal(emitted_observation(p, a, dyn, sp), o)
            fixed[id(p)] = p if agrees else reconcile_particle(p, a, o, dyn, sp)
        particles.append(fixed[id(p)])
    changed = sum(fixed[id(p)] is not p for p in posterior.particles)
    if changed:
        logger.debug(f"Reconciled {changed} of {len(particles)} particles with the observation")
    return Belief(tuple(particles))


def belief_marginal(b: Belief, cell: int) -> float:
    """Fraction of particles burning at `cell`."""
    try:
        check_cell(b.grid, cell)
    except InvalidCellError:
        logger.error(f"belief_marginal: cell {cell} out of range")
        raise
    return float(np.mean([p.fire[cell] for p in b.particles]))
