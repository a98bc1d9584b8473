"""
Online suppression planning.

`plan` runs a POMCPOW-style tree search over alternating action and
observation nodes with progressive widening on both. Observation branches do
not keep weighted particle collections: when a branch is created its belief is
produced by the rejection-free particle filter (`update_belief`) from the
parent belief, and every later simulation through the branch appends its
consistent simulated state. Next states are drawn uniformly from that
equally-weighted collection.

`baseline_policy` is the greedy comparison policy: suppress the observed
burning cells with the largest cost.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.exceptions import DimensionMismatchError
from app.services.belief import Belief, update_belief
from app.services.dynamics import DynamicsParams, step
from app.services.grid import NOOP, Action, GridState, UtilityMap, make_action, neighbor_table, reward
from app.services.sensing import Observation, SensingParams, observation_key, observe

logger = logging.getLogger(__name__)


class PlannerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_simulations: int = Field(1000, ge=0)
    max_depth: int = Field(10, ge=0)
    # None means |U(Red)| of the utility map in use
    ucb_c: float | None = Field(None, ge=0)
    gamma_discount: float = Field(0.95, ge=0, le=1)
    k_obs: float = Field(4.0, gt=0)
    alpha_obs: float = Field(0.1, ge=0, lt=1)
    k_act: float = Field(8.0, gt=0)
    alpha_act: float = Field(0.5, ge=0, lt=1)
    k_max: int = Field(1, ge=0)
    n_particles: int = Field(100, ge=1)
    node_particles: int = Field(20, ge=1)
    workers: int = Field(1, ge=1)

    def exploration(self, util: UtilityMap) -> float:
        return abs(util.worst) if self.ucb_c is None else self.ucb_c


def widening_limit(k: float, n_visits: int, alpha: float) -> int:
    """Maximum number of children a node with `n_visits` visits may hold."""
    return math.ceil(k * max(n_visits, 1) ** alpha)


# ------------------------------------------------------------------------------
# Baseline and rollout
# ------------------------------------------------------------------------------

def baseline_policy(o: Observation, classes: np.ndarray, util: UtilityMap, k_max: int) -> Action:
    """
    Target up to `k_max` cells that show fire, most costly class first, ties
    broken by lowest cell index. No visible fire gives the no-op.
    """
    o = np.asarray(o, dtype=bool)
    classes = np.asarray(classes)
    if o.size != classes.size:
        raise ValueError(f"observation has {o.size} cells, class map has {classes.size}")
    seen = np.flatnonzero(o)
    if seen.size == 0 or k_max < 1:
        return NOOP
    costs = util.as_array()[classes[seen]]
    # lexsort: last key is primary -> by cost ascending (most negative), then index
    order = np.lexsort((seen, costs))
    return make_action(seen[order[:k_max]], k_max)


def rollout(
    state: GridState,
    depth: int,
    dyn: DynamicsParams,
    util: UtilityMap,
    gamma: float,
    k_max: int,
    rng: np.random.Generator,
) -> float:
    """Discounted return of the baseline policy acting on the true state."""
    total = 0.0
    discount = 1.0
    for _ in range(depth):
        if not state.is_burning:
            break
        action = baseline_policy(state.fire, state.classes, util, k_max)
        total += discount * reward(state, util)
        state = step(state, action, dyn, rng)
        discount *= gamma
    return total


# ------------------------------------------------------------------------------
# Search tree
# ------------------------------------------------------------------------------

@dataclass(eq=False)
class ActionNode:
    action: Action
    index: int
    n: int = 0
    q: float = 0.0
    children: dict[bytes, ObservationNode] = field(default_factory=dict)

    def update(self, total: float) -> None:
        self.n += 1
        self.q += (total - self.q) / self.n


@dataclass(eq=False)
class ObservationNode:
    particles: list[GridState]
    n: int = 0
    # visits through the parent action node that produced this observation
    m: int = 0
    children: list[ActionNode] = field(default_factory=list)
    candidates: list[Action] | None = None

    def belief(self) -> Belief:
        return Belief(tuple(self.particles))


def candidate_actions(
    particles: list[GridState] | tuple[GridState, ...],
    util: UtilityMap,
    k_max: int,
    observed: Observation | None = None,
) -> list[Action]:
    """
    Actions in widening order: the no-op, then singleton targets among cells
    that may be burning and their neighbors, sorted by descending
    |U| * marginal (ties: observed fire first, then index), then the greedy
    unions of the top 2..k_max burning candidates.

    `observed` adds the cells the latest observation shows burning (and their
    neighbors) even where no particle holds fire.
    """
    if k_max < 1:
        return [NOOP]
    first = particles[0]
    marginals = np.mean([p.fire for p in particles], axis=0)
    seen = np.zeros(first.n_cells, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    if seen.size != first.n_cells:
        raise DimensionMismatchError(f"observation has {seen.size} cells, grid has {first.n_cells}")
    burning = np.flatnonzero((marginals > 0) | seen)
    if burning.size == 0:
        return [NOOP]

    table = neighbor_table(first.rows, first.cols)
    pool = set(burning.tolist())
    for cell in burning:
        pool.update(int(j) for j in table[cell] if j >= 0)
    pool = np.array(sorted(pool))

    score = np.abs(util.as_array()[first.classes[pool]]) * marginals[pool]
    ordered = pool[np.lexsort((pool, ~seen[pool], -score))]

    actions = [NOOP] + [make_action([c], k_max) for c in ordered]
    hot = [int(c) for c in ordered if marginals[c] > 0 or seen[c]]
    for size in range(2, min(k_max, len(hot)) + 1):
        actions.append(make_action(hot[:size], k_max))
    return actions


class POMCPOWPlanner:
    """Single search tree; `plan` below wraps it with optional root parallelism."""

    def __init__(
        self,
        cfg: PlannerConfig,
        dyn: DynamicsParams,
        sp: SensingParams,
        util: UtilityMap,
        rng: np.random.Generator,
    ):
        self.cfg = cfg
        self.dyn = dyn
        self.sp = sp
        self.util = util
        self.rng = rng
        self.c = cfg.exploration(util)

    def search(self, b: Belief, observed: Observation | None = None) -> ObservationNode:
        root = ObservationNode(particles=list(b.particles))
        root.candidates = candidate_actions(root.particles, self.util, self.cfg.k_max, observed)
        for _ in range(self.cfg.n_simulations):
            s = b.particles[self.rng.integers(len(b))]
            self.simulate(s, root, self.cfg.max_depth)
        return root

    def select_action(self, node: ObservationNode) -> ActionNode:
        if node.candidates is None:
            node.candidates = candidate_actions(node.particles, self.util, self.cfg.k_max)
        limit = widening_limit(self.cfg.k_act, node.n, self.cfg.alpha_act)
        if len(node.children) < min(limit, len(node.candidates)):
            idx = len(node.children)
            node.children.append(ActionNode(node.candidates[idx], idx))

        log_n = math.log(max(node.n, 1))
        best, best_score = None, -math.inf
        for child in node.children:
            if child.n == 0:
                score = math.inf
            else:
                score = child.q + self.c * math.sqrt(log_n / child.n)
            # strict > keeps the lowest action index on ties
            if score > best_score:
                best, best_score = child, score
        return best

    def simulate(self, s: GridState, node: ObservationNode, depth: int) -> float:
        if depth == 0 or not s.is_burning:
            return 0.0

        a_node = self.select_action(node)
        a = a_node.action
        r = reward(s, self.util)
        gamma = self.cfg.gamma_discount

        s_next = step(s, a, self.dyn, self.rng)
        o = observe(s, s_next, a, self.dyn, self.sp)
        key = o_key = observation_key(o)

        limit = widening_limit(self.cfg.k_obs, a_node.n, self.cfg.alpha_obs)
        if key in a_node.children or len(a_node.children) < limit:
            child = a_node.children.get(key)
        else:
            keys = list(a_node.children)
            counts = np.array([a_node.children[k].m for k in keys], dtype=float)
            key = keys[self.rng.choice(len(keys), p=counts / counts.sum())]
            child = a_node.children[key]

        if child is None:
            child = self.expand(node, a, o, s_next)
            a_node.children[key] = child
            child.m += 1
            total = r + gamma * rollout(
                s_next, depth - 1, self.dyn, self.util, gamma, self.cfg.k_max, self.rng
            )
        else:
            child.m += 1
            # a state simulated under a different observation does not belong to this branch
            if o_key == key:
                child.particles.append(s_next)
            s_next = child.particles[self.rng.integers(len(child.particles))]
            total = r + gamma * self.simulate(s_next, child, depth - 1)

        node.n += 1
        a_node.update(total)
        return total

    def expand(self, parent: ObservationNode, a: Action, o: Observation, s_next: GridState) -> ObservationNode:
        """New observation branch seeded by the particle filter update of the parent belief."""
        posterior = update_belief(
            parent.belief(), a, o, self.dyn, self.sp, self.rng, n_particles=self.cfg.node_particles
        )
        return ObservationNode(particles=list(posterior.particles) + [s_next])


def _root_statistics(
    b: Belief,
    cfg: PlannerConfig,
    dyn: DynamicsParams,
    sp: SensingParams,
    util: UtilityMap,
    seed: np.random.SeedSequence,
    observed: Observation | None = None,
) -> list[tuple[Action, int, float]]:
    planner = POMCPOWPlanner(cfg, dyn, sp, util, np.random.default_rng(seed))
    root = planner.search(b, observed)
    return [(c.action, c.n, c.q) for c in root.children]


def best_root_action(stats: list[tuple[Action, int, float]]) -> Action:
    """Most visited root action; ties go to the earliest (lowest index) action."""
    best, best_n = NOOP, -1
    for action, n, _ in stats:
        if n > best_n:
            best, best_n = action, n
    return best


def simulation_shares(n_simulations: int, workers: int) -> list[int]:
    """Split `n_simulations` over at most `workers` trees; the first trees take the remainder."""
    base, extra = divmod(n_simulations, workers)
    shares = [base + (1 if i < extra else 0) for i in range(workers)]
    return [s for s in shares if s > 0]


def plan(
    b: Belief,
    cfg: PlannerConfig,
    dyn: DynamicsParams,
    sp: SensingParams,
    util: UtilityMap,
    rng: np.random.Generator,
    observed: Observation | None = None,
) -> Action:
    """Choose the next suppression action for belief `b`."""
    return plan_with_stats(b, cfg, dyn, sp, util, rng, observed)[0]


def plan_with_stats(
    b: Belief,
    cfg: PlannerConfig,
    dyn: DynamicsParams,
    sp: SensingParams,
    util: UtilityMap,
    rng: np.random.Generator,
    observed: Observation | None = None,
) -> tuple[Action, list[tuple[Action, int, float]]]:
    """`plan` plus the (action, visits, value) statistics of the root children."""
    if cfg.n_simulations < 1:
        raise ValueError("n_simulations must be at least 1")
    if len(b) == 0:
        raise ValueError("cannot plan from an empty belief")

    if cfg.workers == 1:
        planner = POMCPOWPlanner(cfg, dyn, sp, util, rng)
        root = planner.search(b, observed)
        stats = [(c.action, c.n, c.q) for c in root.children]
    else:
        # root parallelism: independent trees, visit counts summed per action
        shares = simulation_shares(cfg.n_simulations, cfg.workers)
        seeds = np.random.SeedSequence(int(rng.integers(2**32))).spawn(len(shares))
        jobs = [
            (b, cfg.model_copy(update={"n_simulations": n, "workers": 1}), dyn, sp, util, seed, observed)
            for n, seed in zip(shares, seeds)
        ]
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            parts = list(pool.map(_root_statistics, *zip(*jobs)))
        merged: dict[Action, list[float]] = {}
        order: list[Action] = []
        for part in parts:
            for action, n, q in part:
                if action not in merged:
                    merged[action] = [0, 0.0]
                    order.append(action)
                merged[action][1] += n * q
                merged[action][0] += n
        stats = [(a, int(merged[a][0]), merged[a][1] / merged[a][0] if merged[a][0] else 0.0) for a in order]

    action = best_root_action(stats)
    logger.debug(f"Planned {action.sorted_targets()} from {len(stats)} root actions")
    return action, stats
