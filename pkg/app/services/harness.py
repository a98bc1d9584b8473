"""
Scenario generation, episode execution and the policy comparison experiment.

Scenario indices decode as
    init_state      = index // n_spread_scenarios
    spread_scenario = index %  n_spread_scenarios
    combo           = spread_scenario * 256 // n_spread_scenarios
    wind            = WIND_DIRECTIONS[combo // 16]
    base_rate       = BASE_RATES[combo % 16]
so the full 256 combinations are enumerable and smaller scenario counts take
an evenly spaced subset of them.
"""
from __future__ import annotations

import json
import logging
import math
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.exceptions import ConfigurationError, DimensionMismatchError, OutputPathError
from app.services.belief import initial_belief, track_belief
from app.services.dynamics import DynamicsParams, SpreadParams, Spread, step
from app.services.grid import Action, CellClass, GridState, UtilityMap, reward
from app.services.planner import PlannerConfig, baseline_policy, plan
from app.services.sensing import Observation, SensingParams, full_observation, observe

logger = logging.getLogger(__name__)

WIND_DIRECTIONS = np.arange(16) * 22.5
BASE_RATES = np.linspace(0.05, 0.8, 16)
SPREAD_COMBINATIONS = len(WIND_DIRECTIONS) * len(BASE_RATES)

POLICIES = ("baseline", "uafr")
EPISODE_COLUMNS = ["grid_size", "q", "policy", "init_state", "scenario", "seed", "neg_utility", "steps", "wall_ms"]
AGGREGATE_KEYS = ["grid_size", "q", "policy"]


# ------------------------------------------------------------------------------
# Configuration
# ------------------------------------------------------------------------------

class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    grid_size: int = Field(4, ge=2)
    fire_fraction: float = Field(0.10, ge=0, le=1)
    class_mix: tuple[float, float, float] = (0.2, 0.3, 0.5)
    fuel_init: int = Field(5, ge=1)
    q_values: list[float] = [1.0, 0.9, 0.8]
    n_initial_states: int = Field(6, ge=1)
    n_spread_scenarios: int = Field(256, ge=1, le=SPREAD_COMBINATIONS)
    horizon: int = Field(100, ge=0)
    wind_strength: float = Field(0.5, ge=0, le=1)
    # only meaningful when fire maps come from measured intensities
    frp_threshold: float = Field(1.0, ge=0)
    seed: int = Field(0, ge=0)

    @field_validator("class_mix")
    @classmethod
    def _mix_sums_to_one(cls, mix):
        if any(not 0.0 <= f <= 1.0 for f in mix):
            raise ValueError("class_mix fractions must lie in [0, 1]")
        if not math.isclose(sum(mix), 1.0, abs_tol=1e-9):
            raise ValueError(f"class_mix must sum to 1, got {sum(mix)}")
        return mix

    @field_validator("q_values")
    @classmethod
    def _q_in_range(cls, values):
        if any(not 0.0 <= q <= 1.0 for q in values):
            raise ValueError("every q must lie in [0, 1]")
        return values

    @property
    def n_scenarios(self) -> int:
        return self.n_initial_states * self.n_spread_scenarios


class SensingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma_obs: float = Field(0.5, ge=0, le=1)
    eta: float = Field(0.0, ge=0, le=1)

    def params(self) -> SensingParams:
        return SensingParams(self.gamma_obs, self.eta)


class UtilityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    red: float = -10.0
    yellow: float = -5.0
    green: float = -1.0

    @model_validator(mode="after")
    def _ordered(self):
        if not (self.red < self.yellow < self.green <= 0):
            raise ValueError("utilities must satisfy red < yellow < green <= 0")
        return self

    def utility_map(self) -> UtilityMap:
        return UtilityMap(self.red, self.yellow, self.green)


class ExperimentConfig(ScenarioConfig):
    grid_sizes: list[int] | None = None
    policies: list[Literal["baseline", "uafr"]] = list(POLICIES)
    planner: PlannerConfig = PlannerConfig()
    sensing: SensingConfig = SensingConfig()
    utilities: UtilityConfig = UtilityConfig()
    deterministic_spread: bool = False
    # same environment random stream for every policy on a (scenario, q) pair
    common_random_numbers: bool = True

    @field_validator("grid_sizes")
    @classmethod
    def _grid_sizes(cls, sizes):
        if sizes is not None:
            if not sizes:
                raise ValueError("grid_sizes must not be empty")
            if any(s < 2 for s in sizes):
                raise ValueError("every grid size must be at least 2")
        return sizes

    @field_validator("policies")
    @classmethod
    def _policies(cls, policies):
        if not policies:
            raise ValueError("policies must not be empty")
        return policies

    def sizes(self) -> list[int]:
        return list(self.grid_sizes) if self.grid_sizes is not None else [self.grid_size]

    def for_grid(self, grid_size: int) -> ExperimentConfig:
        return self.model_copy(update={"grid_size": grid_size})


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return ExperimentConfig.model_validate(raw)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigurationError(f"invalid config {path}: {problems}") from e


# ------------------------------------------------------------------------------
# Scenarios
# ------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Scenario:
    grid_size: int
    index: int
    init_state: int
    spread_index: int
    state: GridState
    spread: Spread


def decode_scenario_index(cfg: ScenarioConfig, index: int) -> tuple[int, int, int, int]:
    """index -> (init_state, spread_scenario, wind_index, rate_index)."""
    if not 0 <= index < cfg.n_scenarios:
        raise ValueError(f"scenario index {index} outside [0, {cfg.n_scenarios})")
    init_state, spread_index = divmod(index, cfg.n_spread_scenarios)
    combo = spread_index * SPREAD_COMBINATIONS // cfg.n_spread_scenarios
    wind_index, rate_index = divmod(combo, len(BASE_RATES))
    return init_state, spread_index, wind_index, rate_index


def class_counts(mix: tuple[float, float, float], n_cells: int) -> list[int]:
    """Largest-remainder apportionment of n_cells to the class mix."""
    quotas = [f * n_cells for f in mix]
    counts = [math.floor(q + 1e-9) for q in quotas]
    leftover = n_cells - sum(counts)
    by_remainder = sorted(range(len(mix)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in by_remainder[:leftover]:
        counts[k] += 1
    return counts


def generate_scenario(cfg: ScenarioConfig, index: int) -> Scenario:
    """Deterministic function of (cfg.seed, cfg.grid_size, index)."""
    init_state, spread_index, wind_index, rate_index = decode_scenario_index(cfg, index)
    n = cfg.grid_size * cfg.grid_size
    # the initial map depends on init_state only, so it is shared by its spread scenarios
    rng = np.random.default_rng([cfg.seed, cfg.grid_size, init_state])

    classes = np.empty(n, dtype=np.int8)
    perm = rng.permutation(n)
    start = 0
    for cell_class, count in zip(CellClass, class_counts(cfg.class_mix, n)):
        classes[perm[start:start + count]] = int(cell_class)
        start += count

    n_fire = math.floor(cfg.fire_fraction * n + 1e-9)
    fire = np.zeros(n, dtype=bool)
    fire[rng.choice(n, size=n_fire, replace=False)] = True

    state = GridState(cfg.grid_size, cfg.grid_size, fire, np.full(n, cfg.fuel_init), classes)
    spread = SpreadParams(
        wind_direction=float(WIND_DIRECTIONS[wind_index]),
        wind_strength=cfg.wind_strength,
        base_rate=float(BASE_RATES[rate_index]),
    )
    return Scenario(cfg.grid_size, index, init_state, spread_index, state, spread)


# ------------------------------------------------------------------------------
# Episodes
# ------------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    grid_size: int
    q: float
    policy: str
    init_state: int
    scenario: int
    seed: int
    neg_utility: float
    steps: int
    wall_ms: float

    def as_row(self) -> dict:
        return asdict(self)


# on_step(t, state, action, observation, reward)
StepCallback = Callable[[int, GridState, Action, Observation, float], None]


def run_episode(
    scenario: Scenario,
    policy: str,
    q: float,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    planner_rng: np.random.Generator | None = None,
    seed: int = 0,
    on_step: StepCallback | None = None,
) -> EpisodeResult:
    """
    Play one episode. `rng` drives the environment only; the planner and its
    belief updates draw from `planner_rng` so the environment stream is the
    same whichever policy runs. The planner sees the latest observation next
    to its belief, which `track_belief` keeps in line with what is observed.
    """
    if policy not in POLICIES:
        raise ConfigurationError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
    started = time.perf_counter()
    util = cfg.utilities.utility_map()
    sp = cfg.sensing.params()
    dyn = DynamicsParams(q=q, spread=scenario.spread, deterministic=cfg.deterministic_spread)
    k_max = cfg.planner.k_max
    if planner_rng is None:
        planner_rng = rng.spawn(1)[0]

    state = scenario.state
    obs = full_observation(state)
    belief = initial_belief(state, cfg.planner.n_particles) if policy == "uafr" else None

    cost = 0.0
    steps = 0
    for t in range(cfg.horizon):
        if not state.is_burning:
            break
        if policy == "baseline":
            action = baseline_policy(obs, state.classes, util, k_max)
        else:
            action = plan(belief, cfg.planner, dyn, sp, util, planner_rng, observed=obs)
        action.validate(state, k_max)

        r = reward(state, util)
        cost -= r
        next_state = step(state, action, dyn, rng)
        obs = observe(state, next_state, action, dyn, sp)
        if belief is not None:
            belief = track_belief(belief, action, obs, dyn, sp, planner_rng)
        if on_step is not None:
            on_step(t, state, action, obs, r)
        state = next_state
        steps += 1

    result = EpisodeResult(
        grid_size=scenario.grid_size,
        q=q,
        policy=policy,
        init_state=scenario.init_state,
        scenario=scenario.spread_index,
        seed=seed,
        neg_utility=cost,
        steps=steps,
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )
    logger.info(
        f"Episode {policy} grid={scenario.grid_size} q={q} init={scenario.init_state} "
        f"scenario={scenario.spread_index}: cost {cost:g} in {steps} steps"
    )
    return result


def episode_seeds(cfg: ExperimentConfig, grid_size: int, q_index: int, index: int, policy_index: int) -> tuple[int, int]:
    """(environment seed, planner seed) derived from the master seed and the episode coordinates."""
    env_key = (grid_size, q_index, index) if cfg.common_random_numbers else (grid_size, q_index, index, policy_index)
    env = np.random.SeedSequence(cfg.seed, spawn_key=env_key)
    planner = np.random.SeedSequence(cfg.seed, spawn_key=(grid_size, q_index, index, policy_index, 1))
    return int(env.generate_state(1)[0]), int(planner.generate_state(1)[0])


def play_episode(
    cfg: ExperimentConfig,
    policy: str,
    q: float,
    scenario_index: int = 0,
    spread: Spread | None = None,
    on_step: StepCallback | None = None,
) -> EpisodeResult:
    """
    Single episode outside an experiment. Seeds match the experiment episode
    with the same coordinates when `q` is the only q value.
    """
    cfg = cfg.model_copy(update={"q_values": [q]})
    scenario = generate_scenario(cfg, scenario_index)
    if spread is not None:
        if (spread.rows, spread.cols) != scenario.state.shape:
            raise DimensionMismatchError(
                f"spread table is {spread.rows}x{spread.cols}, grid is {cfg.grid_size}x{cfg.grid_size}"
            )
        scenario = replace(scenario, spread=spread)
    policy_index = cfg.policies.index(policy) if policy in cfg.policies else 0
    env_seed, planner_seed = episode_seeds(cfg, cfg.grid_size, 0, scenario_index, policy_index)
    return run_episode(
        scenario,
        policy,
        q,
        cfg,
        np.random.default_rng(env_seed),
        np.random.default_rng(planner_seed),
        seed=env_seed,
        on_step=on_step,
    )


# ------------------------------------------------------------------------------
# Experiment
# ------------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeTask:
    episode: int
    grid_size: int
    q_index: int
    policy: str
    scenario_index: int
    cfg: ExperimentConfig


def _run_task(task: EpisodeTask) -> tuple[int, EpisodeResult]:
    cfg = task.cfg.for_grid(task.grid_size)
    env_seed, planner_seed = episode_seeds(
        cfg, task.grid_size, task.q_index, task.scenario_index, cfg.policies.index(task.policy)
    )
    scenario = generate_scenario(cfg, task.scenario_index)
    result = run_episode(
        scenario,
        task.policy,
        cfg.q_values[task.q_index],
        cfg,
        np.random.default_rng(env_seed),
        np.random.default_rng(planner_seed),
        seed=env_seed,
    )
    return task.episode, result


def experiment_tasks(cfg: ExperimentConfig) -> list[EpisodeTask]:
    tasks = []
    for grid_size in cfg.sizes():
        for q_index in range(len(cfg.q_values)):
            for policy in cfg.policies:
                for index in range(cfg.n_scenarios):
                    tasks.append(EpisodeTask(len(tasks), grid_size, q_index, policy, index, cfg))
    return tasks


def _check_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out_dir, prefix=".write-check-"):
            pass
    except OSError as e:
        raise OutputPathError(f"cannot write to {out_dir}: {e}") from e


def aggregate_episodes(episodes: pd.DataFrame) -> pd.DataFrame:
    return (
        episodes.groupby(AGGREGATE_KEYS, sort=False)
        .agg(
            mean_neg_utility=("neg_utility", "mean"),
            mean_steps=("steps", "mean"),
            episodes=("neg_utility", "size"),
        )
        .reset_index()
    )


@dataclass
class ExperimentResults:
    episodes: pd.DataFrame
    aggregate: pd.DataFrame


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, workers: int = 1, echo: bool = True) -> ExperimentResults:
    """
    Run every (grid size, q, policy, scenario) episode, write `episodes.csv`
    and `aggregate.csv` to `out_dir`, and print the aggregate table.
    """
    out_dir = Path(out_dir)
    _check_writable(out_dir)
    tasks = experiment_tasks(cfg)
    logger.info(f"Running {len(tasks)} episodes with {workers} worker(s)")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (workers * 8))))
    else:
        done = [_run_task(task) for task in tasks]
    done.sort(key=lambda pair: pair[0])

    episodes = pd.DataFrame([result.as_row() for _, result in done], columns=EPISODE_COLUMNS)
    aggregate = aggregate_episodes(episodes)

    episodes.to_csv(out_dir / "episodes.csv", index=False, lineterminator="\n")
    aggregate.to_csv(out_dir / "aggregate.csv", index=False, lineterminator="\n")
    logger.info(f"Wrote {len(episodes)} episode rows and {len(aggregate)} aggregate rows to {out_dir}")
    if echo:
        print(aggregate.to_string(index=False))
    return ExperimentResults(episodes, aggregate)
