import json

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError
from unittest.mock import patch

from app.core.exceptions import ConfigurationError, DimensionMismatchError, OutputPathError
from app.services.belief import Belief
from app.services.dynamics import SpreadParams, TableSpread
from app.services.grid import CellClass
from app.services.harness import (
    BASE_RATES,
    WIND_DIRECTIONS,
    ExperimentConfig,
    Scenario,
    ScenarioConfig,
    aggregate_episodes,
    class_counts,
    decode_scenario_index,
    episode_seeds,
    generate_scenario,
    load_experiment_config,
    play_episode,
    run_episode,
    run_experiment,
)
from app.services.planner import PlannerConfig, plan
from tests.helpers import make_state

SMALL_PLANNER = PlannerConfig(n_simulations=10, n_particles=10, node_particles=5, max_depth=3)


def small_experiment(**overrides) -> ExperimentConfig:
    values = dict(
        grid_size=4,
        q_values=[1.0],
        n_initial_states=6,
        n_spread_scenarios=4,
        horizon=5,
        planner=SMALL_PLANNER,
        seed=7,
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def test_class_counts_largest_remainder():
    assert class_counts((0.2, 0.3, 0.5), 100) == [20, 30, 50]
    assert class_counts((0.2, 0.3, 0.5), 16) == [3, 5, 8]
    assert sum(class_counts((1 / 3, 1 / 3, 1 / 3), 10)) == 10
    assert class_counts((1 / 3, 1 / 3, 1 / 3), 10) == [4, 3, 3]


def test_small_grid_has_one_fire():
    scenario = generate_scenario(ScenarioConfig(grid_size=4), 0)
    assert scenario.state.fire.sum() == 1
    assert np.all(scenario.state.fuel == 5)


def test_large_grid_class_mix():
    scenario = generate_scenario(ScenarioConfig(grid_size=10), 3)
    counts = np.bincount(scenario.state.classes, minlength=3)
    assert counts[int(CellClass.RED)] == 20
    assert counts[int(CellClass.YELLOW)] == 30
    assert counts[int(CellClass.GREEN)] == 50
    assert scenario.state.fire.sum() == 10


def test_generation_is_deterministic():
    cfg = ScenarioConfig(grid_size=6, seed=3)
    a, b = generate_scenario(cfg, 11), generate_scenario(cfg, 11)
    assert np.array_equal(a.state.fire, b.state.fire)
    assert np.array_equal(a.state.classes, b.state.classes)
    assert a.spread == b.spread


def test_initial_map_shared_across_spread_scenarios():
    cfg = ScenarioConfig(grid_size=5, n_spread_scenarios=8)
    first, other = generate_scenario(cfg, 8), generate_scenario(cfg, 9)
    assert first.init_state == other.init_state == 1
    assert np.array_equal(first.state.fire, other.state.fire)
    assert first.spread != other.spread


def test_decode_scenario_index():
    full = ScenarioConfig(n_spread_scenarios=256)
    assert decode_scenario_index(full, 0) == (0, 0, 0, 0)
    assert decode_scenario_index(full, 257) == (1, 1, 0, 1)
    assert decode_scenario_index(full, 255) == (0, 255, 15, 15)

    subset = ScenarioConfig(n_spread_scenarios=4)
    assert decode_scenario_index(subset, 1) == (0, 1, 4, 0)
    scenario = generate_scenario(subset, 1)
    assert scenario.spread.wind_direction == WIND_DIRECTIONS[4] == 90.0
    assert scenario.spread.base_rate == pytest.approx(BASE_RATES[0])


def test_index_out_of_range():
    cfg = ScenarioConfig(n_initial_states=2, n_spread_scenarios=3)
    with pytest.raises(ValueError):
        generate_scenario(cfg, 6)
    with pytest.raises(ValueError):
        decode_scenario_index(cfg, -1)


def test_zero_fire_episode_costs_nothing():
    cfg = small_experiment(fire_fraction=0.0)
    for policy in ("baseline", "uafr"):
        result = play_episode(cfg, policy, 1.0)
        assert result.neg_utility == 0.0
        assert result.steps == 0


def test_single_green_fire_is_put_out():
    state = make_state(2, 2, burning=[0])
    scenario = Scenario(2, 0, 0, 0, state, SpreadParams(base_rate=0.0))
    cfg = small_experiment(grid_size=2)
    result = run_episode(scenario, "baseline", 1.0, cfg, np.random.default_rng(0))
    assert result.neg_utility == 1.0
    assert result.steps == 1


def test_horizon_caps_episode_length():
    state = make_state(2, 2, burning=[0, 1, 2, 3])
    scenario = Scenario(2, 0, 0, 0, state, SpreadParams(base_rate=0.0))
    cfg = small_experiment(grid_size=2, horizon=3)
    result = run_episode(scenario, "baseline", 0.0, cfg, np.random.default_rng(0))
    assert result.steps == 3
    assert result.neg_utility == 12.0


def red_fire_scenario() -> Scenario:
    state = make_state(3, 3, burning=[4], classes=[int(CellClass.RED)] * 9)
    return Scenario(3, 0, 0, 0, state, SpreadParams(base_rate=0.0))


def test_planner_receives_latest_observation():
    scenario = red_fire_scenario()
    cfg = small_experiment(grid_size=3, planner=PlannerConfig(n_simulations=200, n_particles=10))
    with patch("app.services.harness.plan", wraps=plan) as spy:
        result = run_episode(scenario, "uafr", 1.0, cfg, np.random.default_rng(0))
    assert result.steps == 1
    assert np.array_equal(spy.call_args.kwargs["observed"], scenario.state.fire)


def test_uafr_recovers_fire_its_belief_lost():
    scenario = red_fire_scenario()
    calm = make_state(3, 3, classes=[int(CellClass.RED)] * 9)
    cfg = small_experiment(grid_size=3, horizon=10, planner=PlannerConfig(n_simulations=200, n_particles=10))
    with patch("app.services.harness.initial_belief", return_value=Belief((calm,) * 10)):
        result = run_episode(scenario, "uafr", 1.0, cfg, np.random.default_rng(0))
    # nothing to plan on at first; the next observation puts the fire back into the belief
    assert result.steps == 2
    assert result.neg_utility == 20.0


def test_unknown_policy_rejected():
    scenario = generate_scenario(ScenarioConfig(), 0)
    with pytest.raises(ConfigurationError):
        run_episode(scenario, "random", 1.0, small_experiment(), np.random.default_rng(0))


def test_on_step_sees_every_step():
    seen = []
    result = play_episode(small_experiment(), "baseline", 0.8, on_step=lambda t, *rest: seen.append(t))
    assert seen == list(range(result.steps))


def test_play_episode_with_spread_table():
    cfg = small_experiment()
    table = TableSpread(4, 4, np.zeros(16))
    result = play_episode(cfg, "baseline", 1.0, spread=table)
    # one fire, certain suppression and no spread
    assert result.steps == 1
    with pytest.raises(DimensionMismatchError):
        play_episode(cfg, "baseline", 1.0, spread=TableSpread(3, 3, np.zeros(9)))


def test_common_random_numbers_share_environment_seed():
    cfg = small_experiment()
    assert episode_seeds(cfg, 4, 0, 5, 0)[0] == episode_seeds(cfg, 4, 0, 5, 1)[0]
    assert episode_seeds(cfg, 4, 0, 5, 0)[1] != episode_seeds(cfg, 4, 0, 5, 1)[1]
    independent = small_experiment(common_random_numbers=False)
    assert episode_seeds(independent, 4, 0, 5, 0)[0] != episode_seeds(independent, 4, 0, 5, 1)[0]


def test_run_experiment_writes_tables(tmp_path):
    cfg = small_experiment()
    results = run_experiment(cfg, tmp_path, echo=False)

    assert len(results.episodes) == 48
    assert len(results.aggregate) == 2
    assert list(results.aggregate["policy"]) == ["baseline", "uafr"]
    assert set(results.aggregate["episodes"]) == {24}

    on_disk = pd.read_csv(tmp_path / "episodes.csv")
    assert list(on_disk.columns) == list(results.episodes.columns)
    assert len(pd.read_csv(tmp_path / "aggregate.csv")) == 2

    # paired episodes see the same environment stream
    by_policy = results.episodes.groupby("policy")["seed"].apply(list)
    assert by_policy["baseline"] == by_policy["uafr"]


def test_aggregate_matches_episode_means(tmp_path):
    results = run_experiment(small_experiment(), tmp_path, echo=False)
    expected = results.episodes.groupby("policy")["neg_utility"].mean()
    for row in results.aggregate.itertuples():
        assert row.mean_neg_utility == pytest.approx(expected[row.policy])
    assert aggregate_episodes(results.episodes).equals(results.aggregate)


def test_experiment_is_reproducible(tmp_path):
    cfg = small_experiment()
    run_experiment(cfg, tmp_path / "a", echo=False)
    run_experiment(cfg, tmp_path / "b", echo=False)
    first = pd.read_csv(tmp_path / "a" / "episodes.csv").drop(columns="wall_ms")
    second = pd.read_csv(tmp_path / "b" / "episodes.csv").drop(columns="wall_ms")
    pd.testing.assert_frame_equal(first, second)


def test_parallel_run_matches_serial(tmp_path):
    cfg = small_experiment(policies=["baseline"], n_initial_states=2, q_values=[0.8])
    serial = run_experiment(cfg, tmp_path / "serial", echo=False).episodes.drop(columns="wall_ms")
    parallel = run_experiment(cfg, tmp_path / "parallel", workers=2, echo=False).episodes.drop(columns="wall_ms")
    pd.testing.assert_frame_equal(serial, parallel)


def test_experiment_prints_aggregate(tmp_path, capsys):
    run_experiment(small_experiment(policies=["baseline"], n_initial_states=1), tmp_path)
    assert "mean_neg_utility" in capsys.readouterr().out


def test_config_validation():
    with pytest.raises(ValidationError):
        ExperimentConfig(grid_sizes=[])
    with pytest.raises(ValidationError):
        ExperimentConfig(colour="red")
    with pytest.raises(ValidationError):
        ExperimentConfig(class_mix=(0.5, 0.5, 0.5))
    with pytest.raises(ValidationError):
        ExperimentConfig(q_values=[1.2])
    assert ExperimentConfig(grid_sizes=[4, 10]).sizes() == [4, 10]


def test_load_experiment_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"grid_size": 4, "planner": {"n_simulations": 20}}), encoding="utf-8")
    cfg = load_experiment_config(path)
    assert cfg.planner.n_simulations == 20

    path.write_text(json.dumps({"grid_size": 1}), encoding="utf-8")
    with pytest.raises(ConfigurationError, match="grid_size"):
        load_experiment_config(path)

    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_experiment_config(path)
    with pytest.raises(ConfigurationError):
        load_experiment_config(tmp_path / "missing.json")


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "taken"
    blocker.write_text("", encoding="utf-8")
    with pytest.raises(OutputPathError):
        run_experiment(small_experiment(), blocker, echo=False)


@pytest.mark.slow
@pytest.mark.parametrize("grid_size, n_spread, margin", [(4, 64, 0.03), (8, 16, 0.05)])
def test_planner_beats_baseline(tmp_path, grid_size, n_spread, margin):
    cfg = ExperimentConfig(
        grid_size=grid_size,
        q_values=[1.0, 0.8],
        n_initial_states=6,
        n_spread_scenarios=n_spread,
        seed=1,
    )
    aggregate = run_experiment(cfg, tmp_path, workers=8, echo=False).aggregate
    for q, rows in aggregate.groupby("q"):
        cost = rows.set_index("policy")["mean_neg_utility"]
        assert cost["uafr"] <= (1 - margin) * cost["baseline"], (q, cost.to_dict())
