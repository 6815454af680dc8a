import numpy as np
import pytest

from impulsetree import (
    ControlTable,
    Decision,
    HamiltonianSpec,
    ImpulseModel,
    Strategy,
    StrategyGapError,
    enumerate_optimal,
    enumerate_states,
    evaluate_pair,
    evaluate_strategy_exact,
    extract_strategy,
    girsanov_weights,
    impulse_budget,
    impulse_count_distribution,
    mc_evaluate_strategy,
    parse_expr,
    state_key,
    strategy_from_rule,
    value_iteration,
    walk_strategy_states,
)
from impulsetree.combined import combined_value_iteration, extract_pair

from conftest import (
    PINNED_CONFIG,
    build_problem,
    random_combined_config,
    random_impulse_config,
)


def _empty_strategy(tree):
    return strategy_from_rule(tree, lambda *args: None, (1.0,))


def _constant_reward_model(h, gamma=1.0):
    return ImpulseModel(
        impulses=(1.0,),
        costs={1.0: 0.3},
        cost_floor=0.1,
        reward_bound=gamma,
        reward=parse_expr(h),
    )


def test_exact_constant_reward_telescopes(pinned_problem):
    _, tree = pinned_problem
    model = _constant_reward_model("1")
    value = evaluate_strategy_exact(tree, model, _empty_strategy(tree))
    assert value.value == pytest.approx(1.0, abs=1e-15)  # gamma * T exactly
    assert value.reward_integral == pytest.approx(1.0, abs=1e-15)
    assert value.impulse_cost == 0.0
    assert value.method == "exact"
    assert value.std_error is None


def test_exact_zero_reward(pinned_problem):
    _, tree = pinned_problem
    model = _constant_reward_model("0")
    assert evaluate_strategy_exact(tree, model, _empty_strategy(tree)).value == 0.0


def test_exact_pinned_strategy_value(pinned_problem):
    loaded, tree = pinned_problem
    result = value_iteration(tree, loaded.impulse)
    strategy = extract_strategy(result.fields, tree, loaded.impulse)
    value = evaluate_strategy_exact(tree, loaded.impulse, strategy)
    assert value.value == pytest.approx(0.7, abs=1e-8)
    assert value.value == pytest.approx(result.y0, abs=1e-12)
    assert value.impulse_cost == pytest.approx(0.3, abs=1e-15)


def test_gap_in_decision_table_is_detected(pinned_problem):
    loaded, tree = pinned_problem
    strategy = Strategy(decisions={(0, 0, state_key(0.0, 0)): Decision("continue")})
    with pytest.raises(StrategyGapError):
        evaluate_strategy_exact(tree, loaded.impulse, strategy)


def test_impulse_at_horizon_rejected(pinned_problem):
    loaded, tree = pinned_problem
    strategy = _empty_strategy(tree)
    bad_key = (tree.depth, 0, state_key(0.0, 0))
    strategy.decisions[bad_key] = Decision("impulse", 1.0)
    with pytest.raises(ValueError, match="horizon"):
        evaluate_strategy_exact(tree, loaded.impulse, strategy)


def _driftless_spec(sigma="1", f="0", h="1", controls=(0.0,)):
    from impulsetree import ControlGrid

    return HamiltonianSpec(
        grid=ControlGrid(controls=tuple(controls), controlled_drift=parse_expr(f)),
        sigma=parse_expr(sigma),
        reward=parse_expr(h),
    )


def test_girsanov_weights_no_tilt(pinned_problem):
    _, tree = pinned_problem
    spec = _driftless_spec()
    weights = girsanov_weights(tree, spec, ControlTable.uniform(0.0))
    np.testing.assert_array_equal(weights, np.ones(4))


def test_girsanov_weights_constant_tilt_factors():
    # theta = 0.5 with dt = 0.25: q = 0.625, up factor 1.25, down factor 0.75
    config = {
        **PINNED_CONFIG,
        "process": {"x0": 0.0, "T": 1.0, "sigma": "1", "drift": None},
        "numerics": {"depth": 4, "tol": 1e-12, "budget": None},
    }
    loaded, tree = build_problem(config)
    spec = _driftless_spec(f="0.5", controls=(1.0,))
    weights = girsanov_weights(tree, spec, ControlTable.uniform(1.0))
    for leaf in range(16):  # leaf index bit pattern: 1 bit = down move
        n_down = bin(leaf).count("1")
        expected = 1.25 ** (4 - n_down) * 0.75**n_down
        assert weights[leaf] == pytest.approx(expected, rel=1e-15)
    assert weights.mean() == pytest.approx(1.0, abs=1e-15)


def test_girsanov_weight_mean_is_one_on_random_instances():
    for seed in (3, 4, 5):
        loaded, tree = build_problem(random_combined_config(seed, depth=5))
        spec = HamiltonianSpec(grid=loaded.grid, sigma=loaded.process.sigma, reward=loaded.impulse.reward)
        table = ControlTable.uniform(loaded.grid.controls[-1])
        weights = girsanov_weights(tree, spec, table)
        assert np.all(weights > 0)
        assert abs(float(weights.mean()) - 1.0) <= 1e-12


def test_girsanov_tilt_bound_enforced(pinned_problem):
    _, tree = pinned_problem
    spec = _driftless_spec(sigma="0.1", f="u", controls=(2.0,))
    with pytest.raises(ValueError, match="tilt"):
        girsanov_weights(tree, spec, ControlTable.uniform(2.0))


def test_evaluate_pair_weights_average_out_for_constant_reward(pinned_problem):
    loaded, tree = pinned_problem
    spec = _driftless_spec(f="0.3*u", h="1", controls=(-1.0, 1.0))
    model = _constant_reward_model("1")
    value = evaluate_pair(tree, model, spec, _empty_strategy(tree), ControlTable.uniform(1.0))
    assert value.value == pytest.approx(1.0, abs=1e-12)  # gamma*T, mean-one weights


def test_evaluate_pair_driftless_equals_exact(pinned_problem):
    loaded, tree = pinned_problem
    result = value_iteration(tree, loaded.impulse)
    strategy = extract_strategy(result.fields, tree, loaded.impulse)
    spec = _driftless_spec(f="0", h="clamp(x, 0, 1)", controls=(0.0,))
    pair_value = evaluate_pair(tree, loaded.impulse, spec, strategy, ControlTable.uniform(0.0))
    exact_value = evaluate_strategy_exact(tree, loaded.impulse, strategy)
    assert pair_value.value == pytest.approx(exact_value.value, abs=1e-14)


def test_binomial_tilt_algebraic_identity():
    # q*V_up + (1-q)*V_down == cond_expect + theta*dt*z_repr with
    # q = (1 + theta*sqrt(dt))/2: the identity that makes the backward
    # driver and the forward reweighting agree to machine precision
    from impulsetree import cond_expect, z_repr

    rng = np.random.default_rng(2)
    dt = 0.17
    sqrt_dt = np.sqrt(dt)
    children = rng.normal(size=8)
    theta = rng.uniform(-1.0, 1.0, size=4) / sqrt_dt * 0.9
    q = 0.5 * (1.0 + theta * sqrt_dt)
    tilted = q * children[0::2] + (1.0 - q) * children[1::2]
    driver = cond_expect(children) + theta * dt * z_repr(children, dt)
    np.testing.assert_allclose(tilted, driver, rtol=0, atol=1e-15)


def test_driver_vs_tilt_identity_for_fixed_tables():
    # backward value under a frozen control table equals the weighted
    # forward evaluation of the same policy (exact binomial tilt identity)
    for seed in (23, 29):
        loaded, tree = build_problem(random_combined_config(seed, depth=4))
        spec = HamiltonianSpec(grid=loaded.grid, sigma=loaded.process.sigma, reward=loaded.impulse.reward)
        budget = impulse_budget(loaded.impulse.reward_bound, loaded.impulse.cost_floor, tree.horizon)
        states = enumerate_states(loaded.impulse.impulses, budget)
        rng = np.random.default_rng(seed)
        for _ in range(3):
            fixed = [
                rng.integers(0, len(loaded.grid.controls), size=(tree.level_size(k), len(states)))
                for k in range(tree.depth)
            ]
            result = combined_value_iteration(tree, loaded.impulse, spec, fixed_controls=fixed)
            strategy, controls = extract_pair(result.fields, tree, loaded.impulse, spec)
            forward = evaluate_pair(tree, loaded.impulse, spec, strategy, controls)
            assert abs(forward.value - result.y0) <= 1e-10


def test_oracle_zero_reward(pinned_problem):
    _, tree = pinned_problem
    model = _constant_reward_model("0")
    value, strategy = enumerate_optimal(tree, model, 2)
    assert value == 0.0
    assert strategy.impulse_decision_count == 0


def test_oracle_pinned_instance(pinned_problem):
    loaded, tree = pinned_problem
    value, strategy = enumerate_optimal(tree, loaded.impulse, 2)
    assert value == pytest.approx(0.7, abs=1e-8)
    assert strategy.decision_at(0, 0, 0.0, 0) == Decision("impulse", 1.0)
    forward = evaluate_strategy_exact(tree, loaded.impulse, strategy)
    assert forward.value == pytest.approx(value, abs=1e-12)


def test_oracle_matches_solver_on_random_instances():
    for seed in (101, 102):
        loaded, tree = build_problem(random_impulse_config(seed, depth=4))
        for n in (1, 2):
            result = value_iteration(tree, loaded.impulse, budget=n)
            value, _ = enumerate_optimal(tree, loaded.impulse, n)
            assert abs(value - result.top.root_value()) <= 1e-10


def test_oracle_zero_impulses_is_plain_expectation():
    loaded, tree = build_problem(random_impulse_config(103, depth=4))
    value, strategy = enumerate_optimal(tree, loaded.impulse, 0)
    plain = evaluate_strategy_exact(tree, loaded.impulse, _empty_strategy(tree))
    assert value == pytest.approx(plain.value, abs=1e-12)
    assert strategy.impulse_decision_count == 0


def test_oracle_call_limit():
    from impulsetree import LimitError

    loaded, tree = build_problem(random_impulse_config(104, depth=4))
    with pytest.raises(LimitError):
        enumerate_optimal(tree, loaded.impulse, 3, call_limit=10)


def test_forced_impulse_strategies_bound_and_decrease():
    # impulsing at every node of the first m levels costs at least m*c per
    # path, so J <= gamma*T - m*c, decreasing in m
    loaded, tree = build_problem(random_impulse_config(105, depth=4))
    model = loaded.impulse
    gamma_t = model.reward_bound * tree.horizon
    beta = model.impulses[0]
    previous_bound = None
    for m in range(1, 4):
        strategy = strategy_from_rule(
            tree,
            lambda level, index, cum, count, m=m: beta if level < m and count < m and count == level else None,
            model.impulses,
        )
        value = evaluate_strategy_exact(tree, model, strategy)
        bound = gamma_t - m * model.cost_floor
        assert value.value <= bound + 1e-12
        if previous_bound is not None:
            assert bound < previous_bound
        previous_bound = bound


def test_walk_strategy_states_tracks_post_chain_state(pinned_problem):
    loaded, tree = pinned_problem
    result = value_iteration(tree, loaded.impulse)
    strategy = extract_strategy(result.fields, tree, loaded.impulse)
    ps = walk_strategy_states(tree, loaded.impulse, strategy)
    assert ps.cum[0][0] == 1.0 and ps.count[0][0] == 1
    assert ps.cost[0][0] == pytest.approx(0.3)
    for k in range(1, tree.depth + 1):
        assert np.all(ps.cum[k] == 1.0)
        assert np.all(ps.count[k] == 1)
        assert np.all(ps.cost[k] == 0.0)


def test_impulse_count_distribution(pinned_problem):
    loaded, tree = pinned_problem
    result = value_iteration(tree, loaded.impulse)
    strategy = extract_strategy(result.fields, tree, loaded.impulse)
    assert impulse_count_distribution(tree, loaded.impulse, strategy) == {1: 1.0}
    empty = _empty_strategy(tree)
    assert impulse_count_distribution(tree, loaded.impulse, empty) == {0: 1.0}


def test_mc_constant_reward_has_zero_error(pinned_problem):
    _, pinned_tree = pinned_problem
    loaded, tree = build_problem(
        {**PINNED_CONFIG, "impulse": {**PINNED_CONFIG["impulse"], "h": "1"}}
    )
    strategy = _empty_strategy(tree)
    estimate = mc_evaluate_strategy(loaded.impulse, loaded.process, strategy, samples=500, seed=9)
    assert estimate.value == pytest.approx(1.0, abs=1e-12)
    assert estimate.std_error == pytest.approx(0.0, abs=1e-12)
    assert estimate.method == "monte-carlo"
    assert estimate.samples == 500
    assert estimate.seed == 9
    assert estimate.generator == "numpy.random.PCG64"


def test_mc_pinned_instance_degenerate_randomness(pinned_problem):
    loaded, tree = pinned_problem
    result = value_iteration(tree, loaded.impulse)
    strategy = extract_strategy(result.fields, tree, loaded.impulse)
    estimate = mc_evaluate_strategy(loaded.impulse, loaded.process, strategy, samples=10_000, seed=1)
    assert estimate.value == pytest.approx(0.7, abs=1e-8)
    assert estimate.std_error <= 1e-8


def test_mc_is_deterministic_given_seed(pinned_problem):
    loaded, tree = pinned_problem
    strategy = _empty_strategy(tree)
    a = mc_evaluate_strategy(loaded.impulse, loaded.process, strategy, samples=200, seed=77)
    b = mc_evaluate_strategy(loaded.impulse, loaded.process, strategy, samples=200, seed=77)
    assert a == b


def test_mc_agrees_with_exact_within_three_standard_errors():
    loaded, tree = build_problem(random_impulse_config(106, depth=8))
    result = value_iteration(tree, loaded.impulse)
    strategy = extract_strategy(result.fields, tree, loaded.impulse)
    exact = evaluate_strategy_exact(tree, loaded.impulse, strategy)
    estimate = mc_evaluate_strategy(loaded.impulse, loaded.process, strategy, samples=20_000, seed=13)
    assert abs(estimate.value - exact.value) <= 3 * max(estimate.std_error, 1e-12)
