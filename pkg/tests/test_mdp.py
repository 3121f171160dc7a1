import numpy as np
import pytest
from hypothesis import given, strategies as st

from collaq.mdp import (
    DOWN, LEFT, RIGHT, STAY, UP, UNREACHABLE, ConfigError, DimensionError, TabularMdp,
    build_grid_mdp, distances_from, greedy_action, lemma_bound_check, lemma_max_holds,
    shortest_path_distance, unroll_horizon, value_iteration,
)

from conftest import brute_force_value


def test_degenerate_grid_self_loops():
    mdp = build_grid_mdp(1, 1, 0.9, 3)
    assert mdp.num_states == 1 and mdp.num_actions == 5
    assert np.all(mdp.transition == 0)


def test_border_clamp():
    mdp = build_grid_mdp(3, 1, 0.9, 3)
    assert mdp.transition[0, LEFT] == 0
    assert mdp.transition[0, RIGHT] == 1
    assert mdp.transition[0, UP] == 0 and mdp.transition[0, DOWN] == 0


def test_transition_table_matches_hand_enumeration():
    mdp = build_grid_mdp(4, 4, 0.992, 8)
    moves = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0), STAY: (0, 0)}
    for s in range(16):
        x, y = s % 4, s // 4
        for a, (dx, dy) in moves.items():
            nx, ny = x + dx, y + dy
            if not (0 <= nx < 4 and 0 <= ny < 4):
                nx, ny = x, y
            assert mdp.transition[s, a] == ny * 4 + nx


@pytest.mark.parametrize("w,h", [(0, 3), (3, 0), (-1, 2)])
def test_bad_dimensions(w, h):
    with pytest.raises(ConfigError):
        build_grid_mdp(w, h, 0.9, 2)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 1.5])
def test_discount_must_be_inside_unit_interval(gamma):
    with pytest.raises(ConfigError):
        build_grid_mdp(2, 2, gamma, 2)


def test_transition_is_read_only():
    mdp = build_grid_mdp(2, 2, 0.9, 2)
    with pytest.raises(ValueError):
        mdp.transition[0, 0] = 1


def test_transition_out_of_range_rejected():
    with pytest.raises(ConfigError):
        TabularMdp(np.array([[0, 2]]), 1, 0.9)


def test_distance_identity_and_corners():
    mdp = build_grid_mdp(3, 3, 0.9, 4)
    assert shortest_path_distance(mdp, 4, 4) == 0
    assert shortest_path_distance(mdp, 0, 8) == 4


def test_distances_are_manhattan_on_5x5():
    mdp = build_grid_mdp(5, 5, 0.9, 4)
    for s in range(25):
        d = distances_from(mdp, s)
        for t in range(25):
            assert d[t] == abs(s % 5 - t % 5) + abs(s // 5 - t // 5)


def test_unreachable_is_reported():
    mdp = TabularMdp(np.array([[0], [1]]), 2, 0.9)
    assert shortest_path_distance(mdp, 0, 1) == UNREACHABLE


def test_zero_reward_gives_zero_values():
    mdp = build_grid_mdp(3, 2, 0.9, 5)
    assert np.all(value_iteration(mdp, mdp.zero_reward()) == 0)


def test_geometric_series_on_single_cell():
    # V_H = 0, so H backups collect H rewards
    mdp = build_grid_mdp(1, 1, 0.5, 2)
    r = mdp.zero_reward()
    r[0, STAY] = 1.0
    assert value_iteration(mdp, r)[0, 0] == 1.5
    mdp3 = build_grid_mdp(1, 1, 0.5, 3)
    assert value_iteration(mdp3, r)[0, 0] == 1.75


def test_terminal_row_is_zero(rng):
    mdp = build_grid_mdp(3, 3, 0.9, 4)
    v = value_iteration(mdp, rng.random((9, 5)))
    assert v.shape == (5, 9)
    assert np.all(v[4] == 0)


def test_reward_size_mismatch():
    mdp = build_grid_mdp(2, 2, 0.9, 2)
    with pytest.raises(DimensionError):
        value_iteration(mdp, np.zeros(7))


def test_value_iteration_matches_brute_force(rng):
    for _ in range(10):
        w, h = (int(v) for v in rng.integers(1, 4, 2))
        H = int(rng.integers(0, 5))
        mdp = build_grid_mdp(w, h, float(rng.choice([0.5, 0.9, 0.992])), H)
        r = rng.normal(size=(mdp.num_states, 5))
        v = value_iteration(mdp, r)
        for s in range(mdp.num_states):
            assert abs(v[0, s] - brute_force_value(mdp, r, s)) <= 1e-12


@given(st.integers(0, 10_000))
def test_value_iteration_is_monotone_in_reward(seed):
    rng = np.random.default_rng(seed)
    mdp = build_grid_mdp(int(rng.integers(1, 5)), int(rng.integers(1, 5)), 0.9,
                         int(rng.integers(0, 6)))
    r = rng.normal(size=(mdp.num_states, 5))
    r2 = r + rng.random(r.shape) * (rng.random(r.shape) < 0.5)
    assert np.all(value_iteration(mdp, r2) >= value_iteration(mdp, r))


def test_greedy_tie_goes_to_lowest_action():
    mdp = build_grid_mdp(1, 1, 0.9, 2)
    r = mdp.zero_reward()
    v = value_iteration(mdp, r)
    assert greedy_action(mdp, r, v, 0, 0) == 0


def test_greedy_moves_toward_reward():
    mdp = build_grid_mdp(3, 1, 0.9, 2)
    r = mdp.zero_reward()
    r[2, STAY] = 1.0
    v = value_iteration(mdp, r)
    assert greedy_action(mdp, r, v, 1, 0) == RIGHT


def test_greedy_undefined_at_horizon():
    mdp = build_grid_mdp(2, 2, 0.9, 2)
    r = mdp.zero_reward()
    with pytest.raises(ValueError):
        greedy_action(mdp, r, value_iteration(mdp, r), 0, 2)


@given(st.integers(0, 10_000))
def test_greedy_matches_rescan(seed):
    rng = np.random.default_rng(seed)
    mdp = build_grid_mdp(3, 3, 0.9, 4)
    r = rng.integers(0, 3, size=(9, 5)).astype(float)  # integer rewards force ties
    v = value_iteration(mdp, r)
    s, h = int(rng.integers(0, 9)), int(rng.integers(0, 4))
    q = [r[s, a] + 0.9 * v[h + 1, mdp.transition[s, a]] for a in range(5)]
    expected = next(a for a in range(5) if q[a] == max(q))
    assert greedy_action(mdp, r, v, s, h) == expected


def test_lemma_bound_identical_rewards(rng):
    mdp = build_grid_mdp(3, 3, 0.9, 4)
    r = rng.random((9, 5))
    rep = lemma_bound_check(mdp, 0, r, r)
    assert rep.lhs == 0 and rep.rhs == 0 and rep.holds


def test_single_perturbation_at_distance_d():
    mdp = unroll_horizon(build_grid_mdp(4, 4, 0.9, 6))
    r1 = mdp.zero_reward()
    r1[0, STAY] = 1.0
    r2 = r1.copy()
    d = 3
    target = d * 16 + 3  # cell (3, 0) at step 3
    r2[target, STAY] = 2.0
    rep = lemma_bound_check(mdp, 0, r1, r2)
    assert rep.holds
    assert rep.lhs <= 0.9 ** d * 2.0 + 1e-12


def test_lemma_bound_needs_time_indexed_rewards():
    # a reward collectable on every visit can change V by more than the bound
    mdp = build_grid_mdp(1, 1, 0.5, 2)
    r1 = mdp.zero_reward()
    r2 = r1.copy()
    r2[0, STAY] = 1.0
    rep = lemma_bound_check(mdp, 0, r1, r2)
    assert rep.lhs == 1.5 and rep.rhs == 1.0 and not rep.holds
    rep_t = lemma_bound_check(unroll_horizon(mdp), 0, unroll_horizon(mdp).zero_reward(),
                              np.eye(2, 5, 4))
    assert rep_t.holds


def test_unrolled_values_match_stationary_ones(rng):
    base = build_grid_mdp(3, 2, 0.9, 4)
    mdp = unroll_horizon(base)
    r = rng.random((6, 5))
    v = value_iteration(base, r)
    vu = value_iteration(mdp, np.tile(r, (4, 1)))
    assert np.allclose(vu[0, :6], v[0], atol=1e-12)


@given(st.floats(-1e6, 1e6), st.floats(0, 1e6), st.floats(-1e6, 1e6))
def test_lemma_max(a1, delta, a2):
    assert lemma_max_holds(a1, a1 + delta, a2)
