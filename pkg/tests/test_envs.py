from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frlinv.envs import (
    RIGHT,
    Dataset,
    EnvSpec,
    Transition,
    generate_dataset,
    gridlake_spec,
    make_env,
    pixelgrid_spec,
    pointmass_spec,
    render_pixel_state,
    validate_transition,
)
from frlinv.errors import ConfigError, ShapeError


def test_gridlake_step_right_from_start():
    env = make_env(gridlake_spec())
    tr = env.step(env.reset(np.random.default_rng(0)), RIGHT, np.random.default_rng(0))
    assert np.array_equal(tr.s, [0.0, 0.0])
    assert np.allclose(tr.s_next, [0.0, 1.0 / 3.0])
    assert tr.r == 0.0 and not tr.done


def test_gridlake_goal_and_hole_are_terminal():
    env = make_env(gridlake_spec())
    rng = np.random.default_rng(0)
    goal = env.step(env.state_of((3, 2)), RIGHT, rng)
    assert goal.r == 1.0 and goal.done
    hole = env.step(env.state_of((0, 1)), 1, rng)  # down into (1, 1)
    assert hole.r == 0.0 and hole.done


def test_pointmass_matches_matrix_formula():
    A = np.array([[0.8, 0.1], [0.0, 0.7]])
    B = np.array([[0.2, 0.0], [0.05, 0.1]])
    env = make_env(pointmass_spec(A=A, B=B))
    s, a = np.array([0.3, -0.4]), np.array([0.5, 1.0])
    tr = env.step(s, a, np.random.default_rng(0))
    assert np.array_equal(tr.s_next, A @ s + B @ a)
    assert tr.r == -0.5 * float(np.dot(tr.s_next, tr.s_next))


def test_pointmass_rejects_out_of_box_action():
    env = make_env(pointmass_spec())
    with pytest.raises(ValueError):
        env.step(np.zeros(2), np.array([1.5, 0.0]), np.random.default_rng(0))


def test_gridlake_slip_frequency():
    env = make_env(gridlake_spec(slip=0.2))
    rng = np.random.default_rng(123)
    s = env.state_of((2, 1))
    intended = env.state_of((2, 2))
    n = 100_000
    slips = sum(not np.array_equal(env.step(s, RIGHT, rng).s_next, intended) for _ in range(n))
    assert abs(slips / n - 0.2) < 0.01


def test_render_is_deterministic_and_injective():
    imgs = [render_pixel_state((i, j)) for i in range(4) for j in range(4)]
    assert all(img.shape == (256,) and img.min() >= 0.0 and img.max() <= 1.0 for img in imgs)
    assert np.array_equal(render_pixel_state((2, 3)), render_pixel_state((2, 3)))
    assert len({img.tobytes() for img in imgs}) == 16


def test_render_rejects_off_grid():
    with pytest.raises(ShapeError):
        render_pixel_state((4, 0))


def test_pixelgrid_decodes_its_own_renders():
    env = make_env(pixelgrid_spec())
    for i in range(4):
        for j in range(4):
            assert env.cell(render_pixel_state((i, j))) == (i, j)


def test_uniform_dataset_covers_every_nonterminal_cell():
    ds = generate_dataset(gridlake_spec(), "uniform", 10_000, seed=3)
    env = make_env(ds.env)
    visited = {env.cell(t.s) for t in ds}
    assert set(env.nonterminal_cells()) <= visited


def test_dataset_rejects_zero_length():
    with pytest.raises(ValueError):
        generate_dataset(gridlake_spec(), "uniform", 0, seed=0)


@pytest.mark.parametrize("spec", [gridlake_spec(), pointmass_spec(), pixelgrid_spec()])
def test_dataset_is_deterministic(spec):
    a = generate_dataset(spec, "uniform", 200, seed=9).to_json()
    b = generate_dataset(spec, "uniform", 200, seed=9).to_json()
    assert a == b
    assert a != generate_dataset(spec, "uniform", 200, seed=10).to_json()


def test_dataset_json_round_trip(tmp_path):
    ds = generate_dataset(pointmass_spec(), "uniform", 50, seed=1)
    path = tmp_path / "d.json"
    ds.save(path)
    back = Dataset.load(path)
    assert back.to_json() == ds.to_json()
    doc = json.loads(path.read_text())
    assert set(doc) >= {"env", "seed", "transitions"}
    assert set(doc["transitions"][0]) >= {"s", "a", "r", "s_next"}


def test_epsilon_greedy_uses_policy():
    spec = gridlake_spec()
    ds = generate_dataset(spec, "epsilon_greedy", 300, seed=0, policy=lambda s: RIGHT, epsilon=0.0)
    assert all(t.a == RIGHT for t in ds)


@pytest.mark.parametrize("spec", [gridlake_spec(slip=0.3), pointmass_spec(), pixelgrid_spec(slip=0.1)])
def test_transition_validity_fuzz(spec):
    n = 100_000 if spec.kind != "pixelgrid" else 20_000
    ds = generate_dataset(spec, "uniform", n, seed=17, exploring_starts=True)
    env = make_env(spec)
    for tr in ds:
        validate_transition(env, tr)


def test_validate_transition_flags_bad_reward():
    env = make_env(gridlake_spec())
    bad = Transition(np.zeros(2), 0, 2.0, np.zeros(2))
    with pytest.raises(ValueError):
        validate_transition(env, bad)


@pytest.mark.parametrize("kw", [
    dict(kind="nope", state_dim=2, reward_min=0, reward_max=1, discount=0.9, n_actions=4),
    dict(kind="gridlake", state_dim=2, reward_min=1, reward_max=0, discount=0.9, n_actions=4),
    dict(kind="gridlake", state_dim=2, reward_min=0, reward_max=1, discount=0.9, n_actions=1),
    dict(kind="pointmass", state_dim=2, reward_min=-1, reward_max=0, discount=0.9),
    dict(kind="pointmass", state_dim=1, reward_min=-1, reward_max=0, discount=0.9,
         action_low=(float("inf"),), action_high=(1.0,)),
])
def test_env_spec_validation(kw):
    with pytest.raises(ConfigError):
        EnvSpec(**kw)


@given(st.sampled_from(["gridlake", "pointmass", "pixelgrid"]))
def test_env_spec_dict_round_trip(kind):
    spec = {"gridlake": gridlake_spec, "pointmass": pointmass_spec, "pixelgrid": pixelgrid_spec}[kind]()
    assert EnvSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
