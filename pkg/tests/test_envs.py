import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from popco import envs
from popco.errors import ContractViolation, InfeasibleSolution, InvalidArgument
from popco.instances import CvrpInstance, KpInstance, TspInstance, generate, stack

SQUARE = TspInstance(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))


def single(instance, start):
    return envs.reset(instance, start)


def finish(state, actions):
    for a in actions:
        state = envs.step(state, [[a]])
    return state


def test_tsp_reset():
    s = single(generate("tsp", 4, 1, 0)[0], 2)
    assert s.visited[0, 0].tolist() == [False, False, True, False]
    assert int(s.current) == 2 and s.t == 1


def test_tsp_last_city_mask_and_terminal():
    s = finish(single(SQUARE, 0), [1, 2])
    m = envs.action_mask(s)
    assert int(m.sum()) == 1 and bool(m[0, 0, 3])
    s = envs.step(s, [[3]])
    assert bool(s.done.all())
    assert float(envs.terminal_reward(s)) == pytest.approx(-4.0)


def test_tsp_out_and_back():
    inst = TspInstance(np.array([[0.0, 0.0], [1.0, 0.0]]))
    s = finish(single(inst, 0), [1])
    assert float(envs.terminal_reward(s)) == -2.0


def test_cvrp_reset_and_depot_rules():
    inst = CvrpInstance(np.array([0.5, 0.5]), np.array([[0.1, 0.1], [0.9, 0.9], [0.2, 0.8]]),
                        np.array([0.6, 0.6, 0.2]))
    s = single(inst, 1)
    assert int(s.current) == 1
    assert float(s.remaining) == pytest.approx(0.4)
    m = envs.action_mask(s)[0, 0]
    assert m.tolist() == [True, False, False, True]  # customer 2 needs 0.6 > 0.4
    s = envs.step(s, [[0]])
    assert float(s.remaining) == 1.0
    assert not bool(envs.action_mask(s)[0, 0, 0])  # at the depot: depot masked
    s = finish(s, [2, 3])
    assert bool(s.done.all())
    expected = envs.recompute_reward(inst, [1, 0, 2, 3])
    assert float(envs.terminal_reward(s)) == pytest.approx(expected, rel=1e-12)


def test_kp_step_and_full_bag():
    inst = KpInstance(np.array([0.5, 0.4, 0.3]), np.array([0.5, 0.45, 0.2]), capacity=0.6)
    s = single(inst, 0)
    assert float(s.remaining) == pytest.approx(0.1)
    assert bool(s.done.all())  # nothing else fits in 0.1
    assert float(envs.terminal_reward(s)) == 0.5
    s = single(inst, 2)
    assert float(s.remaining) == pytest.approx(0.4)
    assert envs.action_mask(s)[0, 0].tolist() == [False, False, False]  # 0.5 and 0.45 > 0.4
    assert bool(s.done.all())


def test_toy_up_is_medium():
    inst = generate("toy", 3, 1, 0)[0]
    s = envs.step(envs.reset(inst, 0), [[2]])
    assert float(envs.terminal_reward(s)) == 2.0


def test_infeasible_step_raises():
    s = single(SQUARE, 0)
    with pytest.raises(ContractViolation):
        envs.step(s, [[0]])


def test_terminal_reward_requires_terminal():
    with pytest.raises(ContractViolation):
        envs.terminal_reward(single(SQUARE, 0))


def test_out_of_range_start():
    with pytest.raises(InvalidArgument):
        single(SQUARE, 4)
    with pytest.raises(InvalidArgument):
        envs.reset(generate("cvrp", 3, 1, 0)[0], 0)  # the depot is not a starting point


def test_recompute_rejects_infeasible():
    with pytest.raises(InfeasibleSolution):
        envs.recompute_reward(SQUARE, [0, 1, 1, 3])
    kp = KpInstance(np.array([1.0, 1.0]), np.array([0.7, 0.7]), capacity=1.0)
    with pytest.raises(InfeasibleSolution):
        envs.recompute_reward(kp, [0, 1])
    cv = generate("cvrp", 3, 1, 0)[0]
    with pytest.raises(InfeasibleSolution):
        envs.recompute_reward(cv, [1, 0, 0, 2, 3])


def test_start_points():
    assert envs.start_points("tsp", 10, 3) == [0, 1, 2]
    assert envs.start_points("cvrp", 10, 3) == [1, 2, 3]
    assert envs.start_points("toy", 3, 4) == [0, 0, 0, 0]
    with pytest.raises(InvalidArgument):
        envs.start_points("kp", 5, 6)


@pytest.mark.parametrize("tag,n", [("tsp", 12), ("cvrp", 12), ("kp", 30), ("toy", 3)])
def test_random_rollouts_are_feasible(tag, n):
    s = generate(tag, n, 64, 3, capacity=5.0, demand_divisor=10)
    batch = envs.Batch.from_set(s)
    starts = torch.tensor(envs.start_points(tag, n, 4 if tag != "toy" else 4))[None].expand(64, -1)
    state = envs.random_rollout(batch, starts, torch.Generator().manual_seed(0))
    R = envs.terminal_reward(state)
    for b in range(64):
        for r in range(4):
            acts = envs.trajectory_actions(state, b, r)
            assert envs.recompute_reward(s[b], acts) == pytest.approx(float(R[b, r]), rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(tag=st.sampled_from(["tsp", "cvrp", "kp"]), n=st.integers(2, 9), seed=st.integers(0, 10**6))
def test_mask_soundness(tag, n, seed):
    """An action is feasible exactly when step() accepts it."""
    inst = generate(tag, n, 1, seed, capacity=2.0, demand_divisor=9)[0]
    start = 1 if tag == "cvrp" else 0
    state = envs.reset(inst, start)
    rng = np.random.default_rng(seed)
    while not bool(state.done.all()):
        m = envs.action_mask(state)[0, 0]
        for a in range(len(m)):
            try:
                envs.step(state, [[a]])
                ok = True
            except ContractViolation:
                ok = False
            assert ok == bool(m[a])
        state = envs.step(state, [[int(rng.choice(np.flatnonzero(m.numpy())))]])
    assert (state.remaining >= -envs.CAPACITY_EPS).all()


def test_intermediate_states_carry_no_reward():
    s = single(SQUARE, 0)
    assert float(s.length) == 0.0
    s = envs.step(s, [[1]])
    assert float(s.length) == 1.0  # distance so far, not a reward
    assert not bool(s.done.all())


def test_batched_matches_single():
    s = generate("tsp", 6, 3, 1)
    batch = envs.Batch.from_set(s)
    st_b = envs.reset(batch, torch.tensor([[0, 1], [2, 3], [4, 5]]))
    for i in range(3):
        one = envs.reset(s[i], 2 * i)
        assert st_b.visited[i, 0].tolist() == one.visited[0, 0].tolist()
    assert math.isclose(float(stack([s[0]]).arrays["coords"][0, 0, 0]), float(s[0].coords[0, 0]))
