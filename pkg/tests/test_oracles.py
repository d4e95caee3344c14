import itertools

import numpy as np
import pytest
import torch

from popco import envs
from popco.errors import TooLarge
from popco.instances import CvrpInstance, KpInstance, TspInstance, generate
from popco.oracles import (canonical_objective, canonical_tour, cvrp_brute_force, kp_exact, kp_greedy,
                           tsp_brute_force, tsp_held_karp, tsp_nearest_neighbor)

SQUARE = TspInstance(np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]))


def test_square_and_triangle():
    assert tsp_held_karp(SQUARE).objective == pytest.approx(4.0)
    assert tsp_brute_force(SQUARE).objective == pytest.approx(4.0)
    tri = TspInstance(np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]]))
    assert tsp_held_karp(tri).objective == pytest.approx(12.0)
    assert tsp_brute_force(tri).objective == pytest.approx(12.0)


def test_held_karp_equals_brute_force():
    for inst in generate("tsp", 8, 60, 21):
        a, b = tsp_held_karp(inst), tsp_brute_force(inst)
        assert a.objective == b.objective and a.solution == b.solution


def test_size_limits():
    with pytest.raises(TooLarge):
        tsp_held_karp(generate("tsp", 17, 1, 0)[0])
    with pytest.raises(TooLarge):
        tsp_brute_force(generate("tsp", 10, 1, 0)[0])
    with pytest.raises(TooLarge):
        cvrp_brute_force(generate("cvrp", 9, 1, 0)[0])


@pytest.mark.parametrize("tag,n", [("tsp", 9), ("cvrp", 6), ("kp", 25)])
def test_solutions_replay(tag, n):
    solvers = {"tsp": [tsp_held_karp, tsp_nearest_neighbor], "cvrp": [cvrp_brute_force],
               "kp": [kp_exact, kp_greedy]}[tag]
    for inst in generate(tag, n, 10, 5, capacity=5.0, demand_divisor=10):
        for solve in solvers:
            r = solve(inst)
            rec = envs.recompute_reward(inst, r.solution)
            assert abs(rec) == pytest.approx(r.objective, rel=1e-9)
            assert canonical_objective(inst, r.solution) == r.objective


def test_nearest_neighbor_bounds():
    line = TspInstance(np.array([[0.0, 0.0], [0.25, 0.0], [0.5, 0.0], [0.75, 0.0], [1.0, 0.0]]))
    assert tsp_nearest_neighbor(line, 0).solution == (0, 1, 2, 3, 4)
    for inst in generate("tsp", 12, 10, 2):
        nn = tsp_nearest_neighbor(inst, 3)
        assert nn == tsp_nearest_neighbor(inst, 3)
        assert nn.objective >= tsp_held_karp(inst).objective


def test_kp_small_cases():
    none_fit = KpInstance(np.array([0.5, 0.9]), np.array([0.8, 0.9]), capacity=0.5)
    r = kp_exact(none_fit)
    assert r.objective == 0 and r.solution == ()
    one = KpInstance(np.array([0.7]), np.array([0.3]), capacity=1.0)
    assert kp_exact(one).objective == 0.7
    two = KpInstance(np.array([1.0, 0.2]), np.array([0.5, 0.5]), capacity=0.6)
    assert kp_greedy(two).objective == 1.0


def _kp_enumerate(inst):
    n = len(inst.values)
    masks = np.array(list(itertools.product([0, 1], repeat=n)), dtype=np.float64)
    ok = masks @ inst.weights <= inst.capacity + envs.CAPACITY_EPS
    return (masks[ok] @ inst.values).max()


def test_kp_exact_equals_enumeration():
    for inst in generate("kp", 12, 40, 8, capacity=3.0):
        e = kp_exact(inst)
        assert e.objective == pytest.approx(_kp_enumerate(inst), rel=1e-12)
        assert e.objective >= kp_greedy(inst).objective


def test_cvrp_capacity_forces_two_routes():
    inst = CvrpInstance(np.array([0.5, 0.5]), np.array([[0.4, 0.5], [0.6, 0.5]]), np.array([0.6, 0.6]))
    r = cvrp_brute_force(inst)
    assert 0 in r.solution
    assert r.objective == pytest.approx(0.4)
    one = CvrpInstance(np.array([0.0, 0.0]), np.array([[0.3, 0.4]]), np.array([0.1]))
    assert cvrp_brute_force(one).objective == pytest.approx(1.0)


def test_cvrp_dominates_random_rollouts():
    insts = generate("cvrp", 6, 20, 3, demand_divisor=10)
    batch = envs.Batch.from_set(insts)
    starts = torch.tensor(envs.start_points("cvrp", 6, 6)).repeat(50)[None].expand(20, -1)
    state = envs.random_rollout(batch, starts, torch.Generator().manual_seed(1))
    best_random = -envs.terminal_reward(state).max(dim=1).values
    for i, inst in enumerate(insts):
        assert cvrp_brute_force(inst).objective <= float(best_random[i]) + 1e-12


def test_canonical_forms():
    assert canonical_tour([2, 3, 0, 1]) == (0, 1, 2, 3)
    assert canonical_tour([0, 3, 2, 1]) == (0, 1, 2, 3)
    inst = generate("tsp", 7, 1, 0)[0]
    tours = [[0, 4, 2, 6, 1, 5, 3], [4, 2, 6, 1, 5, 3, 0], [0, 3, 5, 1, 6, 2, 4]]
    assert len({canonical_objective(inst, t) for t in tours}) == 1
