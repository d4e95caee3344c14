"""Exact solvers and simple heuristics used as reference objectives.

Objectives are positive: tour/route length for TSP and CVRP, collected value
for KP. Solutions are action sequences in the environments' index convention,
so ``envs.recompute_reward`` can validate them. Every reported objective is
recomputed from a canonical form of the solution, which makes two solvers
that find the same solution report bit-identical objectives.
"""

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .envs import CAPACITY_EPS
from .errors import TooLarge

HELD_KARP_MAX = 16
BRUTE_FORCE_MAX = 9
CVRP_MAX = 8


@dataclass(frozen=True)
class OracleResult:
    objective: float
    solution: tuple
    proven_optimal: bool


def _dist_matrix(pts):
    pts = np.asarray(pts, dtype=np.float64)
    return np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))


def canonical_tour(tour):
    """Rotate to start at city 0 and orient so the second city has the lower index."""
    tour = list(tour)
    i = tour.index(0)
    tour = tour[i:] + tour[:i]
    if len(tour) > 2 and tour[1] > tour[-1]:
        tour = [0] + tour[:0:-1]
    return tuple(tour)


def tour_length(coords, tour):
    pts = [tuple(map(float, coords[a])) for a in tour]
    return sum(math.dist(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts)))


def _tsp_result(coords, tour, optimal):
    tour = canonical_tour(tour)
    return OracleResult(tour_length(coords, tour), tour, optimal)


def _held_karp(D):
    """Optimal closed tour through all nodes of distance matrix D, starting at node 0."""
    n = len(D)
    if n <= 3:
        return list(range(n))
    m = n - 1  # node j+1 is bit j
    full = (1 << m) - 1
    dp = np.full((1 << m, m), np.inf)
    parent = np.full((1 << m, m), -1, dtype=np.int64)
    bits = 1 << np.arange(m)
    C = D[1:, 1:]
    dp[bits, np.arange(m)] = D[0, 1:]
    for mask in range(1, full + 1):
        if mask & (mask - 1) == 0:
            continue
        inside = (mask & bits) != 0
        prev = dp[mask ^ bits]  # row j: paths over mask without j
        cand = prev + C.T  # [j, k] = dp[mask - j][k] + d(k, j)
        k = cand.argmin(axis=1)
        best = cand[np.arange(m), k]
        dp[mask] = np.where(inside, best, np.inf)
        parent[mask] = np.where(inside, k, -1)
    last = int(np.argmin(dp[full] + D[1:, 0]))
    tour, mask = [], full
    while last >= 0:
        tour.append(last + 1)
        nxt = parent[mask, last]
        mask ^= 1 << last
        last = int(nxt)
    return [0] + tour[::-1]


def tsp_held_karp(instance):
    n = len(instance.coords)
    if n > HELD_KARP_MAX:
        raise TooLarge(f"Held-Karp limited to n <= {HELD_KARP_MAX}, got {n}")
    return _tsp_result(instance.coords, _held_karp(_dist_matrix(instance.coords)), True)


@lru_cache(maxsize=None)
def _perms(m):
    """Permutations of 1..m with first < last (one per reversal pair)."""
    p = np.array(list(itertools.permutations(range(1, m + 1))), dtype=np.int64).reshape(-1, m)
    if m >= 2:
        p = p[p[:, 0] < p[:, -1]]
    return p


def tsp_brute_force(instance):
    n = len(instance.coords)
    if n > BRUTE_FORCE_MAX:
        raise TooLarge(f"brute force limited to n <= {BRUTE_FORCE_MAX}, got {n}")
    if n <= 3:
        return _tsp_result(instance.coords, list(range(n)), True)
    D = _dist_matrix(instance.coords)
    p = _perms(n - 1)
    full = np.concatenate([np.zeros((len(p), 1), dtype=np.int64), p, np.zeros((len(p), 1), dtype=np.int64)], 1)
    lengths = D[full[:, :-1], full[:, 1:]].sum(1)
    return _tsp_result(instance.coords, [0] + list(p[int(lengths.argmin())]), True)


def tsp_nearest_neighbor(instance, start=0):
    coords = np.asarray(instance.coords, dtype=np.float64)
    n = len(coords)
    D = _dist_matrix(coords)
    tour, seen = [start], np.zeros(n, dtype=bool)
    seen[start] = True
    for _ in range(n - 1):
        d = np.where(seen, np.inf, D[tour[-1]])
        j = int(d.argmin())
        tour.append(j)
        seen[j] = True
    return _tsp_result(coords, tour, False)


# -- knapsack ---------------------------------------------------------------

def _kp_value(instance, chosen):
    return sum(float(instance.values[i]) for i in sorted(int(i) for i in chosen))


def _kp_result(instance, chosen, optimal):
    chosen = tuple(sorted(int(i) for i in chosen))
    return OracleResult(_kp_value(instance, chosen), chosen, optimal)


def _ratio_order(values, weights):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(weights > 0, values / np.where(weights > 0, weights, 1), np.inf)
    return np.argsort(-ratio, kind="stable")


def kp_greedy(instance):
    v = np.asarray(instance.values, dtype=np.float64)
    w = np.asarray(instance.weights, dtype=np.float64)
    room = float(instance.capacity)
    chosen = []
    for i in _ratio_order(v, w):
        if w[i] <= room + CAPACITY_EPS:
            chosen.append(i)
            room -= w[i]
    return _kp_result(instance, chosen, False)


def kp_exact(instance):
    """Depth-first branch and bound over items in value/weight order with the fractional bound."""
    v0 = np.asarray(instance.values, dtype=np.float64)
    w0 = np.asarray(instance.weights, dtype=np.float64)
    cap = float(instance.capacity)
    keep = [i for i in _ratio_order(v0, w0) if w0[i] <= cap + CAPACITY_EPS]
    v = [float(v0[i]) for i in keep]
    w = [float(w0[i]) for i in keep]
    n = len(keep)

    seed = kp_greedy(instance)
    best_val = seed.objective
    best_set = [keep.index(i) for i in seed.solution] if n else []
    taken = []

    def bound(i, room, val):
        while i < n and w[i] <= room + CAPACITY_EPS:
            room -= w[i]
            val += v[i]
            i += 1
        if i < n and room > 0:
            val += v[i] * room / w[i]
        return val

    def dfs(i, room, val):
        nonlocal best_val, best_set
        if val > best_val:
            best_val, best_set = val, list(taken)
        if i == n or bound(i, room, val) <= best_val:
            return
        if w[i] <= room + CAPACITY_EPS:
            taken.append(i)
            dfs(i + 1, room - w[i], val + v[i])
            taken.pop()
        dfs(i + 1, room, val)

    dfs(0, cap, 0.0)
    return _kp_result(instance, [keep[j] for j in best_set], True)


# -- CVRP -------------------------------------------------------------------

def cvrp_brute_force(instance):
    """Optimal CVRP by enumerating capacity-feasible route partitions; each route solved exactly."""
    n = len(instance.coords)
    if n > CVRP_MAX:
        raise TooLarge(f"exact CVRP limited to n <= {CVRP_MAX}, got {n}")
    pts = np.vstack([np.asarray(instance.depot, dtype=np.float64)[None], instance.coords])
    D = _dist_matrix(pts)
    demands = np.asarray(instance.demands, dtype=np.float64)
    cap = float(instance.capacity)
    full = (1 << n) - 1

    route = {}
    for S in range(1, full + 1):
        members = [j for j in range(n) if S >> j & 1]
        if demands[members].sum() > cap + CAPACITY_EPS:
            continue
        nodes = [0] + [j + 1 for j in members]
        tour = _held_karp(D[np.ix_(nodes, nodes)])
        seq = [nodes[t] for t in tour[1:]]
        if len(seq) > 1 and seq[0] > seq[-1]:
            seq = seq[::-1]
        route[S] = (D[0, seq[0]] + sum(D[a, b] for a, b in zip(seq, seq[1:])) + D[seq[-1], 0], seq)

    best = {0: (0.0, [])}
    for S in range(1, full + 1):
        low = S & -S
        rest = S ^ low
        cands = []
        sub = rest
        while True:  # every T = low | sub with sub a submask of rest
            T = low | sub
            if T in route:
                cands.append((route[T][0] + best[S ^ T][0], T))
            if sub == 0:
                break
            sub = (sub - 1) & rest
        cost, T = min(cands)
        best[S] = (cost, [route[T][1]] + best[S ^ T][1])

    actions = canonical_routes(sum(([0] + r for r in best[full][1]), []))
    return OracleResult(_cvrp_length(instance, actions), actions, True)


def canonical_routes(actions):
    """Routes oriented first < last and ordered by smallest customer, joined by depot visits."""
    routes, cur = [], []
    for a in list(actions) + [0]:
        a = int(a)
        if a == 0:
            if cur:
                routes.append(cur if cur[0] <= cur[-1] else cur[::-1])
            cur = []
        else:
            cur.append(a)
    out = []
    for r in sorted(routes, key=min):
        if out:
            out.append(0)
        out.extend(r)
    return tuple(out)


def _cvrp_length(instance, actions):
    depot = tuple(map(float, instance.depot))
    pos, total = depot, 0.0
    for a in actions:
        nxt = depot if a == 0 else tuple(map(float, instance.coords[a - 1]))
        total += math.dist(pos, nxt)
        pos = nxt
    return total + math.dist(pos, depot)


def canonical_objective(instance, actions):
    """Objective of a complete solution, summed in the same canonical order the oracles use.

    Two descriptions of one solution (rotated or reversed tours, reordered
    routes) therefore get bit-identical objectives.
    """
    actions = [int(a) for a in actions if int(a) >= 0]
    tag = instance.tag
    if tag == "tsp":
        return tour_length(instance.coords, canonical_tour(actions))
    if tag == "cvrp":
        return _cvrp_length(instance, canonical_routes(actions))
    if tag == "kp":
        return _kp_value(instance, actions)
    return float(instance.payoff(actions[0]))


METHODS = {
    "held_karp": tsp_held_karp,
    "tsp_brute_force": tsp_brute_force,
    "nearest_neighbor": tsp_nearest_neighbor,
    "kp_exact": kp_exact,
    "kp_greedy": kp_greedy,
    "cvrp_brute_force": cvrp_brute_force,
}

METHOD_TAG = {
    "held_karp": "tsp", "tsp_brute_force": "tsp", "nearest_neighbor": "tsp",
    "kp_exact": "kp", "kp_greedy": "kp", "cvrp_brute_force": "cvrp",
}
