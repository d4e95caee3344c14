"""Evaluation of a trained population.

Greedy evaluation rolls out every (agent, start) pair, optionally on the 8
symmetric copies of each routing instance. Sampled evaluation spends a
per-instance trajectory budget: the greedy pass first, then the rest split
evenly across the highest-scoring (agent, start) pairs of that pass.

Objectives are reported in the problem's natural units: tour or route length
for TSP/CVRP (lower is better), collected value for KP and the toy world.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import envs
from .errors import BudgetTooSmall, InvalidArgument
from .instances import CvrpInstance, InstanceSet, TspInstance
from .model import rollout_batch
from .oracles import canonical_objective
from .rng import derive_seed

ROUTING = ("tsp", "cvrp")
NUM_AUGMENTATIONS = 8
CHUNK = 32  # instances per greedy rollout call
TIE_TOL = 1e-9


def maximizes(tag):
    return tag in ("kp", "toy")


def objective_from_reward(tag, reward):
    reward = np.asarray(reward, dtype=np.float64)
    return reward if maximizes(tag) else -reward


def best_objective(instance, rewards, actions, incumbent=None):
    """Objective of the best candidate, recomputed canonically from its actions.

    rewards: (M,) candidate rewards; actions: (M, T) PAD-filled sequences.
    Candidates whose reward ties the maximum (within rounding) are all
    recomputed and the best canonical objective wins, so the result is exactly
    what an oracle would report for the same solution.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    top = rewards.max()
    near = np.flatnonzero(rewards >= top - TIE_TOL * max(1.0, abs(top)))
    objs = {canonical_objective(instance, tuple(actions[j])) for j in near}
    if incumbent is not None:
        objs.add(incumbent)
    return max(objs) if maximizes(instance.tag) else min(objs)


# -- augmentation -----------------------------------------------------------

def _transforms(xy):
    """The 8 isometries of the unit square applied to (..., 2) coordinates, stacked on axis 0."""
    x, y = xy[..., 0], xy[..., 1]
    pairs = [(x, y), (1 - x, y), (x, 1 - y), (1 - x, 1 - y),
             (y, x), (1 - y, x), (y, 1 - x), (1 - y, 1 - x)]
    return np.stack([np.stack(p, -1) for p in pairs])


def augment_instance(instance):
    """Return the 8 symmetric copies of a TSP or CVRP instance."""
    if instance.tag not in ROUTING:
        raise InvalidArgument(f"augmentation is only defined for routing problems, not {instance.tag}")
    coords = _transforms(np.asarray(instance.coords, dtype=np.float64))
    if instance.tag == "tsp":
        return [TspInstance(c) for c in coords]
    depots = _transforms(np.asarray(instance.depot, dtype=np.float64))
    return [CvrpInstance(d, c, instance.demands, instance.capacity) for d, c in zip(depots, coords)]


def augment_set(instances):
    """Augmented copies of a whole set, instance-major: row i*8 + a is transform a of instance i."""
    if instances.tag not in ROUTING:
        raise InvalidArgument(f"augmentation is only defined for routing problems, not {instances.tag}")
    arrays = dict(instances.arrays)
    for key in ("coords", "depot"):
        if key in arrays:
            t = _transforms(np.asarray(arrays[key]))  # (8, I, ...)
            arrays[key] = np.moveaxis(t, 0, 1).reshape(-1, *t.shape[2:])
    if "demands" in arrays:
        arrays["demands"] = np.repeat(arrays["demands"], NUM_AUGMENTATIONS, axis=0)
    return InstanceSet(instances.tag, instances.count * NUM_AUGMENTATIONS, instances.n,
                       instances.seed, arrays, capacity=instances.capacity,
                       demand_divisor=instances.demand_divisor)


# -- reports ----------------------------------------------------------------

def compute_gap(objectives, references, maximize=False):
    """Per-instance optimality gaps in percent; 0 is optimal and positive is worse."""
    obj = np.asarray(objectives, dtype=np.float64)
    ref = np.asarray(references, dtype=np.float64)
    if obj.shape != ref.shape:
        raise InvalidArgument(f"{obj.size} objectives but {ref.size} references")
    if (ref <= 0).any():
        raise InvalidArgument("reference objectives must be positive")
    gap = 1.0 - obj / ref if maximize else obj / ref - 1.0
    return 100.0 * gap


@dataclass
class EvalReport:
    tag: str
    best_obj: np.ndarray
    n_trajectories: np.ndarray
    wall_ms: float
    ref_obj: np.ndarray = None
    rewards: np.ndarray = field(default=None, repr=False)  # greedy (I, K, P), best over augmentations

    @property
    def mean_obj(self):
        return float(self.best_obj.mean())

    @property
    def gap_pct(self):
        if self.ref_obj is None:
            return None
        return compute_gap(self.best_obj, self.ref_obj, maximizes(self.tag))

    @property
    def mean_gap(self):
        g = self.gap_pct
        return None if g is None else float(g.mean())

    def with_reference(self, ref_obj):
        ref_obj = np.asarray(ref_obj, dtype=np.float64)
        if ref_obj.shape != self.best_obj.shape:
            raise InvalidArgument(f"{len(ref_obj)} reference objectives for {len(self.best_obj)} instances")
        return replace(self, ref_obj=ref_obj)


def _default_P(instances):
    return 1 if instances.tag == "toy" else instances.n


def _greedy_chunk(model, instances, lo, hi, starts, use_augmentation):
    sub = instances[lo:hi]
    run = augment_set(sub) if use_augmentation else sub
    with torch.no_grad():
        r = rollout_batch(model, envs.Batch.from_set(run), starts, mode="greedy")
    A = NUM_AUGMENTATIONS if use_augmentation else 1
    rew = r.reward.numpy().reshape(hi - lo, A, model.K, len(starts))
    acts = r.actions.numpy().reshape(hi - lo, A * model.K * len(starts), -1)
    best = [best_objective(sub[j], rew[j].reshape(-1), acts[j]) for j in range(hi - lo)]
    return rew.max(axis=1), best


def greedy_eval(model, instances, P_eval=None, use_augmentation=False, workers=1):
    """Best greedy objective over agents, starts and (optionally) the 8 symmetric copies."""
    if use_augmentation and instances.tag not in ROUTING:
        raise InvalidArgument(f"augmentation is undefined for {instances.tag}")
    P = _default_P(instances) if P_eval is None else int(P_eval)
    starts = envs.start_points(instances.tag, instances.n, P)
    t0 = time.perf_counter()
    bounds = [(lo, min(lo + CHUNK, len(instances))) for lo in range(0, len(instances), CHUNK)]
    work = lambda lh: _greedy_chunk(model, instances, *lh, starts, use_augmentation)  # noqa: E731
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    r = np.concatenate([p[0] for p in parts])
    best = np.array([o for p in parts for o in p[1]], dtype=np.float64)
    per = model.K * P * (NUM_AUGMENTATIONS if use_augmentation else 1)
    return EvalReport(instances.tag, best, np.full(len(instances), per, dtype=np.int64),
                      (time.perf_counter() - t0) * 1000, rewards=r)


# -- budgeted sampling ------------------------------------------------------

@dataclass
class SamplingPlan:
    budget: int
    greedy_size: int
    pairs: list             # per instance: list of (agent k, start index p, num_samples)
    greedy_best: np.ndarray  # best greedy reward per instance
    greedy_obj: np.ndarray = None  # best greedy objective per instance, if known

    def samples(self, i):
        return sum(n for _, _, n in self.pairs[i])


def plan_sampling(rewards, budget, K_top=None, augmentations=1, greedy_obj=None):
    """Split what the greedy pass leaves of ``budget`` over the K_top best (agent, start) pairs.

    Pairs are ranked by greedy reward, ties by (k, p). Each gets the same share;
    the remainder goes one sample each to the best-ranked pairs.
    """
    R = np.asarray(rewards, dtype=np.float64)
    I, K, P = R.shape
    greedy = K * P * augmentations
    budget = int(budget)
    if budget < greedy:
        raise BudgetTooSmall(f"budget {budget} is below the greedy pass of {greedy} trajectories")
    K_top = K if K_top is None else int(K_top)
    if K_top < 1:
        raise InvalidArgument("K_top must be at least 1")
    K_top = min(K_top, K * P)
    rest = budget - greedy
    share, extra = divmod(rest, K_top)
    pairs = []
    for i in range(I):
        flat = R[i].reshape(-1)
        order = np.lexsort((np.arange(K * P), -flat))[:K_top]  # reward desc, then (k, p)
        row = []
        for rank, j in enumerate(order):
            n = share + (1 if rank < extra else 0)
            if n:
                row.append((int(j // P), int(j % P), int(n)))
        pairs.append(row)
    return SamplingPlan(budget, greedy, pairs, R.max(axis=(1, 2)), greedy_obj)


def _sample_instance(model, instances, plan, seed, i, starts):
    inst = instances[i]
    incumbent = None if plan.greedy_obj is None else float(plan.greedy_obj[i])
    if incumbent is None:
        incumbent = float(objective_from_reward(inst.tag, plan.greedy_best[i]))
    if not plan.pairs[i]:
        return incumbent
    batch = envs.Batch.from_set(instances[i:i + 1])
    gen = torch.Generator().manual_seed(derive_seed(seed, "sample", i))
    rewards, actions = [], []
    with torch.no_grad():
        emb = model.encode(batch)
        for k in sorted({k for k, _, _ in plan.pairs[i]}):
            s = [starts[p] for kk, p, n in plan.pairs[i] if kk == k for _ in range(n)]
            r = rollout_batch(model, batch, s, agents=[k], mode="sample", generator=gen, emb=emb)
            rewards.append(r.reward.numpy().reshape(-1))
            actions.append(r.actions.numpy().reshape(len(s), -1))
    T = max(a.shape[1] for a in actions)
    actions = np.concatenate([np.pad(a, ((0, 0), (0, T - a.shape[1])), constant_values=envs.PAD)
                              for a in actions])
    rewards = np.concatenate(rewards)
    if rewards.max() < plan.greedy_best[i] - TIE_TOL * max(1.0, abs(plan.greedy_best[i])):
        return incumbent
    return best_objective(inst, rewards, actions, incumbent)


def sampled_eval(model, instances, plan, seed=0, workers=1):
    """Best over the greedy pass and the plan's stochastic rollouts."""
    if len(plan.pairs) != len(instances):
        raise InvalidArgument(f"plan covers {len(plan.pairs)} instances, got {len(instances)}")
    P = 1 + max((p for row in plan.pairs for _, p, _ in row), default=0)
    starts = envs.start_points(instances.tag, instances.n, max(P, 1))
    t0 = time.perf_counter()
    work = lambda i: _sample_instance(model, instances, plan, seed, i, starts)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            best = list(pool.map(work, range(len(instances))))
    else:
        best = [work(i) for i in range(len(instances))]
    n = np.array([plan.greedy_size + plan.samples(i) for i in range(len(instances))], dtype=np.int64)
    return EvalReport(instances.tag, np.array(best, dtype=np.float64), n,
                      (time.perf_counter() - t0) * 1000)


def budgeted_eval(model, instances, budget, P_eval=None, use_augmentation=False, K_top=None,
                  seed=0, workers=1):
    g = greedy_eval(model, instances, P_eval, use_augmentation, workers)
    aug = NUM_AUGMENTATIONS if use_augmentation else 1
    plan = plan_sampling(g.rewards, budget, K_top, aug, g.best_obj)
    s = sampled_eval(model, instances, plan, seed, workers)
    return replace(s, wall_ms=s.wall_ms + g.wall_ms, rewards=g.rewards)


def pareto_sweep(model, instances, reference, multipliers=(1, 2, 5, 10), P_eval=None,
                 use_augmentation=False, K_top=None, seed=0, workers=1):
    """(budget, mean gap %) for budgets that are multiples of the greedy pass size."""
    g = greedy_eval(model, instances, P_eval, use_augmentation, workers)
    aug = NUM_AUGMENTATIONS if use_augmentation else 1
    greedy = int(g.n_trajectories[0])
    rows = []
    for m in multipliers:
        plan = plan_sampling(g.rewards, int(round(m * greedy)), K_top, aug, g.best_obj)
        rep = sampled_eval(model, instances, plan, seed, workers).with_reference(reference)
        rows.append((plan.budget, rep.mean_gap))
    return rows
