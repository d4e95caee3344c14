"""Construction MDPs for TSP, CVRP, KP and the three-armed toy world.

All environments are batched: a state holds ``(B, R)`` trajectories, R rollouts
for each of B instances. Rewards are terminal-only and undiscounted.

Action indices: TSP city ``j``; CVRP ``0`` is the depot and customer ``j`` is
action ``j + 1``; KP item ``j``; toy ``0=Left, 1=Right, 2=Up``.

A state is never mutated; ``step`` returns a new one. Finished trajectories
(CVRP/KP end at different times within a batch) ignore further actions and
record ``-1`` as padding.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ContractViolation, InfeasibleSolution, InvalidArgument
from .instances import UP, InstanceSet, stack

CAPACITY_EPS = 1e-9
PAD = -1


@dataclass(frozen=True)
class Batch:
    """Tensor view of an InstanceSet, float64 throughout."""
    tag: str
    n: int
    coords: torch.Tensor = None      # tsp/cvrp (B, n, 2)
    depot: torch.Tensor = None       # cvrp (B, 2)
    demands: torch.Tensor = None     # cvrp (B, n)
    values: torch.Tensor = None      # kp (B, n)
    weights: torch.Tensor = None     # kp (B, n)
    high_side: torch.Tensor = None   # toy (B,) long
    payoffs: torch.Tensor = None     # toy (B, 3)
    capacity: float = 0.0

    @classmethod
    def from_set(cls, instances):
        if not isinstance(instances, InstanceSet):
            instances = stack(list(instances))
        a = {k: torch.from_numpy(np.array(v)) for k, v in instances.arrays.items()}
        if instances.tag == "toy":
            a["high_side"] = a["high_side"].long()
        return cls(instances.tag, instances.n, capacity=instances.capacity, **a)

    def __len__(self):
        for t in (self.coords, self.values, self.high_side):
            if t is not None:
                return t.shape[0]
        raise AssertionError("empty batch")

    @property
    def num_actions(self):
        return {"tsp": self.n, "cvrp": self.n + 1, "kp": self.n, "toy": 3}[self.tag]

    def features(self):
        """Per-variable model inputs (B, A, F); for CVRP row 0 is the depot, padded with a zero demand."""
        if self.tag == "tsp":
            return self.coords
        if self.tag == "cvrp":
            depot = torch.cat([self.depot, torch.zeros_like(self.depot[:, :1])], -1)[:, None]
            return torch.cat([depot, torch.cat([self.coords, self.demands[..., None]], -1)], 1)
        if self.tag == "kp":
            return torch.stack([self.values, self.weights], -1)
        # toy: constant one-hot action identities; the high side is never observed
        return torch.eye(3, dtype=torch.float64).expand(len(self), 3, 3)

    def locations(self):
        """Node coordinates in action-index order (routing problems only)."""
        if self.tag == "tsp":
            return self.coords
        return torch.cat([self.depot[:, None], self.coords], 1)


@dataclass(frozen=True)
class EnvState:
    batch: Batch
    visited: torch.Tensor    # (B, R, A) bool
    current: torch.Tensor    # (B, R) long, -1 when meaningless
    first: torch.Tensor      # (B, R) long
    remaining: torch.Tensor  # (B, R) f64 capacity left (cvrp/kp)
    length: torch.Tensor     # (B, R) f64 distance travelled so far (routing)
    value: torch.Tensor      # (B, R) f64 collected value (kp)
    done: torch.Tensor       # (B, R) bool
    actions: torch.Tensor    # (B, R, t) long, PAD after termination
    t: int

    @property
    def shape(self):
        return tuple(self.current.shape)


def _gather(x, idx):
    """x: (B, A, ...) per-instance table, idx: (B, R) -> (B, R, ...)."""
    b = torch.arange(x.shape[0])[:, None]
    return x[b, idx]


def _dist(a, b):
    return torch.sqrt(((a - b) ** 2).sum(-1))


def reset(batch, starts):
    """Start R trajectories per instance with the starting actions in ``starts`` (B, R) already taken.

    Also accepts a single instance and an int start, giving a (1, 1) state.
    """
    if not isinstance(batch, Batch):
        batch = Batch.from_set([batch])
        starts = [[starts]]
    starts = torch.as_tensor(starts, dtype=torch.long)
    B, R = starts.shape
    if B != len(batch):
        raise InvalidArgument(f"starts cover {B} instances, batch has {len(batch)}")
    A = batch.num_actions
    f64 = torch.float64
    zeros = torch.zeros(B, R, dtype=f64)
    state = EnvState(batch, torch.zeros(B, R, A, dtype=torch.bool), torch.full((B, R), -1),
                     torch.full((B, R), -1), zeros, zeros, zeros, torch.zeros(B, R, dtype=torch.bool),
                     torch.zeros(B, R, 0, dtype=torch.long), 0)
    tag = batch.tag
    if tag == "toy":
        if (starts != 0).any():
            raise InvalidArgument("toy world has a single fixed start (index 0)")
        return state
    lo = 1 if tag == "cvrp" else 0
    if (starts < lo).any() or (starts >= A).any():
        raise InvalidArgument(f"starting point out of range [{lo}, {A})")
    if tag == "cvrp":
        state = replace(state, current=torch.zeros(B, R, dtype=torch.long),
                        remaining=torch.full((B, R), batch.capacity, dtype=f64))
    elif tag == "kp":
        state = replace(state, remaining=torch.full((B, R), batch.capacity, dtype=f64))
        w = _gather(batch.weights, starts)
        if (w > batch.capacity + CAPACITY_EPS).any():
            raise InvalidArgument("starting item does not fit in the bag")
    return replace(step(state, starts), first=starts)


def action_mask(state):
    """Feasible actions (B, R, A). Rows already finished are all False."""
    batch = state.batch
    tag = batch.tag
    if tag == "toy":
        m = torch.ones(*state.shape, 3, dtype=torch.bool)
    elif tag == "tsp":
        m = ~state.visited
    elif tag == "cvrp":
        fits = _demand_table(batch)[:, None, :] <= state.remaining[..., None] + CAPACITY_EPS
        m = ~state.visited & fits
        m[..., 0] = state.current != 0
    else:
        fits = batch.weights[:, None, :] <= state.remaining[..., None] + CAPACITY_EPS
        m = ~state.visited & fits
    return m & ~state.done[..., None]


def _demand_table(batch):
    return torch.cat([torch.zeros_like(batch.demands[:, :1]), batch.demands], 1)


def step(state, action):
    """Apply ``action`` (B, R) to every unfinished trajectory."""
    action = torch.as_tensor(action, dtype=torch.long)
    if action.shape != state.shape:
        raise ContractViolation(f"action shape {tuple(action.shape)} != state shape {state.shape}")
    live = ~state.done
    mask = action_mask(state)
    safe = torch.where(live, action, torch.zeros_like(action))
    if ((safe < 0) | (safe >= mask.shape[-1]))[live].any():
        raise ContractViolation("action index out of range")
    ok = mask.gather(-1, safe[..., None])[..., 0]
    if (live & ~ok).any():
        raise ContractViolation("infeasible action stepped")

    batch = state.batch
    tag = batch.tag
    rec = torch.where(live, action, torch.full_like(action, PAD))
    actions = torch.cat([state.actions, rec[..., None]], -1)
    visited = state.visited.clone()
    onehot = torch.zeros_like(visited).scatter_(-1, safe[..., None], True) & live[..., None]
    current, remaining, length, value = state.current, state.remaining, state.length, state.value

    if tag == "toy":
        return replace(state, actions=actions, done=state.done | live, t=state.t + 1)
    if tag in ("tsp", "cvrp"):
        loc = batch.locations()
        if state.t > 0 or tag == "cvrp":
            leg = _dist(_gather(loc, current.clamp(min=0)), _gather(loc, safe))
            length = torch.where(live, length + leg, length)
        current = torch.where(live, safe, current)
    if tag == "cvrp":
        onehot[..., 0] = False
        at_depot = live & (safe == 0)
        dem = _gather(_demand_table(batch), safe)
        remaining = torch.where(at_depot, torch.full_like(remaining, batch.capacity),
                                torch.where(live, remaining - dem, remaining))
    if tag == "kp":
        remaining = torch.where(live, remaining - _gather(batch.weights, safe), remaining)
        value = torch.where(live, value + _gather(batch.values, safe), value)
    visited |= onehot
    nxt = replace(state, visited=visited, current=current, remaining=remaining, length=length,
                  value=value, actions=actions, t=state.t + 1)

    if tag == "kp":
        done = state.done | ~action_mask(replace(nxt, done=state.done)).any(-1)
    elif tag == "cvrp":
        done = visited[..., 1:].all(-1)
    else:
        done = visited.all(-1)
    return replace(nxt, done=done)


def terminal_reward(state):
    """Reward (B, R); raises if any trajectory is unfinished."""
    if not state.done.all():
        raise ContractViolation("terminal_reward on a non-terminal state")
    batch = state.batch
    tag = batch.tag
    if tag == "kp":
        return state.value.clone()
    if tag == "toy":
        choice = state.actions[..., 0]
        high = batch.high_side[:, None].expand_as(choice)
        low_p, mid_p, high_p = (batch.payoffs[:, i:i + 1].expand_as(choice) for i in range(3))
        return torch.where(choice == UP, mid_p, torch.where(choice == high, high_p, low_p))
    loc = batch.locations()
    home = state.first if tag == "tsp" else torch.zeros_like(state.current)
    back = _dist(_gather(loc, state.current), _gather(loc, home))
    return -(state.length + back)


def start_points(tag, n, P):
    """Default starting actions: the first P variables (toy: P replicas of its only start)."""
    if tag == "toy":
        return list(np.zeros(P, dtype=int))
    N = n
    if not 1 <= P <= N:
        raise InvalidArgument(f"need 1 <= P <= {N}, got {P}")
    lo = 1 if tag == "cvrp" else 0
    return list(range(lo, lo + P))


def random_rollout(batch, starts, generator):
    """Uniform random feasible policy; returns the terminal state."""
    state = reset(batch, starts)
    while not state.done.all():
        m = action_mask(state)
        w = m.double()
        w[state.done] = 1.0
        a = torch.multinomial(w.reshape(-1, w.shape[-1]), 1, generator=generator).reshape(state.shape)
        state = step(state, a)
    return state


def trajectory_actions(state, b, r):
    """Unpadded action list of one trajectory."""
    row = state.actions[b, r]
    return [int(x) for x in row[row != PAD]]


# Independent pure-Python objective computation; deliberately shares no code with the tensors above.

def recompute_reward(instance, actions):
    """Validate ``actions`` as a complete solution of ``instance`` and return its reward."""
    tag = instance.tag
    actions = [int(a) for a in actions]
    if tag == "toy":
        if len(actions) != 1 or actions[0] not in (0, 1, 2):
            raise InfeasibleSolution(f"toy solution must be one action in 0..2, got {actions}")
        return float(instance.payoff(actions[0]))
    if tag == "tsp":
        n = len(instance.coords)
        if sorted(actions) != list(range(n)):
            raise InfeasibleSolution("TSP solution must visit every city exactly once")
        pts = [tuple(map(float, instance.coords[a])) for a in actions]
        return -sum(math.dist(pts[i], pts[(i + 1) % n]) for i in range(n))
    if tag == "cvrp":
        return _recompute_cvrp(instance, actions)
    if tag == "kp":
        return _recompute_kp(instance, actions)
    raise InvalidArgument(f"unknown tag {tag}")


def _recompute_cvrp(instance, actions):
    n = len(instance.coords)
    customers = [a for a in actions if a != 0]
    if sorted(customers) != list(range(1, n + 1)):
        raise InfeasibleSolution("every customer must be visited exactly once")
    if not actions or actions[0] == 0 or actions[-1] == 0:
        raise InfeasibleSolution("a route must start and end at a customer (depot legs are implicit)")
    if any(a == b == 0 for a, b in zip(actions, actions[1:])):
        raise InfeasibleSolution("consecutive depot visits")
    depot = tuple(map(float, instance.depot))
    pos, load, total = depot, 0.0, 0.0
    for a in actions:
        if a == 0:
            nxt, load = depot, 0.0
        else:
            nxt = tuple(map(float, instance.coords[a - 1]))
            load += float(instance.demands[a - 1])
            if load > instance.capacity + CAPACITY_EPS:
                raise InfeasibleSolution("vehicle capacity exceeded")
        total += math.dist(pos, nxt)
        pos = nxt
    return -(total + math.dist(pos, depot))


def _recompute_kp(instance, actions):
    n = len(instance.values)
    if len(set(actions)) != len(actions) or any(not 0 <= a < n for a in actions):
        raise InfeasibleSolution("items must be distinct valid indices")
    w = sum(float(instance.weights[a]) for a in actions)
    if w > instance.capacity + CAPACITY_EPS:
        raise InfeasibleSolution(f"total weight {w} exceeds capacity {instance.capacity}")
    taken = set(actions)
    room = instance.capacity - w
    if any(j not in taken and instance.weights[j] <= room + CAPACITY_EPS for j in range(n)):
        raise InfeasibleSolution("bag is not full: another item still fits")
    return sum(float(instance.values[a]) for a in actions)
