"""Population REINFORCE: POMO-style pretraining and winner-take-all specialization.

Training runs in three phases:

1. one decoder trained on every (instance, start) trajectory;
2. that decoder is dropped, K fresh decoders are trained the same way on top
   of the frozen encoder;
3. encoder unfrozen, and each instance (or each instance/start pair) only
   trains the trajectory of the agent that scored best on it.

The baseline of a trajectory is always the mean reward of the same agent over
its P starting points on the same instance.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np
import torch

from . import envs
from .errors import InvalidArgument, NonFiniteGradient
from .instances import TAGS, generate
from .model import PolicyModel, init_params, reinit_decoder_, rollout_batch
from .rng import derive_seed

PER_START, PER_INSTANCE = "per_start", "per_instance"


@dataclass(frozen=True)
class TrainingConfig:
    problem: str = "tsp"
    n: int = 10
    batch_size: int = 64
    num_starts: int = 10
    population: int = 4
    phase1_steps: int = 5000
    phase2_steps: int = 1000
    phase3_steps: int = 5000
    learning_rate: float = 1e-4
    l2: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    selection: str = "auto"
    capacity: float = 25.0
    demand_divisor: int = 0
    chunk_size: int = 16

    def __post_init__(self):
        if self.problem not in TAGS:
            raise InvalidArgument(f"unknown problem {self.problem!r}")
        for name in ("batch_size", "num_starts", "population", "chunk_size"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if min(self.phase1_steps, self.phase2_steps, self.phase3_steps) < 0:
            raise InvalidArgument("phase lengths must be >= 0")
        if self.problem != "toy" and self.num_starts > self.num_variables:
            raise InvalidArgument(f"num_starts {self.num_starts} exceeds {self.num_variables} variables")
        if not self.learning_rate > 0:
            raise InvalidArgument("learning rate must be positive")
        if self.selection not in ("auto", PER_START, PER_INSTANCE):
            raise InvalidArgument(f"unknown selection rule {self.selection!r}")

    @property
    def num_variables(self):
        return 3 if self.problem == "toy" else self.n

    @property
    def rule(self):
        """Phase-3 selection: per instance for TSP (any start reaches the same tour), else per start."""
        if self.selection != "auto":
            return self.selection
        return PER_INSTANCE if self.problem == "tsp" else PER_START

    def starts(self):
        return envs.start_points(self.problem, self.num_variables, self.num_starts)

    def sample_instances(self, phase, step):
        seed = derive_seed(self.seed, "train", phase, step)
        return generate(self.problem, self.n, self.batch_size, seed, capacity=self.capacity,
                        demand_divisor=self.demand_divisor or None)


def training_fields():
    return [f.name for f in fields(TrainingConfig)]


# -- winner selection -------------------------------------------------------

def select_best_per_start(rewards):
    """Winning agent for each (instance, start): (B, P) ints; ties go to the lowest agent."""
    return np.asarray(rewards).argmax(axis=1)


def select_best_per_instance(rewards):
    """Winning (agent, start) per instance: (B, 2) ints; ties go to lowest agent, then lowest start."""
    r = np.asarray(rewards)
    B, K, P = r.shape
    flat = r.reshape(B, K * P).argmax(axis=1)
    return np.stack([flat // P, flat % P], axis=1)


def winner_mask(rewards, rule):
    """Boolean (B, K, P) marking the trajectories that receive gradient."""
    r = np.asarray(rewards)
    B, K, P = r.shape
    mask = np.zeros((B, K, P), dtype=bool)
    if rule is None:
        mask[:] = True
    elif rule == PER_START:
        k = select_best_per_start(r)
        mask[np.arange(B)[:, None], k, np.arange(P)[None, :]] = True
    elif rule == PER_INSTANCE:
        kp = select_best_per_instance(r)
        mask[np.arange(B), kp[:, 0], kp[:, 1]] = True
    else:
        raise InvalidArgument(f"unknown selection rule {rule!r}")
    return mask


def baselines(rewards):
    """b[i][k] = mean of agent k's rewards over the P starts of instance i."""
    return rewards.mean(-1, keepdim=True)


def loss_terms(rewards, logp, mask, norm):
    """REINFORCE surrogate over the winning trajectories only: -(1/norm) sum (R - b) log p."""
    adv = (rewards - baselines(rewards))[mask]
    return -(adv * logp[mask]).sum() / norm


# -- one synchronous update -------------------------------------------------

@dataclass
class StepStats:
    mean_agent_reward: float
    population_reward: float
    loss: float


class Trainer:
    """Owns the optimizer for one phase; Adam moments start fresh every phase."""

    def __init__(self, model, cfg, phase, rule=None, freeze_encoder=False, workers=1):
        self.model, self.cfg, self.phase, self.rule = model, cfg, phase, rule
        self.freeze_encoder = freeze_encoder
        self.workers = max(1, int(workers))
        self.params = [(n, p) for n, p in model.named_parameters()
                       if not (freeze_encoder and n.startswith("encoder."))]
        self.opt = torch.optim.AdamW([p for _, p in self.params], lr=cfg.learning_rate,
                                     betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                                     weight_decay=cfg.l2)

    def norm(self):
        cfg = self.cfg
        if self.rule == PER_INSTANCE:
            return cfg.batch_size
        return cfg.batch_size * cfg.num_starts

    def _chunk(self, batch, lo, hi, step, rewards_hook):
        cfg = self.cfg
        sub = envs.Batch.from_set(batch[lo:hi])
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "rollout", self.phase, step, lo))
        if self.freeze_encoder:
            with torch.no_grad():
                emb = self.model.encode(sub)
        else:
            emb = None
        r = rollout_batch(self.model, sub, cfg.starts(), mode="sample", generator=gen, emb=emb, grad=True)
        rewards = r.reward
        if rewards_hook is not None:
            rewards = rewards_hook(lo, rewards.clone())
        mask = torch.from_numpy(winner_mask(rewards.numpy(), self.rule))
        loss = loss_terms(rewards, r.logp, mask, self.norm())
        tensors = [p for _, p in self.params]
        grads = torch.autograd.grad(loss, tensors, allow_unused=True) if loss.requires_grad else [None] * len(tensors)
        return rewards.detach(), float(loss.detach()), grads

    def step(self, batch, step, rewards_hook=None):
        """One update from the instance set ``batch``.

        ``rewards_hook(lo, rewards)`` may replace the rewards of the chunk that
        starts at instance ``lo``; tests use it to perturb losing trajectories.
        """
        B = len(batch)
        bounds = [(lo, min(lo + self.cfg.chunk_size, B)) for lo in range(0, B, self.cfg.chunk_size)]
        work = lambda lh: self._chunk(batch, lh[0], lh[1], step, rewards_hook)  # noqa: E731
        if self.workers > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(work, bounds))
        else:
            results = [work(b) for b in bounds]

        total = [None] * len(self.params)
        for _, _, grads in results:  # fixed chunk order keeps the sum deterministic
            for j, g in enumerate(grads):
                if g is not None:
                    total[j] = g.clone() if total[j] is None else total[j] + g
        for j, (name, p) in enumerate(self.params):
            g = total[j] if total[j] is not None else torch.zeros_like(p)
            if not torch.isfinite(g).all():
                bad = int((~torch.isfinite(g)).sum())
                raise NonFiniteGradient(f"{bad} non-finite gradient entries in {name} at phase {self.phase} step {step}")
            p.grad = g
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)

        rewards = torch.cat([r for r, _, _ in results])
        return StepStats(float(rewards.mean()), float(rewards.amax(dim=(1, 2)).mean()),
                         sum(l for _, l, _ in results))


def _run(trainer, steps, log, start_step=0):
    cfg = trainer.cfg
    for s in range(start_step, steps):
        t0 = time.perf_counter()
        stats = trainer.step(cfg.sample_instances(trainer.phase, s), s)
        if log is not None:
            log(trainer.phase, s, stats, (time.perf_counter() - t0) * 1000)
    return trainer.model


def phase1(cfg, model_cfg, log=None, workers=1, model=None):
    """Single decoder, every trajectory trained."""
    if model is None:
        model = init_params(model_cfg, 1, derive_seed(cfg.seed, "init", 1))
    return _run(Trainer(model, cfg, 1, rule=None, workers=workers), cfg.phase1_steps, log)


def population_from(model, K, seed):
    """Copy the encoder, discard the decoder, and attach K freshly initialized ones."""
    pop = PolicyModel(model.config, K)
    pop.encoder.load_state_dict(model.encoder.state_dict())
    for k in range(K):
        reinit_decoder_(pop, k, derive_seed(seed, "init", 2, "decoder", k))
    return pop


def phase2(model, K, cfg, log=None, workers=1):
    """K new decoders trained in parallel on shared batches; the encoder is not touched."""
    pop = population_from(model, K, cfg.seed)
    return _run(Trainer(pop, cfg, 2, rule=None, freeze_encoder=True, workers=workers), cfg.phase2_steps, log)


def phase3(model, cfg, log=None, workers=1):
    """Winner-take-all training with the encoder unfrozen."""
    return _run(Trainer(model, cfg, 3, rule=cfg.rule, workers=workers), cfg.phase3_steps, log)


def train(cfg, model_cfg, phases=(1, 2, 3), model=None, log=None, workers=1, on_phase_end=None):
    if model_cfg.problem != cfg.problem:
        raise InvalidArgument("model and training configs disagree on the problem")
    for ph in sorted(phases):
        if ph == 1:
            model = phase1(cfg, model_cfg, log, workers, model)
        elif ph == 2:
            if model is None:
                raise InvalidArgument("phase 2 needs a phase-1 model")
            model = phase2(model, cfg.population, cfg, log, workers)
        elif ph == 3:
            if model is None:
                raise InvalidArgument("phase 3 needs a population")
            model = phase3(model, cfg, log, workers)
        else:
            raise InvalidArgument(f"no phase {ph}")
        if on_phase_end is not None:
            on_phase_end(ph, model)
    return model


# -- evaluation -------------------------------------------------------------

@dataclass
class PopulationEval:
    rewards: np.ndarray        # (I, K, P) greedy rewards
    best: np.ndarray           # (I,) best over agents and starts
    per_agent: np.ndarray      # (I, K) best over starts, per agent

    @property
    def population_reward(self):
        return float(self.best.mean())

    @property
    def agent_means(self):
        return self.per_agent.mean(axis=0)

    def agents_at_best(self):
        """Per instance, how many agents reach the population's best reward."""
        return (self.per_agent == self.best[:, None]).sum(axis=1)


def lower_bound_holds(per_agent):
    """mean_i max_k R[i, k] >= max_k mean_i R[i, k]; exact in floating point."""
    per_agent = np.asarray(per_agent, dtype=np.float64)
    # Both sides summed down the same axis in the same order: rounded addition is
    # monotone, so the elementwise max >= each column survives floating point.
    cols = np.column_stack([per_agent.max(axis=1), per_agent]).sum(axis=0) / len(per_agent)
    return bool(cols[0] >= cols[1:].max())


def greedy_rewards(model, instances, starts, chunk_size=256, workers=1):
    """Greedy rewards (I, K, P) in fixed chunks, merged in instance order."""
    bounds = [(lo, min(lo + chunk_size, len(instances))) for lo in range(0, len(instances), chunk_size)]

    def work(lh):
        sub = envs.Batch.from_set(instances[lh[0]:lh[1]])
        return rollout_batch(model, sub, starts, mode="greedy").reward

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    return torch.cat(parts).numpy()


def evaluate_population(model, instances, P_eval=None, workers=1):
    if P_eval is None:
        P_eval = instances.n if instances.tag != "toy" else 1
    starts = envs.start_points(instances.tag, 3 if instances.tag == "toy" else instances.n, P_eval)
    r = greedy_rewards(model, instances, starts, workers=workers)
    per_agent = r.max(axis=2)
    ev = PopulationEval(r, per_agent.max(axis=1), per_agent)
    if not lower_bound_holds(per_agent):
        raise AssertionError("population lower bound violated")
    return ev


def expected_toy_reward(model, instances):
    """Exact expected reward of each agent's stochastic policy on toy instances, (K,)."""
    batch = envs.Batch.from_set(instances)
    with torch.no_grad():
        emb = model.encode(batch)
        agents = list(range(model.K))
        cache = model.decoders.precompute(emb, agents)
        state = envs.reset(batch, torch.zeros(len(batch), model.K, dtype=torch.long))
        probs = model.log_probs(emb, cache, agents, state, 1)[:, :, 0].exp().double()  # (B, K, 3)
    pay = torch.stack([torch.where(batch.high_side == a, batch.payoffs[:, 2], batch.payoffs[:, 0])
                       for a in (0, 1)] + [batch.payoffs[:, 1]], -1)  # (B, 3)
    return (probs * pay[:, None]).sum(-1).mean(0).numpy()


def with_steps(cfg, h1=None, h2=None, h3=None):
    return replace(cfg, phase1_steps=cfg.phase1_steps if h1 is None else h1,
                   phase2_steps=cfg.phase2_steps if h2 is None else h2,
                   phase3_steps=cfg.phase3_steps if h3 is None else h3)
