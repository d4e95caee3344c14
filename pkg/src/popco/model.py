"""Attention encoder shared by a population of K pointer decoders.

Encoder: input projection, then ``num_encoder_layers`` post-norm transformer
layers (multi-head self-attention with biased q/k/v/output projections,
residual + LayerNorm, ReLU feed-forward, residual + LayerNorm). No positional
encoding, so the embeddings are equivariant to variable order.

Decoder (one per agent, stored stacked along a leading K axis): the context
vector is projected to a query, attends over the embeddings with one
multi-head attention layer (the "glimpse", infeasible variables masked), and
the glimpse output scores every variable against its raw embedding. Scores
are clipped with ``clip * tanh`` and masked before the softmax.

Context per problem: tsp ``[graph, first, current]``; cvrp ``[graph, current,
remaining capacity]``; kp ``[graph, remaining capacity]``; toy ``[graph]``,
where graph is the mean embedding.
"""

import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import envs
from .errors import ContractViolation, CorruptFile, InfeasibleSolution, InvalidArgument
from .instances import TAGS
from .rng import derive_seed

INPUT_DIM = {"tsp": 2, "cvrp": 3, "kp": 2, "toy": 3}


@dataclass(frozen=True)
class ModelConfig:
    problem: str = "tsp"
    embed_dim: int = 32
    num_encoder_layers: int = 2
    num_heads: int = 4
    key_dim: int = 8
    feedforward_dim: int = 128
    tanh_clip: float = 10.0

    def __post_init__(self):
        if self.problem not in TAGS:
            raise InvalidArgument(f"unknown problem {self.problem!r}")
        dims = (self.embed_dim, self.num_encoder_layers, self.num_heads, self.key_dim, self.feedforward_dim)
        if min(dims) < 1:
            raise InvalidArgument("all model dimensions must be >= 1")
        if self.num_heads * self.key_dim != self.embed_dim:
            raise InvalidArgument("num_heads * key_dim must equal embed_dim")

    @property
    def context_dim(self):
        d = self.embed_dim
        return {"tsp": 3 * d, "cvrp": 2 * d + 1, "kp": d + 1, "toy": d}[self.problem]

    @classmethod
    def full_scale(cls, problem="tsp"):
        return cls(problem, 128, 6, 8, 16, 512)


def param_count(config, K):
    """(encoder, decoder, total) parameter counts, derived from the layer shapes above."""
    d, hd, ff = config.embed_dim, config.num_heads * config.key_dim, config.feedforward_dim
    linear = lambda i, o: i * o + o  # noqa: E731
    layer = 3 * linear(d, hd) + linear(hd, d) + linear(d, ff) + linear(ff, d) + 2 * 2 * d
    embed = linear(INPUT_DIM[config.problem], d)
    if config.problem == "cvrp":
        embed += linear(2, d)
    encoder = embed + config.num_encoder_layers * layer
    decoder = linear(config.context_dim, hd) + 2 * linear(d, hd) + linear(hd, d)
    return encoder, decoder, encoder + K * decoder


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d, hd = cfg.embed_dim, cfg.num_heads * cfg.key_dim
        self.h, self.dk = cfg.num_heads, cfg.key_dim
        self.wq = nn.Linear(d, hd)
        self.wk = nn.Linear(d, hd)
        self.wv = nn.Linear(d, hd)
        self.combine = nn.Linear(hd, d)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, cfg.feedforward_dim)
        self.ff2 = nn.Linear(cfg.feedforward_dim, d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x):
        B, A, _ = x.shape
        split = lambda t: t.view(B, A, self.h, self.dk)  # noqa: E731
        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        att = torch.einsum("bihd,bjhd->bhij", q, k).div(math.sqrt(self.dk)).softmax(-1)
        mixed = torch.einsum("bhij,bjhd->bihd", att, v).reshape(B, A, self.h * self.dk)
        x = self.norm1(x + self.combine(mixed))
        return self.norm2(x + self.ff2(F.relu(self.ff1(x))))


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.problem = cfg.problem
        self.embed = nn.Linear(INPUT_DIM[cfg.problem], cfg.embed_dim)
        if cfg.problem == "cvrp":
            self.embed_depot = nn.Linear(2, cfg.embed_dim)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_encoder_layers))

    def forward(self, feats):
        if self.problem == "cvrp":
            x = torch.cat([self.embed_depot(feats[:, :1, :2]), self.embed(feats[:, 1:])], 1)
        else:
            x = self.embed(feats)
        for layer in self.layers:
            x = layer(x)
        return x


class Decoders(nn.Module):
    """K decoder heads with identical shapes, parameters stacked on axis 0."""

    def __init__(self, cfg, K):
        super().__init__()
        d, hd, c = cfg.embed_dim, cfg.num_heads * cfg.key_dim, cfg.context_dim
        self.K, self.h, self.dk, self.clip = K, cfg.num_heads, cfg.key_dim, cfg.tanh_clip
        self.wq = nn.Parameter(torch.empty(K, c, hd))
        self.bq = nn.Parameter(torch.empty(K, hd))
        self.wk = nn.Parameter(torch.empty(K, d, hd))
        self.bk = nn.Parameter(torch.empty(K, hd))
        self.wv = nn.Parameter(torch.empty(K, d, hd))
        self.bv = nn.Parameter(torch.empty(K, hd))
        self.wo = nn.Parameter(torch.empty(K, hd, d))
        self.bo = nn.Parameter(torch.empty(K, d))

    def precompute(self, emb, agents):
        """Glimpse keys/values for the selected agents: (B, K', A, h, dk) each."""
        B, A, _ = emb.shape
        idx = torch.as_tensor(agents)
        k = torch.einsum("bad,kde->bkae", emb, self.wk[idx]) + self.bk[idx][None, :, None]
        v = torch.einsum("bad,kde->bkae", emb, self.wv[idx]) + self.bv[idx][None, :, None]
        shape = (B, len(idx), A, self.h, self.dk)
        return k.reshape(shape), v.reshape(shape)

    def logits(self, emb, cache, agents, context, mask):
        """Masked, clipped pointer scores (B, K', P, A); infeasible entries are -inf.

        context: (B, K', P, C); mask: (B, K', P, A), at least one True per row.
        """
        keys, vals = cache
        idx = torch.as_tensor(agents)
        B, Kp, P, _ = context.shape
        q = torch.einsum("bkpc,kce->bkpe", context, self.wq[idx]) + self.bq[idx][None, :, None]
        q = q.view(B, Kp, P, self.h, self.dk)
        score = torch.einsum("bkphd,bkahd->bkpha", q, keys) / math.sqrt(self.dk)
        score = score.masked_fill(~mask[:, :, :, None, :], float("-inf"))
        glimpse = torch.einsum("bkpha,bkahd->bkphd", score.softmax(-1), vals).reshape(B, Kp, P, -1)
        out = torch.einsum("bkpe,ked->bkpd", glimpse, self.wo[idx]) + self.bo[idx][None, :, None]
        ptr = torch.einsum("bkpd,bad->bkpa", out, emb) / math.sqrt(emb.shape[-1])
        return (self.clip * torch.tanh(ptr)).masked_fill(~mask, float("-inf"))


class PolicyModel(nn.Module):
    """Shared encoder plus a population of decoders."""

    def __init__(self, config, K=1):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoders = Decoders(config, K)

    @property
    def K(self):
        return self.decoders.K

    @property
    def dtype(self):
        return self.decoders.wq.dtype

    def encode(self, batch):
        if batch.tag != self.config.problem:
            raise InvalidArgument(f"model is for {self.config.problem}, got {batch.tag} instances")
        return self.encoder(batch.features().to(self.dtype))

    def context(self, emb, state, Kp, P):
        B = emb.shape[0]
        graph = emb.mean(1)[:, None, None].expand(B, Kp, P, -1)
        tag = self.config.problem
        if tag == "toy":
            return graph
        rem = state.remaining.to(emb.dtype).view(B, Kp, P, 1)
        if tag == "kp":
            return torch.cat([graph, rem], -1)
        cur = envs._gather(emb, state.current).view(B, Kp, P, -1)
        if tag == "cvrp":
            return torch.cat([graph, cur, rem], -1)
        first = envs._gather(emb, state.first).view(B, Kp, P, -1)
        return torch.cat([graph, first, cur], -1)

    def log_probs(self, emb, cache, agents, state, P):
        """Log action probabilities (B, K', P, A) at ``state``; finished rows get a dummy action 0."""
        Kp = len(agents)
        B = emb.shape[0]
        mask = envs.action_mask(state).view(B, Kp, P, -1)
        done = state.done.view(B, Kp, P)
        if not (mask.any(-1) | done).all():
            raise ContractViolation("non-terminal state with no feasible action")
        mask = mask.clone()
        mask[..., 0] |= done
        logits = self.decoders.logits(emb, cache, agents, self.context(emb, state, Kp, P), mask)
        return logits.log_softmax(-1)


def _init_(model, seed):
    gen = torch.Generator().manual_seed(derive_seed(seed, "init", "encoder"))
    with torch.no_grad():
        for mod in model.encoder.modules():
            if isinstance(mod, nn.Linear):
                bound = 1 / math.sqrt(mod.in_features)
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen) * 2 * bound - bound)
                mod.bias.zero_()
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        for k in range(model.K):
            reinit_decoder_(model, k, derive_seed(seed, "init", "decoder", k))


def reinit_decoder_(model, k, seed):
    """Fresh scaled-uniform weights and zero biases for decoder ``k``."""
    gen = torch.Generator().manual_seed(seed)
    dec = model.decoders
    with torch.no_grad():
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(dec, name)
            bound = 1 / math.sqrt(w.shape[1])
            w[k] = torch.rand(w.shape[1:], generator=gen) * 2 * bound - bound
        for name in ("bq", "bk", "bv", "bo"):
            getattr(dec, name)[k] = 0.0


def init_params(config, K, seed):
    model = PolicyModel(config, K)
    _init_(model, seed)
    return model


# -- rollouts ---------------------------------------------------------------

@dataclass
class Rollouts:
    """Batched rollout results; axes (B, K', P[, T])."""
    agents: list
    starts: torch.Tensor   # (B, P)
    actions: torch.Tensor  # (B, K', P, T) long, PAD-filled
    step_logp: torch.Tensor  # (B, K', P, T) f64, 0 for forced/padded steps
    logp: torch.Tensor     # (B, K', P) f64 sum, carries grad when requested
    reward: torch.Tensor   # (B, K', P) f64


@dataclass
class Trajectory:
    actions: list
    reward: float
    logprobs: list
    start: int
    agent: int
    instance: int = 0


def greedy_action(logp):
    """Per-row argmax; ties go to the lowest index."""
    return logp.argmax(-1)


def rollout_batch(model, batch, starts, agents=None, mode="greedy", generator=None,
                  forced=None, emb=None, grad=False):
    """Roll out every (instance, agent, start) triple.

    starts: list of P starting actions shared by all instances, or a (B, P) tensor.
    forced: optional (B, K', P, T) actions to replay instead of choosing.
    """
    agents = list(range(model.K)) if agents is None else list(agents)
    B, Kp = len(batch), len(agents)
    starts = torch.as_tensor(starts, dtype=torch.long)
    if starts.dim() == 1:
        starts = starts[None].expand(B, -1)
    P = starts.shape[1]
    with torch.set_grad_enabled(grad):
        if emb is None:
            emb = model.encode(batch)
        cache = model.decoders.precompute(emb, agents)
        state = envs.reset(batch, starts[:, None, :].expand(B, Kp, P).reshape(B, Kp * P))
        steps = []
        total = torch.zeros(B, Kp, P, dtype=torch.float64)
        t = 0
        while not state.done.all():
            lp = model.log_probs(emb, cache, agents, state, P)
            if forced is not None:
                if state.t >= forced.shape[-1]:
                    raise InfeasibleSolution("forced actions end before the episode does")
                a = forced[..., state.t]
            elif mode == "greedy":
                a = greedy_action(lp)
            elif mode == "sample":
                a = torch.multinomial(lp.detach().exp().reshape(-1, lp.shape[-1]), 1,
                                      generator=generator).view(B, Kp, P)
            else:
                raise InvalidArgument(f"unknown rollout mode {mode!r}")
            live = ~state.done.view(B, Kp, P)
            if forced is not None:
                a = torch.where(live, a, torch.zeros_like(a))
                if (a < 0).any() or (a >= lp.shape[-1]).any():
                    raise InfeasibleSolution("forced action out of range")
            chosen = lp.gather(-1, a[..., None])[..., 0]
            if forced is not None and torch.isinf(chosen[live]).any():
                raise InfeasibleSolution("forced action is masked")
            chosen = torch.where(live, chosen, torch.zeros_like(chosen)).double()
            steps.append(chosen.detach())
            total = total + chosen
            state = envs.step(state, a.reshape(B, Kp * P))
            t += 1
        if forced is not None and (forced[..., state.t:] != envs.PAD).any():
            raise InfeasibleSolution("forced actions continue past the terminal state")
    head = state.actions.shape[-1] - len(steps)
    pad = torch.zeros(B, Kp, P, head, dtype=torch.float64)
    step_logp = torch.cat([pad] + [s[..., None] for s in steps], -1) if steps else pad
    return Rollouts(agents, starts, state.actions.view(B, Kp, P, -1), step_logp, total,
                    envs.terminal_reward(state).view(B, Kp, P))


def rollout(model, agent, instance, starting_point, mode="greedy", seed=0):
    """Single trajectory of decoder ``agent`` on one instance."""
    batch = envs.Batch.from_set([instance])
    gen = torch.Generator().manual_seed(derive_seed(seed, "rollout"))
    r = rollout_batch(model, batch, [starting_point], [agent], mode, gen)
    acts = [int(a) for a in r.actions[0, 0, 0] if a != envs.PAD]
    head = 0 if instance.tag == "toy" else 1
    return Trajectory(acts, float(r.reward[0, 0, 0]),
                      [float(x) for x in r.step_logp[0, 0, 0, head:len(acts)]],
                      starting_point, agent)


def decode_step(model, agent, emb, state):
    """Action probabilities of one decoder at a single-trajectory state, shape (A,)."""
    cache = model.decoders.precompute(emb, [agent])
    with torch.no_grad():
        return model.log_probs(emb, cache, [agent], state, 1)[0, 0, 0].exp()


def _forced_tensor(traj):
    return torch.tensor(traj.actions, dtype=torch.long).view(1, 1, 1, -1)


def trajectory_logp(model, instance, traj, grad=True):
    batch = envs.Batch.from_set([instance])
    start = 0 if instance.tag == "toy" else traj.actions[0]
    r = rollout_batch(model, batch, [start], [traj.agent], forced=_forced_tensor(traj), grad=grad)
    return r.logp[0, 0, 0]


class GradientAccumulator:
    """Named gradient buffers matching a model's parameters."""

    def __init__(self, model):
        self.grads = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        self.count = 0

    def add(self, named_grads, scale=1.0):
        for n, g in named_grads.items():
            if g is not None:
                self.grads[n] += g * scale if scale != 1.0 else g
        self.count += 1

    def zero(self):
        for g in self.grads.values():
            g.zero_()
        self.count = 0

    def __getitem__(self, name):
        return self.grads[name]


def logprob_grad(model, instance, traj):
    """Gradient of log p(trajectory) w.r.t. every parameter (other decoders get exact zeros)."""
    names, params = zip(*model.named_parameters())
    lp = trajectory_logp(model, instance, traj)
    if not lp.requires_grad:
        grads = [None] * len(params)
    else:
        grads = torch.autograd.grad(lp, params, allow_unused=True)
    acc = GradientAccumulator(model)
    acc.add(dict(zip(names, grads)))
    return acc


# -- checkpoints ------------------------------------------------------------
#
# Layout (little endian): b"POPCK1"; u8 problem tag; u32 embed_dim,
# num_encoder_layers, num_heads, key_dim, feedforward_dim; f64 tanh_clip;
# u32 K; u64 training step; then every parameter as raw f32 in
# ``model.state_dict()`` order (encoder.embed.*, [encoder.embed_depot.*],
# encoder.layers.{i}.{wq,wk,wv,combine,norm1,ff1,ff2,norm2}.{weight,bias},
# decoders.{wq,bq,wk,bk,wv,bv,wo,bo}); u32 CRC32 of everything before it.

CK_MAGIC = b"POPCK1"
CK_HEADER = struct.Struct("<6sBIIIIIdIQ")


def checkpoint_bytes(model, step=0):
    c = model.config
    head = CK_HEADER.pack(CK_MAGIC, TAGS.index(c.problem), c.embed_dim, c.num_encoder_layers,
                          c.num_heads, c.key_dim, c.feedforward_dim, c.tanh_clip, model.K, step)
    body = b"".join(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
                    for t in model.state_dict().values())
    data = head + body
    return data + struct.pack("<I", zlib.crc32(data))


def model_from_bytes(buf):
    """Returns (model, step)."""
    if len(buf) < CK_HEADER.size + 4:
        raise CorruptFile("checkpoint too short")
    magic, tag, d, L, h, dk, ff, clip, K, step = CK_HEADER.unpack_from(buf)
    if magic != CK_MAGIC:
        raise CorruptFile(f"bad checkpoint magic {magic!r}")
    (crc,) = struct.unpack("<I", buf[-4:])
    if crc != zlib.crc32(buf[:-4]):
        raise CorruptFile("checkpoint checksum mismatch")
    if tag >= len(TAGS):
        raise CorruptFile(f"bad problem tag {tag}")
    cfg = ModelConfig(TAGS[tag], d, L, h, dk, ff, clip)
    model = PolicyModel(cfg, K)
    sd = model.state_dict()
    need = sum(t.numel() for t in sd.values()) * 4
    body = buf[CK_HEADER.size:-4]
    if len(body) != need:
        raise CorruptFile(f"checkpoint body is {len(body)} bytes, config implies {need}")
    off, loaded = 0, {}
    for name, t in sd.items():
        n = t.numel()
        loaded[name] = torch.frombuffer(bytearray(body[off:off + 4 * n]), dtype=torch.float32).view(t.shape)
        off += 4 * n
    model.load_state_dict(loaded)
    return model, step


def save_checkpoint(model, path, step=0):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model, step))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


def config_dict(cfg):
    return asdict(cfg)


def config_fields():
    return [f.name for f in fields(ModelConfig)]
