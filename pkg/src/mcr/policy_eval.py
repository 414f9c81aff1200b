"""Frozen-encoder behaviour cloning and the success-rate protocol.

Per seed a BC head is trained on the encoder's (fixed) embeddings, every
``eval_every`` epochs the current head is rolled out, and the best checkpoint
rate is kept.  Across seeds we report the mean and the standard error
(sample standard deviation over sqrt(seeds)).
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from mcr.encoder import Encoder, embed_frames
from mcr.errors import InputError, SpecError
from mcr.synthbench import Observation, SynthEnv, expert_action
from mcr.trajectory_data import Trajectory

BC_RESULTS_SCHEMA = "mcr-bc-results-v1"


@dataclass(frozen=True)
class BCConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    hidden: int = 256
    layers: int = 3

    def __post_init__(self) -> None:
        if min(self.epochs, self.batch_size, self.hidden, self.layers) < 1 or self.learning_rate <= 0:
            raise SpecError("BC settings must be positive")


@dataclass(frozen=True)
class EvalProtocol:
    episodes_per_eval: int = 20
    eval_every: int = 10
    seeds: int = 3

    def __post_init__(self) -> None:
        if self.episodes_per_eval < 20:
            raise SpecError("at least 20 evaluation episodes are required")
        if self.seeds < 1 or self.eval_every < 1:
            raise SpecError("seeds and eval_every must be >= 1")


class BCPolicy(nn.Module):
    """BatchNorm over the frozen embedding, then an MLP on ``[z, s]``.

    Targets are standardized with the demonstration statistics; ``act``
    returns actions in environment units.
    """

    def __init__(self, feature_dim: int, state_dim: int, action_dim: int,
                 hidden: int = 256, layers: int = 3):
        super().__init__()
        self.feature_dim, self.state_dim, self.action_dim = feature_dim, state_dim, action_dim
        self.feature_norm = nn.BatchNorm1d(feature_dim)
        mods: list[nn.Module] = []
        width = feature_dim + state_dim
        for _ in range(layers - 1):
            mods += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        mods.append(nn.Linear(width, action_dim))
        self.mlp = nn.Sequential(*mods)
        self.register_buffer("action_mean", torch.zeros(action_dim))
        self.register_buffer("action_std", torch.ones(action_dim))

    def forward(self, z: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.feature_dim or s.shape[-1] != self.state_dim:
            raise InputError(
                f"policy expects ({self.feature_dim}, {self.state_dim}) inputs, "
                f"got ({z.shape[-1]}, {s.shape[-1]})"
            )
        return self.mlp(torch.cat([self.feature_norm(z), s], dim=-1))

    @torch.no_grad()
    def act(self, z: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self(z, s) * self.action_std + self.action_mean


@dataclass
class BCRun:
    policy: BCPolicy
    checkpoints: list[tuple[int, dict]]
    epoch_losses: list[float]
    metadata: dict


def _demo_arrays(demos: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    frames, states, actions = [], [], []
    for traj in demos:
        n = traj.length - 1
        frames.append(traj.frames[:n])
        states.append(traj.states[:n])
        actions.append(traj.actions)
    return np.concatenate(frames), np.concatenate(states), np.concatenate(actions)


def train_bc(
    encoder: Encoder,
    demos: Sequence[Trajectory],
    config: BCConfig = BCConfig(),
    eval_every: int = 10,
    seed: int = 0,
) -> BCRun:
    """Fit a BC head on ``(I_t, s_t) -> a_t`` with the encoder held fixed.

    Embeddings are computed once in eval mode under ``no_grad``, so nothing
    can reach the encoder's parameters.  A checkpoint is kept every
    ``eval_every`` epochs and after the final epoch.
    """
    if not demos or all(t.length < 2 for t in demos):
        raise InputError("need at least one demonstration with an action")
    frames, states, actions = _demo_arrays(demos)
    if frames.shape[1] != frames.shape[2]:
        raise InputError("frames must be square")
    z = embed_frames(encoder, frames)
    s = torch.from_numpy(states)
    a = torch.from_numpy(actions)

    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        policy = BCPolicy(encoder.feature_dim, s.shape[1], a.shape[1], config.hidden, config.layers)
    policy.action_mean.copy_(a.mean(0))
    policy.action_std.copy_(a.std(0, unbiased=False).clamp_min(1e-3))
    target = (a - policy.action_mean) / policy.action_std
    optim = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)
    n = z.shape[0]
    checkpoints: list[tuple[int, dict]] = []
    losses: list[float] = []
    policy.train()
    for epoch in range(1, config.epochs + 1):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if idx.numel() < 2 and n >= 2:
                continue  # BatchNorm needs two rows
            pred = policy(z[idx], s[idx])
            loss = ((pred - target[idx]) ** 2).mean()
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            total += loss.item() * idx.numel()
        losses.append(total / n)
        if epoch % eval_every == 0 or epoch == config.epochs:
            checkpoints.append((epoch, copy.deepcopy(policy.state_dict())))
    policy.eval()
    metadata = {"samples": n, "seed": seed, "eval_every": eval_every, **asdict(config)}
    return BCRun(policy, checkpoints, losses, metadata)


@torch.no_grad()
def bc_training_loss(policy: BCPolicy, encoder: Encoder, demos: Sequence[Trajectory]) -> float:
    """Eval-mode MSE (standardized units) of ``policy`` on ``demos``."""
    frames, states, actions = _demo_arrays(demos)
    policy.eval()
    pred = policy(embed_frames(encoder, frames), torch.from_numpy(states))
    target = (torch.from_numpy(actions) - policy.action_mean) / policy.action_std
    return float(((pred - target) ** 2).mean())


# ------------------------------------------------------------------ policies


class FrozenEncoderPolicy:
    """Observations -> actions through a frozen encoder and a BC head."""

    def __init__(self, encoder: Encoder, head: BCPolicy):
        self.encoder = encoder
        self.head = head.eval()
        self.state_dim = head.state_dim
        self.action_dim = head.action_dim

    def __call__(self, observations: Sequence[Observation]) -> np.ndarray:
        z = embed_frames(self.encoder, np.stack([o.image for o in observations]))
        s = torch.from_numpy(np.stack([o.state for o in observations]))
        return self.head.act(z, s).numpy()


class ExpertPolicy:
    """The scripted controller, reading the privileged world state."""

    def __init__(self, env: SynthEnv):
        self.config = env.config
        self.state_dim = env.config.state_dim
        self.action_dim = env.config.action_dim

    def __call__(self, observations: Sequence[Observation]) -> np.ndarray:
        return np.stack([expert_action(o.world, self.config) for o in observations])


class ZeroPolicy:
    def __init__(self, state_dim: int, action_dim: int):
        self.state_dim = state_dim
        self.action_dim = action_dim

    def __call__(self, observations: Sequence[Observation]) -> np.ndarray:
        return np.zeros((len(observations), self.action_dim), dtype=np.float32)


Policy = Callable[[Sequence[Observation]], np.ndarray]


def evaluate_policy(policy: Policy, env: SynthEnv, episodes: int, rng: np.random.Generator) -> float:
    """Fraction of ``episodes`` that reach success before the horizon.

    Episodes run in lockstep on independent copies of ``env``, each reset
    from its own seed drawn from ``rng``.
    """
    if episodes < 1:
        raise InputError("episodes must be >= 1")
    cfg = env.config
    for attr, want in (("state_dim", cfg.state_dim), ("action_dim", cfg.action_dim)):
        have = getattr(policy, attr, want)
        if have != want:
            raise InputError(f"policy {attr} {have} != env {attr} {want}")
    seeds = rng.integers(0, 2**63 - 1, size=episodes)
    envs = [env.spawn() for _ in range(episodes)]
    obs = [e.reset(np.random.default_rng(int(sd))) for e, sd in zip(envs, seeds)]
    success = [False] * episodes
    active = list(range(episodes))
    while active:
        actions = np.asarray(policy([obs[i] for i in active]), dtype=np.float32)
        still = []
        for i, a in zip(active, actions):
            obs[i], ok = envs[i].step(a)
            success[i] = success[i] or ok
            if not envs[i].done:
                still.append(i)
        active = still
    return sum(success) / episodes


# ------------------------------------------------------------------ protocol


def aggregate_rates(checkpoint_rates: Sequence[Sequence[float]]) -> tuple[float, float, list[float]]:
    """Max over checkpoints per seed, then mean and standard error over seeds."""
    if not checkpoint_rates or any(len(r) == 0 for r in checkpoint_rates):
        raise InputError("every seed needs at least one checkpoint rate")
    best = [float(max(r)) for r in checkpoint_rates]
    mean = float(np.mean(best))
    if len(best) < 2:
        return mean, 0.0, best
    stderr = float(np.std(best, ddof=1) / math.sqrt(len(best)))
    return mean, stderr, best


@dataclass
class ProtocolResult:
    task: str
    seeds: list[dict]
    mean: float
    stderr: float
    settings: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema": BC_RESULTS_SCHEMA,
            "task": self.task,
            "seeds": self.seeds,
            "mean": self.mean,
            "stderr": self.stderr,
            "settings": self.settings,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ProtocolResult":
        return cls(d["task"], list(d["seeds"]), float(d["mean"]), float(d["stderr"]),
                   dict(d.get("settings", {})))


def evaluation_protocol(
    encoder: Encoder,
    env: SynthEnv,
    demos: Sequence[Trajectory],
    protocol: EvalProtocol = EvalProtocol(),
    bc: BCConfig = BCConfig(),
    base_seed: int = 0,
) -> ProtocolResult:
    """Train/evaluate BC once per seed and aggregate max-then-mean +- stderr."""
    per_seed = []
    for i in range(protocol.seeds):
        seed = base_seed + i
        run = train_bc(encoder, demos, bc, protocol.eval_every, seed)
        rates = []
        for _, state in run.checkpoints:
            run.policy.load_state_dict(state)
            policy = FrozenEncoderPolicy(encoder, run.policy)
            # every checkpoint of a seed faces the same reset draws
            rates.append(evaluate_policy(policy, env, protocol.episodes_per_eval,
                                         np.random.default_rng(10_000 + seed)))
        per_seed.append({"seed": seed, "checkpoint_rates": rates,
                         "checkpoint_epochs": [e for e, _ in run.checkpoints]})
    return protocol_result(env.config.task, per_seed, {**asdict(protocol), **asdict(bc)})


def protocol_result(task: str, per_seed: Sequence[dict], settings: dict | None = None) -> ProtocolResult:
    """Aggregate ``[{seed, checkpoint_rates, ...}]`` into a ProtocolResult."""
    per_seed = [dict(p) for p in per_seed]
    mean, stderr, best = aggregate_rates([p["checkpoint_rates"] for p in per_seed])
    for p, b in zip(per_seed, best):
        p["best"] = b
    return ProtocolResult(task, per_seed, mean, stderr, dict(settings or {}))
