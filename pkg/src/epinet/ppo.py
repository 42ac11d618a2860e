"""Proximal policy optimization for the weekly SD decision task.

Actor-critic with a squashed-Gaussian policy: the actor outputs the mean of a
Gaussian in pre-squash space (state-independent log-std), a sigmoid maps
samples to the unit interval, and the environment's action spec scales them
onto [0, sd_max]. The surrogate objective is the clipped probability-ratio
form; advantages come from truncated generalized advantage estimation over
complete episodes; the critic trains on one-step temporal-difference targets
frozen at collection time.
"""
from __future__ import annotations

import base64
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .rl_env import EpidemicEnv, episode_seed
from .rng import torch_seed_from

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_STD_BOUNDS = (-5.0, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_upsilon: float = 0.95  # GAE weight
    learning_rate: float = 3e-4
    rollout_episodes: int = 64  # episodes per policy update
    minibatch_size: int = 64
    epochs_per_update: int = 10
    total_episodes: int = 6400
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    hidden: tuple[int, ...] = (64, 64)
    log_std_init: float = -0.5
    ma_window: int = 200  # moving-average window for the learning curve
    convergence_patience: int = 500  # episodes between compared averages
    convergence_rel_improvement: float = 0.01
    min_episodes: int = 1500  # never declare convergence earlier

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if not 0.0 < self.gamma < 1.0 or not 0.0 <= self.gae_upsilon < 1.0:
            raise ValueError("gamma in (0,1) and gae_upsilon in [0,1) required")
        for name in ("rollout_episodes", "minibatch_size", "epochs_per_update", "total_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class ActorCritic(nn.Module):
    """Two small MLPs plus a state-independent log standard deviation."""

    def __init__(self, obs_dim: int = 5, hidden: tuple[int, ...] = (64, 64),
                 log_std_init: float = -0.5):
        super().__init__()
        self.obs_dim = obs_dim

        def mlp(out_dim: int) -> nn.Sequential:
            layers: list[nn.Module] = []
            last = obs_dim
            for h in hidden:
                layers += [nn.Linear(last, h), nn.Tanh()]
                last = h
            layers.append(nn.Linear(last, out_dim))
            return nn.Sequential(*layers)

        self.actor = mlp(1)
        self.critic = mlp(1)
        self.log_std = nn.Parameter(torch.tensor([log_std_init]))

    def mean_std(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean = self.actor(obs).squeeze(-1)
        log_std = self.log_std.clamp(*LOG_STD_BOUNDS).to(obs.dtype)
        return mean, log_std.exp() * torch.ones_like(mean)

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(obs).squeeze(-1)

    def log_prob(self, obs: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """log pi(a|s) of the squashed action a = sigmoid(z).

        Includes the change-of-variables correction log|da/dz| = log a(1-a),
        written via softplus for numerical stability.
        """
        mean, std = self.mean_std(obs)
        base = -0.5 * (((z - mean) / std) ** 2 + 2.0 * std.log()
                       + float(np.log(2.0 * np.pi)))
        jacobian = -nn.functional.softplus(z) - nn.functional.softplus(-z)
        return base - jacobian

    def entropy(self) -> torch.Tensor:
        """Entropy of the pre-squash Gaussian (used for the optional bonus)."""
        log_std = self.log_std.clamp(*LOG_STD_BOUNDS)
        return (0.5 + 0.5 * float(np.log(2.0 * np.pi)) + log_std).sum()

    @torch.no_grad()
    def act(self, obs: torch.Tensor, gen: torch.Generator) -> tuple[float, float, float]:
        """Sample one squashed action; returns (z, log_prob, value)."""
        mean, std = self.mean_std(obs)
        eps = torch.randn(mean.shape, generator=gen, dtype=obs.dtype)
        z = mean + std * eps
        return float(z), float(self.log_prob(obs, z)), float(self.value(obs))

    @torch.no_grad()
    def act_mean(self, obs: torch.Tensor) -> float:
        """Deterministic squashed action (the distribution's mean pre-squash)."""
        mean, _ = self.mean_std(obs)
        return float(torch.sigmoid(mean))


def squash(z: float | np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))


@dataclass
class RolloutBuffer:
    """Transition storage for one collection window."""

    obs: list[np.ndarray] = field(default_factory=list)
    z: list[float] = field(default_factory=list)  # pre-squash actions
    log_prob: list[float] = field(default_factory=list)
    reward: list[float] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    done: list[bool] = field(default_factory=list)
    advantage: Optional[np.ndarray] = None
    td_target: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.reward)

    def add(self, obs, z, log_prob, reward, value, done) -> None:
        self.obs.append(np.asarray(obs, dtype=float))
        self.z.append(float(z))
        self.log_prob.append(float(log_prob))
        self.reward.append(float(reward))
        self.value.append(float(value))
        self.done.append(bool(done))

    def clear(self) -> None:
        self.__init__()


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float, upsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Truncated generalized advantage estimation over a collection window.

    delta_t = r_{t+1} + gamma V(s_{t+1}) - V(s_t), with the bootstrap value
    zeroed at episode ends; the advantage is the (gamma*upsilon)-weighted tail
    sum of deltas within each episode. Returns (advantages, td_targets).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    if n == 0:
        raise ValueError("empty buffer")
    next_values = np.append(values[1:], 0.0)
    next_values[dones] = 0.0
    deltas = rewards + gamma * next_values - values
    adv = np.empty(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            acc = 0.0
        acc = deltas[t] + gamma * upsilon * acc
        adv[t] = acc
    return adv, deltas + values  # td_target = r + gamma V(s') = delta + V(s)


def clipped_surrogate(model: ActorCritic, obs: torch.Tensor, z: torch.Tensor,
                      log_prob_old: torch.Tensor, advantage: torch.Tensor,
                      epsilon: float) -> tuple[torch.Tensor, dict]:
    """Mean clipped-ratio objective over a batch (to be ascended).

    Non-finite probability ratios are dropped from the batch and counted.
    """
    log_prob_new = model.log_prob(obs, z)
    ratio = torch.exp(log_prob_new - log_prob_old)
    finite = torch.isfinite(ratio)
    dropped = int((~finite).sum())
    if dropped:
        ratio = ratio[finite]
        advantage = advantage[finite]
    unclipped = ratio * advantage
    clipped = torch.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage
    objective = torch.minimum(unclipped, clipped).mean()
    frac_clipped = float((torch.abs(ratio - 1.0) > epsilon).float().mean())
    return objective, {"dropped_ratios": dropped, "clip_fraction": frac_clipped}


def update(model: ActorCritic, optimizer: torch.optim.Optimizer, buffer: RolloutBuffer,
           cfg: TrainConfig, gen: torch.Generator) -> dict:
    """K epochs of minibatch ascent on the clipped objective.

    Loss per minibatch: -L_clip + value_coef * (V(s) - td_target)^2
    - entropy_coef * H. Raises on non-finite loss.
    """
    adv, td_target = gae(np.asarray(buffer.reward), np.asarray(buffer.value),
                         np.asarray(buffer.done), cfg.gamma, cfg.gae_upsilon)
    buffer.advantage, buffer.td_target = adv, td_target

    obs = torch.as_tensor(np.stack(buffer.obs), dtype=torch.float32)
    z = torch.as_tensor(np.asarray(buffer.z), dtype=torch.float32)
    logp_old = torch.as_tensor(np.asarray(buffer.log_prob), dtype=torch.float32)
    adv_t = torch.as_tensor(adv, dtype=torch.float32)
    adv_t = (adv_t - adv_t.mean()) / (adv_t.std(unbiased=False) + 1e-8)
    target_t = torch.as_tensor(td_target, dtype=torch.float32)

    n = len(buffer)
    stats = {"policy_objective": 0.0, "value_loss": 0.0, "dropped_ratios": 0,
             "clip_fraction": 0.0, "n_minibatches": 0}
    for _ in range(cfg.epochs_per_update):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start: start + cfg.minibatch_size]
            objective, info = clipped_surrogate(model, obs[idx], z[idx],
                                                logp_old[idx], adv_t[idx], cfg.clip_epsilon)
            value_loss = ((model.value(obs[idx]) - target_t[idx]) ** 2).mean()
            loss = -objective + cfg.value_coef * value_loss - cfg.entropy_coef * model.entropy()
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss during update: {loss}")
            optimizer.zero_grad()
            loss.backward()
            if cfg.max_grad_norm > 0:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            optimizer.step()
            stats["policy_objective"] += float(objective)
            stats["value_loss"] += float(value_loss)
            stats["dropped_ratios"] += info["dropped_ratios"]
            stats["clip_fraction"] += info["clip_fraction"]
            stats["n_minibatches"] += 1
    for key in ("policy_objective", "value_loss", "clip_fraction"):
        stats[key] /= max(stats["n_minibatches"], 1)
    return stats


@dataclass
class LearningCurve:
    episodes: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    moving_average: list[float] = field(default_factory=list)

    def append(self, episode: int, reward: float, window: int) -> None:
        self.episodes.append(episode)
        self.rewards.append(reward)
        tail = self.rewards[-window:]
        self.moving_average.append(float(np.mean(tail)))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "reward", "moving_average"])
            for e, r, m in zip(self.episodes, self.rewards, self.moving_average):
                w.writerow([e, repr(r), repr(m)])


def train(env_factory: Callable[[], EpidemicEnv], cfg: TrainConfig, master_seed: int,
          progress: Optional[Callable[[int, float], None]] = None
          ) -> tuple[ActorCritic, LearningCurve]:
    """Run PPO until the moving-average reward stops improving or the episode
    budget is exhausted. Fully deterministic for a fixed master seed."""
    torch.manual_seed(torch_seed_from(master_seed, salt=1))
    torch.set_num_threads(1)
    gen = torch.Generator().manual_seed(torch_seed_from(master_seed, salt=2))

    env = env_factory()
    model = ActorCritic(obs_dim=5, hidden=cfg.hidden, log_std_init=cfg.log_std_init)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    buffer = RolloutBuffer()
    curve = LearningCurve()

    episode = 0
    converged = False
    while episode < cfg.total_episodes and not converged:
        buffer.clear()
        for _ in range(cfg.rollout_episodes):
            obs = env.reset(episode_seed(master_seed, episode))
            done = False
            ep_reward = 0.0
            while not done:
                obs_t = torch.as_tensor(obs.vector(), dtype=torch.float32)
                z, logp, value = model.act(obs_t, gen)
                action = float(squash(z))
                obs, reward, done, _ = env.step(action=action)
                buffer.add(obs_t.numpy(), z, logp, reward, value, done)
                ep_reward += reward
            episode += 1
            curve.append(episode, ep_reward, cfg.ma_window)
            if progress is not None:
                progress(episode, ep_reward)
        update(model, optimizer, buffer, cfg, gen)
        converged = _converged(curve, cfg)
    if converged:
        log.info("converged after %d episodes", episode)
    return model, curve


def _converged(curve: LearningCurve, cfg: TrainConfig) -> bool:
    n = len(curve.moving_average)
    if n < max(cfg.min_episodes, cfg.ma_window + cfg.convergence_patience):
        return False
    now = curve.moving_average[-1]
    before = curve.moving_average[-1 - cfg.convergence_patience]
    return (now - before) < cfg.convergence_rel_improvement * max(abs(before), 1e-9)


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, model: ActorCritic, cfg: TrainConfig,
                    sd_max: float, lam: float, master_seed: int,
                    extra: dict | None = None) -> None:
    state = {k: v.detach().numpy().tolist() for k, v in model.state_dict().items()}
    doc = {
        "version": CHECKPOINT_VERSION,
        "obs_dim": model.obs_dim,
        "hidden": list(cfg.hidden),
        "sd_max": sd_max,
        "lam": lam,
        "master_seed": master_seed,
        "train_config": asdict(cfg),
        "weights": state,
        "torch_rng_state": base64.b64encode(
            torch.get_rng_state().numpy().tobytes()).decode(),
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc) + "\n")


@dataclass
class PolicyCheckpoint:
    model: ActorCritic
    sd_max: float
    lam: float
    meta: dict

    def suggest(self, obs_vector: np.ndarray) -> float:
        """Deterministic SD level: squashed distribution mean times sd_max."""
        obs_t = torch.as_tensor(np.asarray(obs_vector), dtype=torch.float32)
        return self.model.act_mean(obs_t) * self.sd_max

    def sample(self, obs_vector: np.ndarray, gen: torch.Generator) -> float:
        obs_t = torch.as_tensor(np.asarray(obs_vector), dtype=torch.float32)
        z, _, _ = self.model.act(obs_t, gen)
        return float(squash(z)) * self.sd_max


def load_checkpoint(path: str | Path) -> PolicyCheckpoint:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    model = ActorCritic(obs_dim=doc["obs_dim"], hidden=tuple(doc["hidden"]))
    state = {k: torch.as_tensor(np.asarray(v, dtype=np.float32))
             for k, v in doc["weights"].items()}
    model.load_state_dict(state)
    model.eval()
    meta = {k: doc[k] for k in ("master_seed", "train_config") if k in doc}
    meta.update(doc.get("extra", {}))
    return PolicyCheckpoint(model=model, sd_max=float(doc["sd_max"]),
                            lam=float(doc["lam"]), meta=meta)
