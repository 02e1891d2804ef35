"""Off-policy soft actor-critic training for N agents with centralised critics."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from maac.agents import AgentPolicy, gumbel_softmax, gumbel_softmax_backward, sample
from maac.critics import AttentionCritic, ConcatCritic, Critic
from maac.envsim import EnvConfig, ParticleEnv
from maac.numcore import DimensionError, ParamTensor, adam_step, clip_grad_norm, one_hot

ALGORITHMS = ("maac", "maac_uniform", "maddpg_sac", "ddpg")


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "maac"
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.01
    lr: float = 0.001
    batch_size: int = 1024
    buffer_capacity: int = 1_000_000
    num_envs: int = 12
    episode_length: int = 100
    steps_per_update: int = 100
    critic_updates: int = 4
    policy_updates: int = 4
    heads: int = 4
    hidden: int = 128
    grad_clip: float = 0.0
    gumbel_temperature: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.algorithm not in ALGORITHMS:
            raise TrainConfigError(f"learner.algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise TrainConfigError("learner.gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise TrainConfigError("learner.tau must lie in (0, 1]")
        if self.alpha < 0 or self.lr < 0 or self.grad_clip < 0:
            raise TrainConfigError("learner.alpha, learner.lr and learner.grad_clip must be non-negative")
        for name in ("batch_size", "buffer_capacity", "num_envs", "episode_length", "steps_per_update",
                     "critic_updates", "policy_updates", "heads", "hidden"):
            if getattr(self, name) < 1:
                raise TrainConfigError(f"learner.{name} must be positive")
        if self.hidden % self.heads:
            raise TrainConfigError("learner.hidden must be divisible by learner.heads")
        if self.gumbel_temperature <= 0:
            raise TrainConfigError("learner.gumbel_temperature must be positive")
        return self


@dataclass
class Batch:
    obs: list[np.ndarray]
    actions: np.ndarray  # (B, N) int
    rewards: np.ndarray  # (B, N)
    next_obs: list[np.ndarray]

    def __len__(self) -> int:
        return self.actions.shape[0]


class ReplayBuffer:
    """Fixed-capacity FIFO ring of joint transitions with uniform sampling."""

    def __init__(self, obs_dims: Sequence[int], capacity: int, rng: np.random.Generator):
        self.capacity = int(capacity)
        self.obs_dims = list(obs_dims)
        self.rng = rng
        self.head = 0  # next write slot
        self.size = 0
        self._alloc(min(self.capacity, 4096))

    def _alloc(self, rows: int) -> None:
        """(Re)allocate storage for ``rows`` slots, keeping existing rows."""
        def grow(a, shape, dtype=np.float64):
            out = np.zeros(shape, dtype=dtype)
            if a is not None:
                out[: a.shape[0]] = a
            return out

        n = len(self.obs_dims)
        old = getattr(self, "actions", None)
        self.obs = [grow(None if old is None else self.obs[j], (rows, d)) for j, d in enumerate(self.obs_dims)]
        self.next_obs = [grow(None if old is None else self.next_obs[j], (rows, d))
                         for j, d in enumerate(self.obs_dims)]
        self.actions = grow(old, (rows, n), np.int64)
        self.rewards = grow(getattr(self, "rewards", None), (rows, n))

    def __len__(self) -> int:
        return self.size

    def push(self, obs, actions, rewards, next_obs) -> None:
        """Append a block of transitions; ``obs[j]`` is (k, obs_dim_j)."""
        actions = np.atleast_2d(actions)
        rewards = np.atleast_2d(rewards)
        for row in range(actions.shape[0]):
            s = self.head
            if s >= self.actions.shape[0]:
                self._alloc(min(self.capacity, 2 * self.actions.shape[0]))
            for j in range(len(self.obs_dims)):
                self.obs[j][s] = obs[j][row]
                self.next_obs[j][s] = next_obs[j][row]
            self.actions[s] = actions[row]
            self.rewards[s] = rewards[row]
            self.head = (s + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def _gather(self, idx: np.ndarray) -> Batch:
        return Batch([o[idx] for o in self.obs], self.actions[idx], self.rewards[idx],
                     [o[idx] for o in self.next_obs])

    def sample(self, batch_size: int) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return self._gather(self.rng.integers(0, self.size, size=batch_size))

    def ordered(self) -> Batch:
        """Current contents, oldest first."""
        start = self.head if self.size == self.capacity else 0
        idx = (start + np.arange(self.size)) % self.capacity
        return self._gather(idx)


def soft_update(targets: Sequence[ParamTensor], live: Sequence[ParamTensor], tau: float) -> None:
    """Move each target a fraction ``tau`` of the way toward its live tensor."""
    if len(targets) != len(live):
        raise DimensionError("target and live parameter lists differ in length")
    for t, p in zip(targets, live):
        if t.value.shape != p.value.shape:
            raise DimensionError(f"{t.name}: shape {t.value.shape} != {p.value.shape}")
        t.value += tau * (p.value - t.value)


def baseline(probs: np.ndarray, q_all: np.ndarray) -> np.ndarray:
    """Expected value of the agent's own action under its policy, per row."""
    return np.sum(probs * q_all, axis=-1)


def build_critic(algorithm: str, rng, obs_dims, action_dims, hidden: int, heads: int) -> Critic:
    if algorithm == "maac":
        return AttentionCritic(rng, obs_dims, action_dims, hidden, heads)
    if algorithm == "maac_uniform":
        return AttentionCritic(rng, obs_dims, action_dims, hidden, heads, uniform=True)
    if algorithm == "maddpg_sac":
        return ConcatCritic(rng, obs_dims, action_dims, hidden)
    if algorithm == "ddpg":
        return ConcatCritic(rng, obs_dims, action_dims, hidden, local=True)
    raise TrainConfigError(f"unknown algorithm {algorithm!r}")


class Learner:
    """Owns environments, replay buffer, policies and critics for one run."""

    def __init__(self, env_config: EnvConfig, config: TrainConfig, threads: int = 1):
        self.config = config.validate()
        self.env_config = replace(env_config, episode_length=config.episode_length).validate()
        self.threads = max(1, int(threads))
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        init_rng = np.random.default_rng(seeds[0])
        self.act_rng = np.random.default_rng(seeds[1])
        env_seeds = seeds[2].spawn(config.num_envs)
        self.envs = [ParticleEnv(self.env_config) for _ in range(config.num_envs)]
        for env, s in zip(self.envs, env_seeds):
            env.rng = np.random.default_rng(s)
        probe = self.envs[0]
        self.obs_dims = probe.obs_dims
        self.action_dims = probe.action_dims
        self.n_agents = probe.n_agents
        self.policies = [AgentPolicy(init_rng, od, ad, config.hidden, f"pi{i}")
                         for i, (od, ad) in enumerate(zip(self.obs_dims, self.action_dims))]
        self.critic = build_critic(config.algorithm, init_rng, self.obs_dims, self.action_dims,
                                   config.hidden, config.heads)
        self.target_critic = self.critic.clone_as_target()
        self.buffer = ReplayBuffer(self.obs_dims, config.buffer_capacity, np.random.default_rng(seeds[3]))
        self.t_update = 0
        self.episodes_done = 0
        self.env_steps = 0
        self.n_updates = 0
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    # -- parameter views --------------------------------------------------
    def policy_params(self, target: bool = False) -> list[ParamTensor]:
        out: list[ParamTensor] = []
        for pol in self.policies:
            out += (pol.target if target else pol.net).params()
        return out

    def named_tensors(self) -> dict[str, ParamTensor]:
        tensors = self.critic.params() + self.target_critic.params()
        tensors += self.policy_params() + self.policy_params(target=True)
        return {p.name: p for p in tensors}

    def _adam(self, params: Sequence[ParamTensor]) -> None:
        c = self.config
        for p in params:
            adam_step(p, c.lr, c.adam_beta1, c.adam_beta2, c.adam_eps)

    # -- updates ----------------------------------------------------------
    def critic_targets(self, batch: Batch) -> list[np.ndarray]:
        """Bootstrapped regression targets, treated as constants."""
        c = self.config
        next_acts, next_logp = [], []
        for j, pol in enumerate(self.policies):
            s = sample(pol.target, batch.next_obs[j], self.act_rng)
            next_acts.append(s.action)
            next_logp.append(s.log_prob)
        onehots = [one_hot(a, self.action_dims[j]) for j, a in enumerate(next_acts)]
        q_next, _, _ = self.target_critic.forward(batch.next_obs, onehots)
        ys = []
        for j in range(self.n_agents):
            q = np.take_along_axis(q_next[j], next_acts[j][:, None], axis=-1)[:, 0]
            soft = q if c.algorithm == "ddpg" else q - c.alpha * next_logp[j]
            ys.append(batch.rewards[:, j] + c.gamma * soft)
        return ys

    def critic_loss_and_grad(self, batch: Batch, ys: Sequence[np.ndarray]):
        """Joint squared-error loss; accumulates gradients into the live critic."""
        acts = [one_hot(batch.actions[:, j], self.action_dims[j]) for j in range(self.n_agents)]
        qs, cache, trace = self.critic.forward(batch.obs, acts)
        m = len(batch)
        loss = 0.0
        dqs = []
        for j in range(self.n_agents):
            q = np.take_along_axis(qs[j], batch.actions[:, j:j + 1], axis=-1)[:, 0]
            err = q - ys[j]
            loss += float(np.mean(err * err))
            dq = np.zeros_like(qs[j])
            np.put_along_axis(dq, batch.actions[:, j:j + 1], (2.0 / m * err)[:, None], axis=-1)
            dqs.append(dq)
        self.critic.backward(cache, dqs)
        return loss, trace

    def critic_update(self, batch: Batch) -> float:
        if len(batch) == 0:
            raise ValueError("critic update needs a non-empty batch")
        ys = self.critic_targets(batch)
        params = self.critic.params()
        for p in params:
            p.zero_grad()
        loss, _ = self.critic_loss_and_grad(batch, ys)
        if self.config.grad_clip > 0:
            clip_grad_norm(params, self.config.grad_clip)
        self._adam(params)
        return loss

    def policy_loss_and_grad(self, obs: Sequence[np.ndarray], samples=None):
        """Surrogate loss per agent whose gradient is the entropy-regularised
        policy gradient with the counterfactual baseline.

        ``samples`` (optional) freezes the sampled actions; by default all
        agents' actions are drawn from the current policies.
        """
        c = self.config
        if c.algorithm == "ddpg":
            return self._ddpg_policy_loss_and_grad(obs, samples)
        if samples is None:
            samples = [sample(pol.net, obs[j], self.act_rng) for j, pol in enumerate(self.policies)]
        acts = [one_hot(s.action, self.action_dims[j]) for j, s in enumerate(samples)]
        qs, _, trace = self.critic.forward(obs, acts)
        losses = []
        m = obs[0].shape[0]
        for i, (pol, s) in enumerate(zip(self.policies, samples)):
            q = np.take_along_axis(qs[i], s.action[:, None], axis=-1)[:, 0]
            adv = q - baseline(s.probs, qs[i])
            weight = c.alpha * s.log_prob - adv  # held constant
            losses.append(float(np.mean(s.log_prob * weight)))
            dlogits = weight[:, None] * (one_hot(s.action, self.action_dims[i]) - s.probs) / m
            pol.net.backward(s.cache, dlogits)
        return losses, trace

    def _ddpg_policy_loss_and_grad(self, obs, samples=None):
        c = self.config
        losses = []
        m = obs[0].shape[0]
        for i, pol in enumerate(self.policies):
            logits, cache = pol.net.logits(obs[i])
            noise = None if samples is None else samples[i]
            hard, soft = gumbel_softmax(logits, c.gumbel_temperature, self.act_rng, True, noise)
            q_all, _ = self.critic.q_values(i, obs, [None] * self.n_agents)
            losses.append(-float(np.mean(np.sum(hard * q_all, axis=-1))))
            dlogits = gumbel_softmax_backward(soft, -q_all / m, c.gumbel_temperature)
            pol.net.backward(cache, dlogits)
        return losses, None

    def policy_update(self, obs: Sequence[np.ndarray]):
        for p in self.policy_params():
            p.zero_grad()
        losses, trace = self.policy_loss_and_grad(obs)
        for pol in self.policies:
            params = pol.net.params()
            if self.config.grad_clip > 0:
                clip_grad_norm(params, self.config.grad_clip)
            self._adam(params)
        return losses, trace

    def update_targets(self) -> None:
        tau = self.config.tau
        soft_update(self.target_critic.params(), self.critic.params(), tau)
        soft_update(self.policy_params(target=True), self.policy_params(), tau)

    def update_block(self) -> dict:
        c = self.config
        closs = [self.critic_update(self.buffer.sample(c.batch_size)) for _ in range(c.critic_updates)]
        plosses, trace = [], None
        for _ in range(c.policy_updates):
            l, trace = self.policy_update(self.buffer.sample(c.batch_size).obs)
            plosses.append(l)
        self.update_targets()
        self.n_updates += 1
        return {
            "critic_loss": float(np.mean(closs)),
            "policy_loss": np.mean(plosses, axis=0).tolist(),
            "attention_entropy": None if trace is None else trace.entropies().tolist(),
        }

    # -- rollouts -----------------------------------------------------------
    def act(self, obs_by_env: Sequence[Sequence[np.ndarray]], greedy: bool = False) -> np.ndarray:
        """Joint actions (E, N) for a batch of environments."""
        acts = np.zeros((len(obs_by_env), self.n_agents), dtype=np.int64)
        for j, pol in enumerate(self.policies):
            stacked = np.stack([o[j] for o in obs_by_env])
            acts[:, j] = sample(pol.net, stacked, self.act_rng, greedy=greedy).action
        return acts

    def _step_envs(self, actions: np.ndarray):
        if self._pool is None:
            return [env.step(a) for env, a in zip(self.envs, actions)]
        return list(self._pool.map(lambda pair: pair[0].step(pair[1]), zip(self.envs, actions)))

    def run_iteration(self) -> list[dict]:
        """One batch of parallel episodes; returns one metrics record per episode."""
        c = self.config
        t0 = time.perf_counter()
        obs = [env.reset()[1] for env in self.envs]
        ep_reward = np.zeros((len(self.envs), self.n_agents))
        update_stats = []
        for _ in range(c.episode_length):
            actions = self.act(obs)
            results = self._step_envs(actions)
            next_obs = [r.observations for r in results]
            rewards = np.stack([r.rewards for r in results])
            self.buffer.push(
                [np.stack([o[j] for o in obs]) for j in range(self.n_agents)],
                actions, rewards,
                [np.stack([o[j] for o in next_obs]) for j in range(self.n_agents)],
            )
            ep_reward += rewards
            obs = next_obs
            self.env_steps += len(self.envs)
            self.t_update += len(self.envs)
            if self.t_update >= c.steps_per_update and len(self.buffer) >= c.batch_size:
                update_stats.append(self.update_block())
                self.t_update = 0
        elapsed = time.perf_counter() - t0
        records = []
        summary = _summarise(update_stats, self.n_agents)
        for e in range(len(self.envs)):
            per_agent = (ep_reward[e] / c.episode_length).tolist()
            records.append({
                "episode": self.episodes_done,
                "agent_rewards": per_agent,
                "team_reward": float(np.mean(per_agent)),
                **summary,
                "wall_clock": elapsed,
            })
            self.episodes_done += 1
        return records

    def train(self, episodes: int, callback: Callable[[list[dict]], None] | None = None) -> Iterator[dict]:
        """Run until ``episodes`` episodes have completed, yielding metrics."""
        while self.episodes_done < episodes:
            records = self.run_iteration()
            if callback is not None:
                callback(records)
            yield from records

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- state for checkpoints --------------------------------------------
    def counters(self) -> dict:
        return {
            "t_update": self.t_update,
            "episodes_done": self.episodes_done,
            "env_steps": self.env_steps,
            "n_updates": self.n_updates,
            "act_rng": self.act_rng.bit_generator.state,
            "buffer_rng": self.buffer.rng.bit_generator.state,
            "env_rngs": [env.rng.bit_generator.state for env in self.envs],
        }

    def restore_counters(self, state: dict) -> None:
        self.t_update = state["t_update"]
        self.episodes_done = state["episodes_done"]
        self.env_steps = state["env_steps"]
        self.n_updates = state["n_updates"]
        self.act_rng.bit_generator.state = state["act_rng"]
        self.buffer.rng.bit_generator.state = state["buffer_rng"]
        for env, s in zip(self.envs, state["env_rngs"]):
            env.rng.bit_generator.state = s


def _summarise(stats: list[dict], n_agents: int) -> dict:
    if not stats:
        return {"critic_loss": None, "policy_loss": None, "attention_entropy": None}
    ent = [s["attention_entropy"] for s in stats if s["attention_entropy"] is not None]
    return {
        "critic_loss": float(np.mean([s["critic_loss"] for s in stats])),
        "policy_loss": np.mean([s["policy_loss"] for s in stats], axis=0).tolist(),
        "attention_entropy": np.mean(ent, axis=0).tolist() if ent else None,
    }


def rollout_rewards(
    policies: Sequence[AgentPolicy],
    env_config: EnvConfig,
    episodes: int,
    seed: int,
    greedy: bool = False,
) -> np.ndarray:
    """Per-episode team mean reward of the given policies, without learning."""
    rng = np.random.default_rng(seed)
    env = ParticleEnv(env_config)
    env.rng = np.random.default_rng(rng.integers(2**63))
    out = np.zeros(episodes)
    for ep in range(episodes):
        _, obs = env.reset()
        total = 0.0
        for _ in range(env_config.episode_length):
            joint = [int(sample(p.net, obs[j][None], rng, greedy=greedy).action[0]) for j, p in enumerate(policies)]
            res = env.step(joint)
            total += float(res.rewards.mean())
            obs = res.observations
        out[ep] = total / env_config.episode_length
    return out
