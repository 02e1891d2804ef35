"""Two-dimensional particle world and three cooperative tasks.

* ``ctc`` - Cooperative Treasure Collection: hunters pick up coloured
  treasure and deposit it at the bank of the same colour.
* ``rt``  - Rover-Tower: blind rovers are steered to their goals by the
  discrete messages of a randomly paired tower.
* ``cn``  - Cooperative Navigation: agents spread out to cover landmarks.

Entities are stored in one array per world. Agents always come first, in
the order documented on each task's layout.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import IO, Callable, Iterable, Sequence

import numpy as np

from maac.physics import PhysicsParams, physics_step

TASKS = ("ctc", "rt", "cn")
N_MOVES = 5
N_MESSAGES = 5
# movement action index -> unit direction (up, down, left, right, stay)
MOVE_DIRS = np.array([[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
STAY = 4


class ConfigError(ValueError):
    pass


class ActionError(ValueError):
    pass


class EpisodeOver(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    task: str = "rt"
    n_hunters: int = 6
    n_banks: int = 2
    n_treasures: int = 6
    n_rovers: int = 4
    n_cn_agents: int = 3
    episode_length: int = 100
    dt: float = 0.1
    damping: float = 0.25
    mass: float = 1.0
    force_gain: float = 5.0
    max_speed: float = 1.0
    contact_stiffness: float = 100.0
    arena: float = 1.0
    boundary_stiffness: float = 10.0
    wall: float = 1.5
    agent_radius: float = 0.05
    bank_radius: float = 0.08
    tower_radius: float = 0.08
    treasure_radius: float = 0.05
    landmark_radius: float = 0.05
    r_collect: float = 5.0
    r_deposit: float = 5.0
    r_collide: float = 1.0
    cn_collide: float = 1.0

    @property
    def physics(self) -> PhysicsParams:
        names = {f.name for f in fields(PhysicsParams)}
        return PhysicsParams(**{k: v for k, v in asdict(self).items() if k in names})

    @property
    def n_agents(self) -> int:
        if self.task == "ctc":
            return self.n_hunters + self.n_banks
        if self.task == "rt":
            return 2 * self.n_rovers
        return self.n_cn_agents

    def validate(self) -> "EnvConfig":
        if self.task not in TASKS:
            raise ConfigError(f"env.task must be one of {TASKS}, got {self.task!r}")
        if self.task == "ctc":
            if self.n_hunters < 1 or self.n_banks < 1 or self.n_treasures < 1:
                raise ConfigError("ctc needs at least one hunter, bank and treasure")
        elif self.task == "rt":
            if self.n_rovers < 1:
                raise ConfigError("rt needs at least one rover/tower pair")
        elif self.n_cn_agents < 1:
            raise ConfigError("cn needs at least one agent")
        if self.episode_length < 1:
            raise ConfigError("env.episode_length must be positive")
        for name in ("dt", "mass", "max_speed", "agent_radius", "bank_radius",
                     "tower_radius", "treasure_radius", "landmark_radius", "arena"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"env.{name} must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ConfigError("env.damping must lie in [0, 1)")
        if self.wall < self.arena:
            raise ConfigError("env.wall must be at least env.arena")
        return self

    def with_agent_count(self, n: int) -> "EnvConfig":
        """Same task scaled to ``n`` total agents."""
        if self.task == "ctc":
            hunters = n - self.n_banks
            if hunters < 1:
                raise ConfigError(f"ctc with {self.n_banks} banks needs more than {n} agents")
            return replace(self, n_hunters=hunters, n_treasures=hunters)
        if self.task == "rt":
            if n % 2 or n < 2:
                raise ConfigError(f"rt agent count must be even, got {n}")
            return replace(self, n_rovers=n // 2)
        return replace(self, n_cn_agents=n)


@dataclass(frozen=True)
class EntitySpec:
    id: int
    kind: str
    radius: float
    movable: bool
    color_tag: int = -1


@dataclass
class WorldState:
    positions: np.ndarray
    velocities: np.ndarray
    step_index: int = 0
    # rt: pairing[k] is the tower paired with rover k; goal of rover k is goal entity k
    pairing: np.ndarray | None = None
    last_message: np.ndarray | None = None
    # ctc
    treasure_alive: np.ndarray | None = None
    treasure_color: np.ndarray | None = None
    carrying: np.ndarray | None = None

    def copy(self) -> "WorldState":
        def c(x):
            return None if x is None else x.copy()

        return WorldState(
            self.positions.copy(), self.velocities.copy(), self.step_index,
            c(self.pairing), c(self.last_message), c(self.treasure_alive),
            c(self.treasure_color), c(self.carrying),
        )

    def to_json(self) -> dict:
        out = {"step_index": self.step_index, "positions": self.positions.tolist(),
               "velocities": self.velocities.tolist()}
        for name in ("pairing", "last_message", "treasure_alive", "treasure_color", "carrying"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val.tolist()
        return out


@dataclass
class StepResult:
    observations: list[np.ndarray]
    rewards: np.ndarray
    next_state: WorldState
    events: dict = field(default_factory=dict)


class ParticleEnv:
    """One world instance. Not shared between rollout workers."""

    def __init__(self, config: EnvConfig):
        self.config = config.validate()
        self.entities = _build_entities(config)
        self.radius = np.array([e.radius for e in self.entities])
        self.movable = np.array([e.movable for e in self.entities], dtype=np.uint8)
        self.collide = np.array([_collides(e.kind) for e in self.entities], dtype=np.uint8)
        self.n_agents = config.n_agents
        self.action_dims = [N_MESSAGES if e.kind == "tower" else N_MOVES
                            for e in self.entities[: self.n_agents]]
        self.physics = config.physics
        self.rng = np.random.default_rng(0)
        self.state: WorldState | None = None
        self.obs_dims = [len(o) for o in self._probe_observations()]

    # -- layout ---------------------------------------------------------
    def agent_kinds(self) -> list[str]:
        return [e.kind for e in self.entities[: self.n_agents]]

    def _probe_observations(self) -> list[np.ndarray]:
        state = self._initial_state(np.random.default_rng(0))
        return [self.observe(state, i) for i in range(self.n_agents)]

    # -- reset ----------------------------------------------------------
    def reset(self, seed: int | np.random.Generator | None = None) -> tuple[WorldState, list[np.ndarray]]:
        if isinstance(seed, np.random.Generator):
            self.rng = seed
        elif seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self._initial_state(self.rng)
        return self.state, self.observations(self.state)

    def _initial_state(self, rng: np.random.Generator) -> WorldState:
        cfg = self.config
        n = len(self.entities)
        pos = rng.uniform(-cfg.arena, cfg.arena, size=(n, 2))
        state = WorldState(positions=pos, velocities=np.zeros((n, 2)))
        if cfg.task == "rt":
            state.pairing = rng.permutation(cfg.n_rovers)
            state.last_message = np.full(cfg.n_rovers, -1, dtype=np.int64)
        elif cfg.task == "ctc":
            state.treasure_alive = np.ones(cfg.n_treasures, dtype=bool)
            state.treasure_color = rng.integers(0, cfg.n_banks, size=cfg.n_treasures)
            state.carrying = np.full(cfg.n_hunters, -1, dtype=np.int64)
        return state

    # -- dynamics -------------------------------------------------------
    def action_forces(self, joint_action: Sequence[int]) -> np.ndarray:
        if len(joint_action) != self.n_agents:
            raise ActionError(f"expected {self.n_agents} actions, got {len(joint_action)}")
        force = np.zeros((len(self.entities), 2))
        for i, a in enumerate(joint_action):
            a = int(a)
            if not 0 <= a < self.action_dims[i]:
                raise ActionError(f"agent {i}: action {a} outside [0, {self.action_dims[i]})")
            if self.entities[i].kind != "tower":
                force[i] = MOVE_DIRS[a] * self.config.force_gain
        return force

    def step(self, joint_action: Sequence[int], state: WorldState | None = None) -> StepResult:
        state = self.state if state is None else state
        if state is None:
            raise EpisodeOver("step() called before reset()")
        if state.step_index >= self.config.episode_length:
            raise EpisodeOver(f"episode finished after {self.config.episode_length} steps")
        force = self.action_forces(joint_action)
        nxt = state.copy()
        nxt.positions, nxt.velocities = physics_step(
            state.positions, state.velocities, force, self.radius,
            self.movable, self.collide, self.physics,
        )
        nxt.step_index = state.step_index + 1
        if self.config.task == "rt":
            # tower messages become visible to rovers in the next observation
            tower_of = nxt.pairing
            k = self.config.n_rovers
            nxt.last_message = np.array([int(joint_action[k + tower_of[r]]) for r in range(k)], dtype=np.int64)
        rewards, events = self.reward(nxt, joint_action)
        self.state = nxt
        return StepResult(self.observations(nxt), rewards, nxt, events)

    # -- rewards --------------------------------------------------------
    def reward(self, state: WorldState, joint_action: Sequence[int] | None = None) -> tuple[np.ndarray, dict]:
        """Per-agent rewards for arriving in ``state``.

        CTC bookkeeping (collections, deposits, respawns) is applied to
        ``state`` in place.
        """
        task = self.config.task
        if task == "rt":
            return self._reward_rt(state), {}
        if task == "cn":
            return self._reward_cn(state), {}
        return self._reward_ctc(state)

    def _reward_rt(self, state: WorldState) -> np.ndarray:
        k = self.config.n_rovers
        rew = np.zeros(2 * k)
        for r in range(k):
            d = -float(np.linalg.norm(state.positions[r] - state.positions[2 * k + r]))
            rew[r] = d
            rew[k + state.pairing[r]] = d
        return rew

    def _reward_cn(self, state: WorldState) -> np.ndarray:
        m = self.config.n_cn_agents
        agents = state.positions[:m]
        marks = state.positions[m:]
        dists = np.linalg.norm(marks[:, None, :] - agents[None, :, :], axis=-1)
        shared = -float(dists.min(axis=1).sum())
        rew = np.full(m, shared)
        reach = 2 * self.config.agent_radius
        for a in range(m):
            for b in range(a + 1, m):
                if np.linalg.norm(agents[a] - agents[b]) < reach:
                    rew[a] -= self.config.cn_collide
                    rew[b] -= self.config.cn_collide
        return rew

    def _reward_ctc(self, state: WorldState) -> tuple[np.ndarray, dict]:
        cfg = self.config
        h, b = cfg.n_hunters, cfg.n_banks
        pos = state.positions
        rew = np.zeros(h + b)
        events = {"collisions": 0, "collections": 0, "deposits": 0}
        reach = 2 * cfg.agent_radius
        for i in range(h):
            for j in range(i + 1, h):
                if np.linalg.norm(pos[i] - pos[j]) < reach:
                    rew[i] -= cfg.r_collide
                    rew[j] -= cfg.r_collide
                    events["collisions"] += 1
        for i in range(h):
            c = state.carrying[i]
            if c >= 0 and np.linalg.norm(pos[i] - pos[h + c]) < cfg.agent_radius + cfg.bank_radius:
                state.carrying[i] = -1
                rew += cfg.r_deposit
                events["deposits"] += 1
        t0 = h + b
        for i in range(h):
            if state.carrying[i] >= 0:
                continue
            for t in range(cfg.n_treasures):
                if np.linalg.norm(pos[i] - pos[t0 + t]) < cfg.agent_radius + cfg.treasure_radius:
                    state.carrying[i] = state.treasure_color[t]
                    pos[t0 + t] = self.rng.uniform(-cfg.arena, cfg.arena, size=2)
                    state.treasure_color[t] = self.rng.integers(0, b)
                    state.treasure_alive[t] = True
                    rew[:h] += cfg.r_collect
                    events["collections"] += 1
                    break
        return rew, events

    # -- observations ---------------------------------------------------
    def observations(self, state: WorldState) -> list[np.ndarray]:
        return [self.observe(state, i) for i in range(self.n_agents)]

    def observe(self, state: WorldState, agent: int) -> np.ndarray:
        if not 0 <= agent < self.n_agents:
            raise IndexError(f"agent index {agent} out of range")
        task = self.config.task
        if task == "rt":
            return self._observe_rt(state, agent)
        if task == "cn":
            return self._observe_cn(state, agent)
        return self._observe_ctc(state, agent)

    def _observe_rt(self, state: WorldState, agent: int) -> np.ndarray:
        k = self.config.n_rovers
        pos = state.positions
        if agent < k:
            msg = np.zeros(N_MESSAGES)
            if state.last_message[agent] >= 0:
                msg[state.last_message[agent]] = 1.0
            return np.concatenate([state.velocities[agent], msg])
        tower = agent - k
        rover = int(np.flatnonzero(state.pairing == tower)[0])
        here = pos[agent]
        return np.concatenate([pos[rover] - here, pos[2 * k + rover] - here])

    def _observe_cn(self, state: WorldState, agent: int) -> np.ndarray:
        m = self.config.n_cn_agents
        pos = state.positions
        here = pos[agent]
        others = [pos[j] - here for j in range(m) if j != agent]
        marks = [pos[m + l] - here for l in range(m)]
        return np.concatenate([here, state.velocities[agent], *marks, *others])

    def _observe_ctc(self, state: WorldState, agent: int) -> np.ndarray:
        cfg = self.config
        h, b = cfg.n_hunters, cfg.n_banks
        n = h + b
        pos = state.positions
        here = pos[agent]
        tag = np.zeros(b)
        if agent < h:
            if state.carrying[agent] >= 0:
                tag[state.carrying[agent]] = 1.0
        else:
            tag[agent - h] = 1.0
        parts = [here, state.velocities[agent], tag]
        parts += [pos[j] - here for j in range(n) if j != agent]
        for t in range(cfg.n_treasures):
            color = np.zeros(b)
            color[state.treasure_color[t]] = 1.0
            parts += [pos[n + t] - here, color]
        return np.concatenate(parts)

    def pair_reward_bounds(self) -> tuple[float, float]:
        """Analytic range of one rover-tower pair's per-step reward.

        Goals lie in the arena and rovers can never leave the outer wall, so
        the worst distance is the diagonal between the two squares' corners.
        """
        cfg = self.config
        return -float(np.sqrt(2.0) * (cfg.arena + cfg.wall)), 0.0


def _collides(kind: str) -> bool:
    return kind in ("hunter", "bank", "rover", "generic-agent")


def _build_entities(cfg: EnvConfig) -> list[EntitySpec]:
    ents: list[EntitySpec] = []

    def add(kind, radius, movable, tag=-1):
        ents.append(EntitySpec(len(ents), kind, radius, movable, tag))

    if cfg.task == "ctc":
        for _ in range(cfg.n_hunters):
            add("hunter", cfg.agent_radius, True)
        for b in range(cfg.n_banks):
            add("bank", cfg.bank_radius, True, b)
        for _ in range(cfg.n_treasures):
            add("treasure", cfg.treasure_radius, False)
    elif cfg.task == "rt":
        for r in range(cfg.n_rovers):
            add("rover", cfg.agent_radius, True, r)
        for _ in range(cfg.n_rovers):
            add("tower", cfg.tower_radius, False)
        for r in range(cfg.n_rovers):
            add("landmark", cfg.landmark_radius, False, r)
    else:
        for _ in range(cfg.n_cn_agents):
            add("generic-agent", cfg.agent_radius, True)
        for _ in range(cfg.n_cn_agents):
            add("landmark", cfg.landmark_radius, False)
    return ents


def dump_trajectory(
    env: ParticleEnv,
    actions: Iterable[Sequence[int]] | Callable[[list[np.ndarray]], Sequence[int]],
    seed: int,
    out: IO[str],
) -> None:
    """Write one JSON line per step: state before the step, actions, rewards.

    ``actions`` is either a sequence of joint actions or a callable mapping the
    current observations to a joint action, in which case a full episode runs.
    """
    state, obs = env.reset(seed)
    if callable(actions):
        policy = actions
        steps: Iterable = range(env.config.episode_length)
    else:
        policy = None
        steps = actions
    for item in steps:
        joint = policy(obs) if policy is not None else item
        before = state.to_json()
        res = env.step(joint)
        out.write(json.dumps({"state": before, "actions": [int(a) for a in joint],
                              "rewards": res.rewards.tolist()}) + "\n")
        state, obs = res.next_state, res.observations
