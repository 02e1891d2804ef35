"""Centralised critics.

Every critic maps the joint observation and the other agents' actions to a
vector of values, one per action of the evaluated agent, so that the
counterfactual baseline is a single dot product with that agent's policy.

* :class:`AttentionCritic` - per-agent encoders and heads with query/key/value
  maps shared across agents; ``uniform=True`` gives the fixed 1/(N-1)
  attention ablation.
* :class:`ConcatCritic` - one three-layer network per agent over all
  observations and other agents' actions (``local=True`` restricts it to the
  agent's own observation, for independent learners).
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from maac.numcore import (
    DimensionError,
    Linear,
    ParamTensor,
    entropy,
    init_uniform,
    leaky_relu,
    leaky_relu_grad,
)


class ContractError(ValueError):
    pass


@dataclass
class AttentionTrace:
    """``weights[h]`` has shape (batch, N, N); row i holds agent i's weights
    over the other agents, with a zero on the diagonal."""

    weights: list[np.ndarray]

    def for_agent(self, i: int, head: int) -> np.ndarray:
        w = self.weights[head][:, i, :]
        return np.delete(w, i, axis=-1)

    def entropies(self) -> np.ndarray:
        """Mean entropy per (agent, head) over the batch."""
        n = self.weights[0].shape[1]
        out = np.zeros((n, len(self.weights)))
        for h in range(len(self.weights)):
            for i in range(n):
                out[i, h] = float(np.mean(entropy(self.for_agent(i, h))))
        return out


def _check_inputs(obs, acts, obs_dims, action_dims, agents):
    n = len(obs_dims)
    if len(obs) != n or len(acts) != n:
        raise ContractError(f"expected inputs for {n} agents")
    for j in range(n):
        o = obs[j]
        if o.ndim != 2 or o.shape[1] != obs_dims[j]:
            raise DimensionError(f"agent {j}: observation width {o.shape[-1]} != {obs_dims[j]}")
    for i in agents:
        for j in range(n):
            if j != i and acts[j] is None:
                raise ContractError(f"critic for agent {i} needs the action of agent {j}")
    for j in range(n):
        if acts[j] is not None and acts[j].shape[-1] != action_dims[j]:
            raise DimensionError(f"agent {j}: action width {acts[j].shape[-1]} != {action_dims[j]}")


def attention_weights(W_q: np.ndarray, W_k: np.ndarray, e_i: np.ndarray, e_others: np.ndarray) -> np.ndarray:
    """Softmax over the other agents of scaled query-key similarity.

    ``e_i`` is (d,), ``e_others`` is (N-1, d). Returns (N-1,) weights; an
    empty array when there are no other agents.
    """
    e_others = np.atleast_2d(e_others)
    if e_others.shape[0] == 0:
        return np.zeros(0)
    dk = W_q.shape[1]
    logits = (e_others @ W_k) @ (e_i @ W_q) / math.sqrt(dk)
    z = np.exp(logits - logits.max())
    return z / z.sum()


def contribution(W_v: np.ndarray, alpha: np.ndarray, e_others: np.ndarray) -> np.ndarray:
    """Attention-weighted sum of the other agents' values for one head."""
    if len(alpha) == 0:
        return np.zeros(W_v.shape[1])
    return alpha @ leaky_relu(np.atleast_2d(e_others) @ W_v)


class Critic:
    """Shared plumbing: parameter listing and target copies."""

    obs_dims: list[int]
    action_dims: list[int]

    def params(self) -> list[ParamTensor]:
        raise NotImplementedError

    def clone_as_target(self) -> "Critic":
        tgt = copy.deepcopy(self)
        for p in tgt.params():
            p.name = "target." + p.name
            p.zero_grad()
        return tgt

    def input_widths(self) -> list[int]:
        raise NotImplementedError


class AttentionCritic(Critic):
    def __init__(
        self,
        rng: np.random.Generator,
        obs_dims: Sequence[int],
        action_dims: Sequence[int],
        hidden: int = 128,
        heads: int = 4,
        uniform: bool = False,
    ):
        if hidden % heads:
            raise DimensionError(f"hidden width {hidden} is not divisible by {heads} heads")
        self.obs_dims = list(obs_dims)
        self.action_dims = list(action_dims)
        self.n_agents = len(obs_dims)
        self.hidden = hidden
        self.heads = heads
        self.dk = hidden // heads
        self.uniform = uniform
        d, dk, n = hidden, self.dk, self.n_agents
        self.enc_sa = [Linear(rng, od + ad, d, f"critic.enc_sa{i}")
                       for i, (od, ad) in enumerate(zip(obs_dims, action_dims))]
        self.enc_obs = [Linear(rng, od, d, f"critic.enc_obs{i}") for i, od in enumerate(obs_dims)]
        self.W_q = [init_uniform(rng, d, dk, f"critic.W_q{h}") for h in range(heads)]
        self.W_k = [init_uniform(rng, d, dk, f"critic.W_k{h}") for h in range(heads)]
        self.W_v = [init_uniform(rng, d, dk, f"critic.W_v{h}") for h in range(heads)]
        self.f1 = [Linear(rng, d + heads * dk, hidden, f"critic.f1_{i}") for i in range(n)]
        self.f2 = [Linear(rng, hidden, ad, f"critic.f2_{i}") for i, ad in enumerate(action_dims)]

    def params(self) -> list[ParamTensor]:
        out: list[ParamTensor] = []
        for layer in self.enc_sa + self.enc_obs:
            out += layer.params()
        out += self.W_q + self.W_k + self.W_v
        for layer in self.f1 + self.f2:
            out += layer.params()
        return out

    def shared_params(self) -> list[ParamTensor]:
        return self.W_q + self.W_k + self.W_v

    def encode(self, i: int, obs_i: np.ndarray, act_i: np.ndarray | None = None) -> np.ndarray:
        """Embedding of agent ``i``: state-action encoder when the one-hot action
        is given, observation-only encoder otherwise."""
        obs_i = np.atleast_2d(obs_i)
        if act_i is None:
            return leaky_relu(self.enc_obs[i].forward(obs_i))
        return leaky_relu(self.enc_sa[i].forward(np.concatenate([obs_i, np.atleast_2d(act_i)], axis=1)))

    def input_widths(self) -> list[int]:
        """Width of each agent's head input: own embedding plus attended values."""
        return [layer.n_in for layer in self.f1]

    def encoder_widths(self) -> list[int]:
        """Width of each agent's state-action encoder input (own terms only)."""
        return [layer.n_in for layer in self.enc_sa]

    # -- forward --------------------------------------------------------
    def forward(self, obs, acts, agents: Sequence[int] | None = None):
        """Per-action values for every agent in ``agents`` (all by default).

        ``obs[j]`` is (batch, obs_dim_j); ``acts[j]`` is a one-hot (batch, |A_j|)
        array or None when no agent other than j itself is evaluated.
        Returns ``(qs, cache)`` with ``qs[i]`` of shape (batch, |A_i|), or None
        for agents not requested.
        """
        n = self.n_agents
        agents = list(range(n)) if agents is None else list(agents)
        obs = [np.atleast_2d(np.asarray(o, dtype=np.float64)) for o in obs]
        _check_inputs(obs, acts, self.obs_dims, self.action_dims, agents)
        batch = obs[0].shape[0]
        acts = [np.zeros((batch, self.action_dims[j])) if a is None else np.asarray(a, dtype=np.float64)
                for j, a in enumerate(acts)]

        sa_in = [np.concatenate([obs[j], acts[j]], axis=1) for j in range(n)]
        sa_pre = [self.enc_sa[j].forward(sa_in[j]) for j in range(n)]
        e_sa = np.stack([leaky_relu(p) for p in sa_pre], axis=1)  # (B, N, d)
        obs_pre = [self.enc_obs[i].forward(obs[i]) if i in agents else None for i in range(n)]
        e_obs = {i: leaky_relu(obs_pre[i]) for i in agents}

        scale = 1.0 / math.sqrt(self.dk)
        mask = ~np.eye(n, dtype=bool)
        head_cache = []
        xs = []
        weights = []
        e_q = np.zeros((batch, n, self.hidden))
        for i in agents:
            e_q[:, i] = e_obs[i]
        for h in range(self.heads):
            v_pre = e_sa @ self.W_v[h].value  # (B, N, dk)
            v = leaky_relu(v_pre)
            if n == 1:
                alpha = np.zeros((batch, 1, 1))
                keys = query = None
            elif self.uniform:
                alpha = np.broadcast_to(mask / (n - 1), (batch, n, n)).copy()
                keys = query = None
            else:
                keys = e_sa @ self.W_k[h].value
                query = e_q @ self.W_q[h].value
                logits = query @ np.swapaxes(keys, 1, 2) * scale
                logits = np.where(mask, logits, -np.inf)
                logits = logits - logits.max(axis=-1, keepdims=True)
                ex = np.where(mask, np.exp(logits), 0.0)
                alpha = ex / ex.sum(axis=-1, keepdims=True)
            x = alpha @ v
            xs.append(x)
            weights.append(alpha)
            head_cache.append((v_pre, v, keys, query, alpha))

        qs: list[np.ndarray | None] = [None] * n
        f_cache = {}
        for i in agents:
            h_in = np.concatenate([e_obs[i]] + [x[:, i] for x in xs], axis=1)
            f1_pre = self.f1[i].forward(h_in)
            f1_out = leaky_relu(f1_pre)
            qs[i] = self.f2[i].forward(f1_out)
            f_cache[i] = (h_in, f1_pre, f1_out)

        cache = dict(agents=agents, obs=obs, sa_in=sa_in, sa_pre=sa_pre, e_sa=e_sa,
                     obs_pre=obs_pre, e_q=e_q, heads=head_cache, f=f_cache)
        return qs, cache, AttentionTrace(weights)

    def q_values(self, i: int, obs, acts) -> tuple[np.ndarray, AttentionTrace]:
        """Values of every action of agent ``i`` given the others' actions."""
        qs, _, trace = self.forward(obs, acts, agents=[i])
        return qs[i], trace

    # -- backward -------------------------------------------------------
    def backward(self, cache, dqs) -> None:
        """Accumulate parameter gradients for upstream ``dqs[i]`` (or None)."""
        n = self.n_agents
        agents = cache["agents"]
        batch = cache["e_sa"].shape[0]
        d, dk = self.hidden, self.dk
        de_q = np.zeros((batch, n, d))
        dxs = [np.zeros((batch, n, dk)) for _ in range(self.heads)]
        for i in agents:
            if dqs[i] is None:
                continue
            h_in, f1_pre, f1_out = cache["f"][i]
            df1 = self.f2[i].backward(f1_out, dqs[i])
            dh_in = self.f1[i].backward(h_in, df1 * leaky_relu_grad(f1_pre))
            de_q[:, i] += dh_in[:, :d]
            for h in range(self.heads):
                dxs[h][:, i] = dh_in[:, d + h * dk: d + (h + 1) * dk]

        e_sa = cache["e_sa"]
        e_q = cache["e_q"]
        de_sa = np.zeros_like(e_sa)
        scale = 1.0 / math.sqrt(dk)
        flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
        for h in range(self.heads):
            v_pre, v, keys, query, alpha = cache["heads"][h]
            dx = dxs[h]
            dv = np.swapaxes(alpha, 1, 2) @ dx
            if keys is not None:
                dalpha = dx @ np.swapaxes(v, 1, 2)
                dlogits = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True)) * scale
                dquery = dlogits @ keys
                dkeys = np.swapaxes(dlogits, 1, 2) @ query
                self.W_q[h].grad += flat(e_q).T @ flat(dquery)
                self.W_k[h].grad += flat(e_sa).T @ flat(dkeys)
                de_q += dquery @ self.W_q[h].value.T
                de_sa += dkeys @ self.W_k[h].value.T
            dv_pre = dv * leaky_relu_grad(v_pre)
            self.W_v[h].grad += flat(e_sa).T @ flat(dv_pre)
            de_sa += dv_pre @ self.W_v[h].value.T

        for j in range(n):
            self.enc_sa[j].backward(cache["sa_in"][j], de_sa[:, j] * leaky_relu_grad(cache["sa_pre"][j]))
        for i in agents:
            self.enc_obs[i].backward(cache["obs"][i], de_q[:, i] * leaky_relu_grad(cache["obs_pre"][i]))


class ConcatCritic(Critic):
    def __init__(
        self,
        rng: np.random.Generator,
        obs_dims: Sequence[int],
        action_dims: Sequence[int],
        hidden: int = 128,
        local: bool = False,
    ):
        self.obs_dims = list(obs_dims)
        self.action_dims = list(action_dims)
        self.n_agents = len(obs_dims)
        self.local = local
        self.layers = []
        for i in range(self.n_agents):
            width = self._width(i)
            self.layers.append((
                Linear(rng, width, hidden, f"critic.c{i}.l1"),
                Linear(rng, hidden, hidden, f"critic.c{i}.l2"),
                Linear(rng, hidden, action_dims[i], f"critic.c{i}.l3"),
            ))

    def _width(self, i: int) -> int:
        if self.local:
            return self.obs_dims[i]
        return sum(self.obs_dims) + sum(a for j, a in enumerate(self.action_dims) if j != i)

    def input_widths(self) -> list[int]:
        return [self._width(i) for i in range(self.n_agents)]

    def params(self) -> list[ParamTensor]:
        out: list[ParamTensor] = []
        for trio in self.layers:
            for layer in trio:
                out += layer.params()
        return out

    def _input(self, i, obs, acts):
        if self.local:
            return obs[i]
        return np.concatenate(list(obs) + [acts[j] for j in range(self.n_agents) if j != i], axis=1)

    def forward(self, obs, acts, agents: Sequence[int] | None = None):
        n = self.n_agents
        agents = list(range(n)) if agents is None else list(agents)
        obs = [np.atleast_2d(np.asarray(o, dtype=np.float64)) for o in obs]
        if self.local:
            acts = [None] * n
        _check_inputs(obs, acts, self.obs_dims, self.action_dims, [] if self.local else agents)
        qs: list[np.ndarray | None] = [None] * n
        cache = {"agents": agents}
        for i in agents:
            l1, l2, l3 = self.layers[i]
            x = self._input(i, obs, acts)
            p1 = l1.forward(x)
            h1 = leaky_relu(p1)
            p2 = l2.forward(h1)
            h2 = leaky_relu(p2)
            qs[i] = l3.forward(h2)
            cache[i] = (x, p1, h1, p2, h2)
        return qs, cache, None

    def q_values(self, i: int, obs, acts):
        qs, _, _ = self.forward(obs, acts, agents=[i])
        return qs[i], None

    def backward(self, cache, dqs) -> None:
        for i in cache["agents"]:
            if dqs[i] is None:
                continue
            l1, l2, l3 = self.layers[i]
            x, p1, h1, p2, h2 = cache[i]
            dh2 = l3.backward(h2, dqs[i])
            dh1 = l2.backward(h1, dh2 * leaky_relu_grad(p2))
            l1.backward(x, dh1 * leaky_relu_grad(p1))
