"""Decentralised discrete policies and the Gumbel-Softmax relaxation."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from maac.numcore import (
    DimensionError,
    Linear,
    ParamTensor,
    entropy,
    leaky_relu,
    leaky_relu_grad,
    log_softmax,
    one_hot,
    softmax,
    softmax_backward,
)


class PolicyNet:
    """obs -> hidden (leaky ReLU) -> action logits."""

    def __init__(self, rng: np.random.Generator, obs_dim: int, n_actions: int, hidden: int = 128, name: str = "pi"):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.l1 = Linear(rng, obs_dim, hidden, f"{name}.l1")
        self.l2 = Linear(rng, hidden, n_actions, f"{name}.l2")

    def params(self) -> list[ParamTensor]:
        return self.l1.params() + self.l2.params()

    def logits(self, obs: np.ndarray) -> tuple[np.ndarray, tuple]:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if obs.shape[1] != self.obs_dim:
            raise DimensionError(f"policy expects observations of length {self.obs_dim}, got {obs.shape[1]}")
        pre = self.l1.forward(obs)
        hid = leaky_relu(pre)
        return self.l2.forward(hid), (obs, pre, hid)

    def backward(self, cache: tuple, dlogits: np.ndarray) -> None:
        obs, pre, hid = cache
        dhid = self.l2.backward(hid, dlogits)
        self.l1.backward(obs, dhid * leaky_relu_grad(pre))


class AgentPolicy:
    """Live policy network plus its slowly-tracking target copy."""

    def __init__(self, rng: np.random.Generator, obs_dim: int, n_actions: int, hidden: int = 128, name: str = "pi"):
        self.net = PolicyNet(rng, obs_dim, n_actions, hidden, name)
        self.target = copy.deepcopy(self.net)
        for p in self.target.params():
            p.name = "target." + p.name

    @property
    def n_actions(self) -> int:
        return self.net.n_actions


@dataclass
class ActionSample:
    action: np.ndarray
    log_prob: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray | None = None
    cache: tuple | None = None

    @property
    def entropy(self) -> np.ndarray:
        return entropy(self.probs)


def action_distribution(net: PolicyNet, obs: np.ndarray) -> np.ndarray:
    logits, _ = net.logits(obs)
    return softmax(logits)


def categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw, one per row of ``probs``."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])
    idx = (u[:, None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample(net: PolicyNet, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> ActionSample:
    logits, cache = net.logits(obs)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    act = probs.argmax(axis=-1) if greedy else categorical(probs, rng)
    lp = np.take_along_axis(logp, act[:, None], axis=-1)[:, 0]
    return ActionSample(act, lp, probs, logp, cache)


def gumbel_softmax(
    logits: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
    straight_through: bool = True,
    noise: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(output, relaxed_sample)``.

    With ``straight_through`` the output is the hard one-hot of the relaxed
    sample's argmax; gradients should be routed through the relaxed sample
    with :func:`gumbel_softmax_backward`.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    g = rng.gumbel(size=logits.shape) if noise is None else noise
    soft = softmax((logits + g) / temperature)
    if not straight_through:
        return soft, soft
    return one_hot(soft.argmax(axis=-1), logits.shape[-1]), soft


def gumbel_softmax_backward(soft: np.ndarray, d_out: np.ndarray, temperature: float) -> np.ndarray:
    return softmax_backward(soft, d_out) / temperature
