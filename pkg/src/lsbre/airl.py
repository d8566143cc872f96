"""Tabular multi-agent adversarial IRL.

Each agent ``i`` owns a structured discriminator::

    D_i(s, a, s') = exp(f_i) / (exp(f_i) + q_i(a_i | s)),
    f_i(s, a, s') = g_i(s, a) + gamma * h_i(s') - h_i(s)

with ``g_i`` a reward table over (state, joint action) and ``h_i`` a state
potential.  The samplers ``q_i`` are time-indexed Markov policies over the
agent's own actions and are refreshed by exact entropy-regularized best
responses, holding the other samplers fixed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit, xlogy

from .errors import GameValidationError, OptimizerAbort
from .game import (
    DemoSet,
    JointPolicy,
    MarkovGame,
    expected_return,
    joint_actions,
    joint_index,
    make_rng,
    marginal_policy,
    occupancy,
    others_axis_sum,
    sample_trajectories,
)
from .serialization import write_json
from .solver import LsbreConfig, soft_best_response

log = logging.getLogger(__name__)

MODES = ("g-only", "logit")


@dataclass(frozen=True, eq=False)
class DiscriminatorParams:
    g: np.ndarray          # (N, S, A)
    h: np.ndarray          # (N, S)
    discount: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "g", np.array(self.g, dtype=float))
        object.__setattr__(self, "h", np.array(self.h, dtype=float))
        if not (np.all(np.isfinite(self.g)) and np.all(np.isfinite(self.h))):
            raise OptimizerAbort("discriminator parameters became non-finite")

    @classmethod
    def zeros(cls, game: MarkovGame) -> "DiscriminatorParams":
        return cls(np.zeros((game.n_agents, game.n_states, game.n_joint)),
                   np.zeros((game.n_agents, game.n_states)), game.discount)

    def f(self, agent, s, a, s_next):
        return self.g[agent, s, a] + self.discount * self.h[agent, s_next] - self.h[agent, s]

    def expected_f(self, game: MarkovGame, agent: int) -> np.ndarray:
        """``E_{s' ~ P(.|s, a)} f_i(s, a, s')`` as an ``(S, A)`` table."""
        return (self.g[agent] + self.discount * game.transition @ self.h[agent]
                - self.h[agent][:, None])

    def to_dict(self) -> dict:
        return {"g": self.g, "h": self.h, "discount": self.discount}


@dataclass(frozen=True, eq=False)
class SamplerPolicy:
    """Per-agent Markov samplers; ``probs[i]`` has shape ``(T, S, |A_i|)``."""

    probs: tuple

    def __post_init__(self):
        probs = tuple(np.array(p, dtype=float) for p in self.probs)
        for i, p in enumerate(probs):
            if np.any(p <= 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-10):
                raise GameValidationError(f"sampler {i} is not a strictly positive distribution")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, game: MarkovGame) -> "SamplerPolicy":
        return cls(tuple(np.full((game.horizon, game.n_states, c), 1.0 / c)
                         for c in game.action_counts))

    def joint(self) -> JointPolicy:
        return JointPolicy.product(self.probs)

    def others(self, agent: int) -> np.ndarray:
        """Product distribution of the other samplers over ``A_-i``."""
        return marginal_policy(self.joint(), agent)[0]

    def prob(self, agent, t, s, a_own):
        return self.probs[agent][t, s, a_own]

    def replace(self, agent: int, policy: np.ndarray) -> "SamplerPolicy":
        probs = list(self.probs)
        probs[agent] = policy
        return SamplerPolicy(tuple(probs))


@dataclass(frozen=True)
class Batch:
    """Transitions ``(t, s, joint a, s')`` as parallel integer arrays."""

    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray

    def __len__(self):
        return self.s.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.t[idx], self.s[idx], self.a[idx], self.s_next[idx])

    @classmethod
    def from_arrays(cls, states, joints, next_states) -> "Batch":
        m, T = states.shape
        t = np.broadcast_to(np.arange(T), (m, T))
        return cls(t.ravel().copy(), states.ravel().copy(), joints.ravel().copy(),
                   next_states.ravel().copy())


def _own_actions(game: MarkovGame, agent: int, a) -> np.ndarray:
    return joint_actions(game.action_counts)[a, agent]


def _log_q(q_prob) -> np.ndarray:
    q_prob = np.asarray(q_prob, dtype=float)
    if np.any(q_prob <= 0):
        raise ValueError("sampler probability must be positive at every queried pair")
    return np.log(q_prob)


def discriminator_logit(d: DiscriminatorParams, agent, s, a, s_next, q_prob):
    """``log D - log(1 - D) = f - log q``."""
    return d.f(agent, s, a, s_next) - _log_q(q_prob)


def discriminator_value(d: DiscriminatorParams, agent, s, a, s_next, q_prob):
    """``exp(f) / (exp(f) + q)`` evaluated through its logit."""
    return expit(discriminator_logit(d, agent, s, a, s_next, q_prob))


def generator_reward(d: DiscriminatorParams, agent, s, a, s_next, q_prob, mode: str = "g-only"):
    if mode == "g-only":
        _log_q(q_prob)
        return d.g[agent, s, a]
    if mode == "logit":
        return discriminator_logit(d, agent, s, a, s_next, q_prob)
    raise ValueError(f"unknown reward mode {mode!r}")


def _q_slot(game, q: SamplerPolicy, agent, batch: Batch):
    return q.probs[agent][batch.t, batch.s, _own_actions(game, agent, batch.a)]


def discriminator_loss(game: MarkovGame, d: DiscriminatorParams, agent: int,
                       expert: Batch, sampled: Batch, q: SamplerPolicy):
    """Objective ``mean_E log D + mean_q log(1 - D)`` and its gradient in ``(g_i, h_i)``."""
    if len(expert) == 0 or len(sampled) == 0:
        raise ValueError("discriminator batches must be non-empty")
    z_e = discriminator_logit(d, agent, expert.s, expert.a, expert.s_next, _q_slot(game, q, agent, expert))
    z_q = discriminator_logit(d, agent, sampled.s, sampled.a, sampled.s_next, _q_slot(game, q, agent, sampled))
    loss = float(log_expit(z_e).mean() + log_expit(-z_q).mean())
    # d loss / d z: (1 - D) on expert pairs, -D on sampler pairs
    w_e = expit(-z_e) / len(expert)
    w_q = -expit(z_q) / len(sampled)
    S, A = game.n_states, game.n_joint
    grad_g = np.zeros(S * A)
    grad_h = np.zeros(S)
    for b, w in ((expert, w_e), (sampled, w_q)):
        grad_g += np.bincount(b.s * A + b.a, weights=w, minlength=S * A)
        grad_h += d.discount * np.bincount(b.s_next, weights=w, minlength=S)
        grad_h -= np.bincount(b.s, weights=w, minlength=S)
    return loss, grad_g.reshape(S, A), grad_h


def sampler_objective(game: MarkovGame, d: DiscriminatorParams, q: SamplerPolicy, agent: int) -> float:
    """Exact ``E_q[sum_t f_i(s, a, s') - log q_i(a_i | s)]``."""
    occ = occupancy(game, q.joint())
    ef = d.expected_f(game, agent)
    own = others_axis_sum(occ, game.action_counts, agent)
    return float(np.einsum("tsa,sa->", occ, ef) - xlogy(own, q.probs[agent]).sum())


def update_samplers(game: MarkovGame, d: DiscriminatorParams, q: SamplerPolicy,
                    mode: str = "g-only", cfg: LsbreConfig = LsbreConfig()) -> SamplerPolicy:
    """Sequential exact soft best responses of each sampler.

    ``g-only`` best-responds to ``g_i``.  ``logit`` best-responds to
    ``E_{s'} f_i``; together with the entropy term this maximizes
    ``E_q[f_i - log q_i]``, the expectation of ``log D - log(1 - D)``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown reward mode {mode!r}")
    for i in range(game.n_agents):
        reward = d.g[i] if mode == "g-only" else d.expected_f(game, i)
        policy, _ = soft_best_response(game, q.others(i), reward, i, cfg)
        q = q.replace(i, policy)
    return q


@dataclass(frozen=True)
class AirlConfig:
    iterations: int = 100
    sampler_episodes: int = 200
    batch_size: int | None = None
    disc_steps: int = 5
    step_size: float = 2.0
    mode: str = "g-only"
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class TrainState:
    iteration: int
    disc: DiscriminatorParams
    samplers: SamplerPolicy
    seed: int
    loss_trace: list = field(default_factory=list)
    return_trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "seed": self.seed,
                "discriminator": self.disc.to_dict(),
                "samplers": [p for p in self.samplers.probs],
                "loss_trace": self.loss_trace, "return_trace": self.return_trace}

    def learned_rewards(self) -> np.ndarray:
        return self.disc.g.copy()


def expert_batch(game: MarkovGame, demos: DemoSet, rng) -> Batch:
    """Expert transitions; the state after the last step is one extra draw."""
    demos.check_against(game)
    joints = demos.joint(game.action_counts)
    nxt = np.empty_like(demos.states)
    nxt[:, :-1] = demos.states[:, 1:]
    p = game.transition[demos.states[:, -1], joints[:, -1]]
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(demos))
    nxt[:, -1] = np.minimum((u[:, None] >= cdf).sum(axis=1), game.n_states - 1)
    return Batch.from_arrays(demos.states, joints, nxt)


def train(game: MarkovGame, demos: DemoSet, cfg: AirlConfig = AirlConfig(),
          lsbre_cfg: LsbreConfig = LsbreConfig(), checkpoint_dir=None) -> TrainState:
    """Alternate discriminator ascent and sampler best responses."""
    if cfg.mode not in MODES:
        raise ValueError(f"unknown reward mode {cfg.mode!r}")
    rng = make_rng(cfg.seed)
    expert = expert_batch(game, demos, rng)
    state = TrainState(0, DiscriminatorParams.zeros(game), SamplerPolicy.uniform(game), cfg.seed)
    for it in range(cfg.iterations):
        states, actions, nxt = sample_trajectories(game, state.samplers.joint(), cfg.sampler_episodes,
                                                   rng, with_next_state=True)
        sampled = Batch.from_arrays(states, joint_index(actions, game.action_counts), nxt)
        if cfg.batch_size:
            xe = expert.take(rng.integers(0, len(expert), cfg.batch_size))
            xq = sampled.take(rng.integers(0, len(sampled), cfg.batch_size))
        else:
            xe, xq = expert, sampled
        g, h = state.disc.g.copy(), state.disc.h.copy()
        losses = []
        for i in range(game.n_agents):
            d = state.disc
            for _ in range(cfg.disc_steps):
                loss, gg, gh = discriminator_loss(game, d, i, xe, xq, state.samplers)
                if not np.isfinite(loss):
                    raise OptimizerAbort(f"non-finite discriminator loss at iteration {it}, agent {i}")
                g[i] += cfg.step_size * gg
                h[i] += cfg.step_size * gh
                d = DiscriminatorParams(g, h, game.discount)
            losses.append(discriminator_loss(game, d, i, xe, xq, state.samplers)[0])
        state.disc = DiscriminatorParams(g, h, game.discount)
        state.samplers = update_samplers(game, state.disc, state.samplers, cfg.mode, lsbre_cfg)
        joint = state.samplers.joint()
        state.loss_trace.append(losses)
        state.return_trace.append([expected_return(game, joint, i, state.disc.g[i])
                                   for i in range(game.n_agents)])
        state.iteration = it + 1
        if checkpoint_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            write_json(Path(checkpoint_dir) / f"checkpoint_{state.iteration:06d}.json", state.to_dict())
    return state
