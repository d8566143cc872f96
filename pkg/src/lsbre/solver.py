"""Logistic stochastic best response equilibrium (LSBRE) solver.

The equilibrium at step ``t`` is the stationary distribution of a
systematic-scan chain over joint actions: one sweep resamples agent 0 from
its softmax conditional, then agent 1, ..., then agent N-1.  Each coordinate
update at state ``s`` reads only the other agents' actions at ``s``, so the
chain over ``(A_1 x ... x A_N)^|S|`` splits into one small chain per state.

Soft-Q values follow the undiscounted finite-horizon recursion::

    Q_i^T(s, a) = r_i(s, a)
    Q_i^t(s, a) = r_i(s, a) + E_{s'}[ H(pi_i^{t+1}(.|s')) + E_{a' ~ pi^{t+1}(.|s')} Q_i^{t+1}(s', a') ]

where ``H`` is the entropy of agent i's marginal policy.  The game's
discount is not used here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax, xlogy

from .errors import ConvergenceError, GameValidationError
from .game import (
    JointPolicy,
    MarkovGame,
    NormalFormGame,
    expand_others,
    joint_actions,
    joint_index,
    make_rng,
    marginal_policy,
    others_axis_sum,
    occupancy,
    to_agent_axes,
    from_agent_axes,
    validate_game,
)


@dataclass(frozen=True)
class LsbreConfig:
    lam: float = 1.0
    power_iter_tol: float = 1e-12
    power_iter_max: int = 100_000

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"rationality lambda must be positive, got {self.lam}")
        if not self.power_iter_tol > 0:
            raise ValueError(f"power_iter_tol must be positive, got {self.power_iter_tol}")
        if self.power_iter_max < 1:
            raise ValueError("power_iter_max must be at least 1")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "power_iter_tol": self.power_iter_tol,
                "power_iter_max": self.power_iter_max, "sweep_order": "ascending"}


def _own_softmax(values, action_counts, agent, lam):
    """Softmax of ``lam * values`` over agent ``agent``'s own action, joint-indexed."""
    n = len(action_counts)
    axis = np.ndim(values) - 1 + agent
    y = softmax(lam * to_agent_axes(values, action_counts), axis=axis)
    return from_agent_axes(y, n)


def normal_form_conditional(game: NormalFormGame, agent: int, others, cfg: LsbreConfig = LsbreConfig()):
    """``P_i(a_i | a_-i) = softmax(lam * r_i(., a_-i))`` for a normal-form game."""
    counts = game.action_counts
    if not 0 <= agent < game.n_agents:
        raise IndexError(f"agent {agent} out of range")
    others = list(others)
    if len(others) != game.n_agents - 1:
        raise ValueError(f"expected {game.n_agents - 1} opponent actions, got {len(others)}")
    for k, a in zip([k for k in range(game.n_agents) if k != agent], others):
        if not 0 <= a < counts[k]:
            raise IndexError(f"action {a} out of range for agent {k}")
    rows = np.array([others[:agent] + [b] + others[agent:] for b in range(counts[agent])])
    vals = game.rewards[agent, joint_index(rows, counts)]
    return softmax(cfg.lam * vals)


# --------------------------------------------------------------------------
# soft-Q recursion
# --------------------------------------------------------------------------

def _time_rewards(game: MarkovGame, rewards) -> np.ndarray:
    r = game.rewards if rewards is None else np.asarray(rewards, dtype=float)
    shape = (game.n_agents, game.n_states, game.n_joint)
    if r.shape == shape:
        r = np.broadcast_to(r[:, None], (game.n_agents, game.horizon) + shape[1:])
    if r.shape != (game.n_agents, game.horizon) + shape[1:]:
        raise GameValidationError(f"rewards shape {r.shape} does not match game {shape}")
    return r


def marginal_entropies(probs_t: np.ndarray, action_counts) -> np.ndarray:
    """Entropy of each agent's marginal, ``(N, S)``, from a joint ``(S, A)``."""
    out = np.empty((len(action_counts), probs_t.shape[0]))
    for i in range(len(action_counts)):
        m = others_axis_sum(probs_t, action_counts, i)
        out[i] = -xlogy(m, m).sum(axis=-1)
    return out


def soft_q_step(game: MarkovGame, reward_t: np.ndarray, q_next=None, pi_next=None) -> np.ndarray:
    """One backward step: ``Q^t`` (shape ``(N, S, A)``) from ``Q^{t+1}`` and ``pi^{t+1}``."""
    if q_next is None:
        return np.array(reward_t, dtype=float)
    cont = marginal_entropies(pi_next, game.action_counts) + np.einsum("sa,isa->is", pi_next, q_next)
    q = reward_t + np.einsum("sap,ip->isa", game.transition, cont)
    if not np.all(np.isfinite(q)):
        raise FloatingPointError("non-finite soft-Q value in backward recursion")
    return q


def soft_q_backward(game: MarkovGame, future: JointPolicy | None = None, rewards=None) -> np.ndarray:
    """Soft-Q table ``Q[i, t, s, a]`` given the future joint policies.

    ``future`` must cover the whole horizon; its step-0 entry is never read.
    It may be ``None`` only when ``horizon == 1``.
    """
    r = _time_rewards(game, rewards)
    T = game.horizon
    if future is None and T > 1:
        raise ValueError("future policies are required when horizon > 1")
    if future is not None and future.probs.shape != (T, game.n_states, game.n_joint):
        raise GameValidationError(f"future policy shape {future.probs.shape} does not match game")
    q = np.empty_like(r, dtype=float)
    q[:, T - 1] = soft_q_step(game, r[:, T - 1])
    for t in range(T - 2, -1, -1):
        q[:, t] = soft_q_step(game, r[:, t], q[:, t + 1], future.probs[t + 1])
    return q


def lsbre_conditionals(soft_q: np.ndarray, action_counts, cfg: LsbreConfig = LsbreConfig()) -> np.ndarray:
    """``c[i, ..., a] = softmax over a_i of lam * Q[i, ..., a]`` (joint-indexed)."""
    soft_q = np.asarray(soft_q, dtype=float)
    return np.stack([_own_softmax(soft_q[i], action_counts, i, cfg.lam)
                     for i in range(len(action_counts))])


# --------------------------------------------------------------------------
# sweep kernel and stationary distributions
# --------------------------------------------------------------------------

def _coordinate_masks(action_counts) -> np.ndarray:
    """``mask[i, a, b]`` is true iff joint actions a and b agree off agent i."""
    ja = joint_actions(action_counts)
    same = ja[:, None, :] == ja[None, :, :]
    n = len(action_counts)
    return np.stack([np.all(np.delete(same, i, axis=2), axis=2) for i in range(n)])


def sweep_kernels(cond_t: np.ndarray, action_counts) -> np.ndarray:
    """Full ascending-sweep kernels for every state; ``cond_t`` is ``(N, S, A)``."""
    masks = _coordinate_masks(action_counts)
    n, s, a = cond_t.shape
    k = np.broadcast_to(np.eye(a), (s, a, a)).copy()
    for i in range(n):
        k_i = masks[i][None] * cond_t[i][:, None, :]
        k = k @ k_i
    return k


def sweep_kernel(conditionals: np.ndarray, action_counts, t: int, s: int) -> np.ndarray:
    """Kernel of one systematic sweep at ``(t, s)``: ``K_0 @ K_1 @ ... @ K_{N-1}``."""
    return sweep_kernels(conditionals[:, t, s:s + 1], action_counts)[0]


def _power_iterate(kernels: np.ndarray, cfg: LsbreConfig):
    s, a, _ = kernels.shape
    p = np.full((s, a), 1.0 / a)
    res = np.full(s, np.inf)
    for _ in range(cfg.power_iter_max):
        nxt = np.einsum("sa,sab->sb", p, kernels)
        nxt /= nxt.sum(axis=1, keepdims=True)
        res = np.abs(nxt - p).max(axis=1)
        p = nxt
        if res.max() <= cfg.power_iter_tol:
            res = np.abs(np.einsum("sa,sab->sb", p, kernels) - p).max(axis=1)
            return p, res
    raise ConvergenceError(
        f"power iteration did not converge in {cfg.power_iter_max} sweeps "
        f"(last residual {res.max():.3e})", float(res.max()))


def stationary_exact(kernel: np.ndarray, cfg: LsbreConfig = LsbreConfig()):
    """Stationary distribution of a row-stochastic matrix and its final residual."""
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be square, got shape {kernel.shape}")
    p, res = _power_iterate(kernel[None], cfg)
    return p[0], float(res[0])


def stationary_sampled(conditionals: np.ndarray, action_counts, t: int, s: int,
                       n_sweeps: int, burn_in: int, seed) -> np.ndarray:
    """Empirical joint-action frequencies of the systematic-scan chain at ``(t, s)``.

    The chain starts at joint action 0; the state is recorded after each
    complete sweep once ``burn_in`` sweeps have passed.
    """
    if not n_sweeps > burn_in >= 0:
        raise ValueError("need n_sweeps > burn_in >= 0")
    rng = make_rng(seed)
    n = len(action_counts)
    strides = [int(v) for v in np.cumprod((1,) + tuple(action_counts[:-1]))]
    own_offsets = [np.arange(action_counts[i]) * strides[i] for i in range(n)]
    cdfs = conditionals[:, t, s]
    u = rng.random((n_sweeps, n))
    counts = np.zeros(cdfs.shape[-1], dtype=np.int64)
    z = 0
    for k in range(n_sweeps):
        for i in range(n):
            base = z - ((z // strides[i]) % action_counts[i]) * strides[i]
            cdf = np.cumsum(cdfs[i, base + own_offsets[i]])
            b = min(int((u[k, i] * cdf[-1] >= cdf).sum()), action_counts[i] - 1)
            z = base + b * strides[i]
        if k >= burn_in:
            counts[z] += 1
    return counts / counts.sum()


# --------------------------------------------------------------------------
# full solve
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LsbreSolution:
    joint: JointPolicy
    conditionals: np.ndarray
    soft_q: np.ndarray
    residuals: np.ndarray
    config: LsbreConfig = field(default_factory=LsbreConfig)

    def to_dict(self, fingerprint: str | None = None) -> dict:
        d = {"config": self.config.to_dict()}
        if fingerprint is not None:
            d["game_fingerprint"] = fingerprint
        d.update({
            "action_counts": list(self.joint.action_counts),
            "joint": self.joint.probs,
            "conditionals": self.conditionals,
            "soft_q": self.soft_q,
            "residuals": self.residuals,
        })
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LsbreSolution":
        c = d.get("config", {})
        cfg = LsbreConfig(c.get("lambda", 1.0), c.get("power_iter_tol", 1e-12),
                          c.get("power_iter_max", 100_000))
        return cls(JointPolicy(np.array(d["joint"]), d["action_counts"]),
                   np.array(d["conditionals"]), np.array(d["soft_q"]),
                   np.array(d["residuals"]), cfg)


def solve_lsbre(game: MarkovGame, cfg: LsbreConfig = LsbreConfig(), rewards=None) -> LsbreSolution:
    """Backward construction of the LSBRE joint policies for every step.

    ``rewards`` overrides the game's reward table and may be time-indexed,
    shape ``(N, T, S, A)``.
    """
    validate_game(game)
    r = _time_rewards(game, rewards)
    T, S, A, N = game.horizon, game.n_states, game.n_joint, game.n_agents
    q = np.empty((N, T, S, A))
    cond = np.empty((N, T, S, A))
    joint = np.empty((T, S, A))
    res = np.empty((T, S))
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            q[:, t] = soft_q_step(game, r[:, t])
        else:
            q[:, t] = soft_q_step(game, r[:, t], q[:, t + 1], joint[t + 1])
        cond[:, t] = lsbre_conditionals(q[:, t], game.action_counts, cfg)
        joint[t], res[t] = _power_iterate(sweep_kernels(cond[:, t], game.action_counts), cfg)
    return LsbreSolution(JointPolicy(joint, game.action_counts), cond, q, res, cfg)


def shaped_rewards(game: MarkovGame, potential, rewards=None) -> np.ndarray:
    """Time-indexed rewards ``r + gamma * E_{s'}[Phi(s')] - Phi(s)``, shape ``(N, T, S, A)``.

    The potential past the horizon is zero, so the last step receives only
    ``-Phi(s)``.
    """
    phi = np.asarray(potential, dtype=float)
    phi = np.broadcast_to(phi, (game.n_agents, game.n_states)) if phi.ndim == 1 else phi
    r = _time_rewards(game, rewards).copy()
    nxt = np.einsum("sap,ip->isa", game.transition, phi)
    r[:, :-1] += game.discount * nxt[:, None]
    r -= phi[:, None, :, None]
    return r


# --------------------------------------------------------------------------
# entropy-regularized best response
# --------------------------------------------------------------------------

def soft_best_response(game: MarkovGame, others: np.ndarray, rewards, agent: int,
                       cfg: LsbreConfig = LsbreConfig()):
    """Entropy-regularized best response of ``agent`` to fixed opponent play.

    ``others[t, s, b]`` is the opponents' joint distribution over ``A_-i``;
    ``rewards`` is agent i's table, ``(S, A)`` or ``(T, S, A)``.  The returned
    Markov policy ``pi[t, s, a_i]`` maximizes
    ``E[sum_t r_i(s_t, a_t) - log(pi(a_i^t | s_t)) / lam]`` and ``value[t, s]``
    is that optimum from ``(t, s)``.
    """
    counts = game.action_counts
    T, S = game.horizon, game.n_states
    r = np.asarray(rewards, dtype=float)
    r = np.broadcast_to(r, (T, S, game.n_joint))
    o = expand_others(others, counts, agent)
    pi = np.empty((T, S, counts[agent]))
    value = np.empty((T, S))
    v_next = np.zeros(S)
    for t in range(T - 1, -1, -1):
        q = r[t] + game.transition @ v_next
        q_own = others_axis_sum(o[t] * q, counts, agent)
        value[t] = logsumexp(cfg.lam * q_own, axis=1) / cfg.lam
        pi[t] = softmax(cfg.lam * q_own, axis=1)
        v_next = value[t]
    return pi, value


def best_response_objective(game: MarkovGame, others: np.ndarray, rewards, agent: int,
                            policy: np.ndarray, cfg: LsbreConfig = LsbreConfig()) -> float:
    """Exact ``E[sum_t r_i - log(pi_i)/lam]`` of a Markov policy against ``others``."""
    joint = joint_with_others(game, others, policy, agent)
    occ = occupancy(game, joint)
    r = np.broadcast_to(np.asarray(rewards, dtype=float), occ.shape)
    own = others_axis_sum(occ, game.action_counts, agent)
    return float((occ * r).sum() - xlogy(own, policy).sum() / cfg.lam)


def joint_with_others(game: MarkovGame, others: np.ndarray, policy: np.ndarray, agent: int) -> JointPolicy:
    """Joint policy where ``agent`` plays ``policy`` independently of ``others``."""
    counts = game.action_counts
    o = expand_others(others, counts, agent)
    own = to_agent_axes(np.ones(o.shape), counts)
    shape = [1] * own.ndim
    shape[0], shape[1], shape[2 + agent] = policy.shape[0], policy.shape[1], policy.shape[2]
    own = from_agent_axes(own * np.asarray(policy).reshape(shape), len(counts))
    return JointPolicy(o * own, counts)


def others_marginals(policy: JointPolicy, agent: int) -> np.ndarray:
    return marginal_policy(policy, agent)[0]
