"""Finite Markov games, joint policies, rollouts and exact expected returns.

Joint actions are flattened in mixed-radix order with agent 0 varying
fastest: ``joint = a_0 + |A_0| * (a_1 + |A_1| * (a_2 + ...))``.  Every table
indexed by a joint action (transitions, rewards, policies) uses this order.

Time is 0-based internally: index ``t`` in ``range(horizon)`` is step
``t + 1`` of the episode.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import GameValidationError, UndefinedConditionalError

ROW_TOL = 1e-12
POLICY_TOL = 1e-10


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator from a 64-bit seed; generators pass through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


# --------------------------------------------------------------------------
# joint-action indexing
# --------------------------------------------------------------------------

def n_joint(action_counts: Sequence[int]) -> int:
    return int(np.prod(action_counts, dtype=np.int64))


def joint_index(actions, action_counts: Sequence[int]):
    """Flatten per-agent actions (last axis = agent) to joint indices."""
    actions = np.asarray(actions)
    idx = np.zeros(actions.shape[:-1], dtype=np.int64)
    stride = 1
    for i, c in enumerate(action_counts):
        idx = idx + actions[..., i] * stride
        stride *= int(c)
    return idx if idx.ndim else int(idx)


def joint_actions(action_counts: Sequence[int]) -> np.ndarray:
    """All joint actions as an ``(n_joint, N)`` array, rows in joint-index order."""
    idx = np.arange(n_joint(action_counts))
    out = np.empty((idx.size, len(action_counts)), dtype=np.int64)
    for i, c in enumerate(action_counts):
        out[:, i] = idx % c
        idx = idx // c
    return out


def to_agent_axes(x, action_counts: Sequence[int]) -> np.ndarray:
    """Reshape a trailing joint-action axis into one axis per agent (agent order)."""
    x = np.asarray(x)
    n = len(action_counts)
    y = x.reshape(x.shape[:-1] + tuple(int(c) for c in reversed(action_counts)))
    lead = list(range(x.ndim - 1))
    return y.transpose(lead + [x.ndim - 1 + n - 1 - k for k in range(n)])


def from_agent_axes(y, n_agents: int) -> np.ndarray:
    """Inverse of :func:`to_agent_axes` for the trailing ``n_agents`` axes."""
    y = np.asarray(y)
    lead = y.ndim - n_agents
    z = y.transpose(list(range(lead)) + [lead + n_agents - 1 - k for k in range(n_agents)])
    return z.reshape(y.shape[:lead] + (-1,))


def others_counts(action_counts: Sequence[int], agent: int) -> tuple:
    return tuple(int(c) for k, c in enumerate(action_counts) if k != agent)


def expand_others(x, action_counts: Sequence[int], agent: int) -> np.ndarray:
    """Broadcast a table over ``A_-i`` (trailing axis) to joint-action indexing."""
    x = np.asarray(x)
    n = len(action_counts)
    rest = others_counts(action_counts, agent)
    y = to_agent_axes(x, rest) if rest else x[..., 0]
    y = np.expand_dims(y, axis=x.ndim - 1 + agent)
    shape = x.shape[:-1] + tuple(int(c) for c in action_counts)
    return from_agent_axes(np.broadcast_to(y, shape), n)


def own_axis_sum(x, action_counts: Sequence[int], agent: int) -> np.ndarray:
    """Sum a joint-indexed table over agent ``agent``'s own action; result over ``A_-i``."""
    n = len(action_counts)
    y = to_agent_axes(x, action_counts).sum(axis=np.ndim(x) - 1 + agent)
    return from_agent_axes(y, n - 1) if n > 1 else y[..., None]


def others_axis_sum(x, action_counts: Sequence[int], agent: int) -> np.ndarray:
    """Sum a joint-indexed table over the other agents; result over ``A_i``."""
    n = len(action_counts)
    lead = np.ndim(x) - 1
    axes = tuple(lead + k for k in range(n) if k != agent)
    y = to_agent_axes(x, action_counts)
    return y.sum(axis=axes) if axes else y


# --------------------------------------------------------------------------
# games
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MarkovGame:
    """Finite-horizon N-agent Markov game.

    ``transition`` has shape ``(S, A, S)``, ``rewards`` shape ``(N, S, A)``
    where ``A`` is the number of joint actions.  Construction only coerces
    arrays; call :func:`validate_game` to check the invariants.
    """

    action_counts: tuple
    transition: np.ndarray
    rewards: np.ndarray
    initial_dist: np.ndarray
    horizon: int
    discount: float = 1.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "action_counts", tuple(int(c) for c in self.action_counts))
        for attr in ("transition", "rewards", "initial_dist"):
            arr = np.array(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_states(self) -> int:
        return self.initial_dist.shape[0]

    @property
    def n_joint(self) -> int:
        return n_joint(self.action_counts)

    def with_rewards(self, rewards) -> "MarkovGame":
        return MarkovGame(self.action_counts, self.transition, rewards,
                          self.initial_dist, self.horizon, self.discount, self.name)

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "action_counts": list(self.action_counts),
            "states": self.n_states,
            "transition": self.transition.tolist(),
            "rewards": self.rewards.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "horizon": self.horizon,
            "discount": self.discount,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarkovGame":
        missing = [k for k in ("action_counts", "transition", "rewards",
                               "initial_dist", "horizon") if k not in d]
        if missing:
            raise GameValidationError(f"game definition missing field(s): {', '.join(missing)}")
        counts = d["action_counts"]
        if "n_agents" in d and int(d["n_agents"]) != len(counts):
            raise GameValidationError(
                f"n_agents={d['n_agents']} but action_counts has {len(counts)} entries")
        states = d.get("states")
        n_states = len(states) if isinstance(states, list) else states
        try:
            game = cls(counts, d["transition"], d["rewards"], d["initial_dist"],
                       d["horizon"], d.get("discount", 1.0), d.get("name", ""))
        except ValueError as exc:  # ragged nested arrays
            raise GameValidationError(f"malformed array in game definition: {exc}") from exc
        if n_states is not None and int(n_states) != game.n_states:
            raise GameValidationError(
                f"states={n_states} but initial_dist has {game.n_states} entries")
        return game

    def fingerprint(self) -> str:
        """SHA-256 of the canonical definition (17 significant digits per float)."""
        from .serialization import dumps
        return hashlib.sha256(dumps(self.to_dict(), indent=None).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class NormalFormGame:
    """Single-shot game; ``rewards`` has shape ``(N, A)`` over joint actions."""

    action_counts: tuple
    rewards: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "action_counts", tuple(int(c) for c in self.action_counts))
        object.__setattr__(self, "rewards", np.array(self.rewards, dtype=float))

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @classmethod
    def from_payoff_tensors(cls, tensors) -> "NormalFormGame":
        """Build from per-agent payoff arrays indexed ``[a_0, a_1, ...]``."""
        tensors = [np.asarray(r, dtype=float) for r in tensors]
        counts = tensors[0].shape
        return cls(counts, np.stack([from_agent_axes(r, len(counts)) for r in tensors]))

    def to_markov(self) -> MarkovGame:
        a = n_joint(self.action_counts)
        return MarkovGame(self.action_counts, np.ones((1, a, 1)),
                          self.rewards.reshape(self.n_agents, 1, a), [1.0], 1, 1.0)


def validate_game(game: MarkovGame) -> None:
    """Raise :class:`GameValidationError` naming the first violated invariant."""
    n, counts = game.n_agents, game.action_counts
    if n < 1:
        raise GameValidationError("n_agents must be positive")
    for i, c in enumerate(counts):
        if c < 1:
            raise GameValidationError(f"action_counts[{i}]={c} must be positive")
    if game.horizon < 1:
        raise GameValidationError(f"horizon={game.horizon} must be positive")
    if not (0.0 < game.discount <= 1.0):
        raise GameValidationError(f"discount={game.discount} outside (0, 1]")
    eta = game.initial_dist
    if eta.ndim != 1 or eta.size < 1:
        raise GameValidationError(f"initial_dist must be a non-empty vector, got shape {eta.shape}")
    s, a = eta.size, game.n_joint
    if game.transition.shape != (s, a, s):
        raise GameValidationError(
            f"transition has shape {game.transition.shape}, expected {(s, a, s)}"
            f" for {s} states and {a} joint actions")
    if game.rewards.shape != (n, s, a):
        raise GameValidationError(
            f"rewards has shape {game.rewards.shape}, expected {(n, s, a)}")
    bad = np.argwhere(~np.isfinite(eta) | (eta < 0))
    if bad.size:
        k = int(bad[0, 0])
        raise GameValidationError(f"initial_dist[{k}]={float(eta[k])} is negative or not finite")
    if abs(eta.sum() - 1.0) > ROW_TOL:
        raise GameValidationError(f"initial_dist sums to {float(eta.sum()):.15g}")
    p = game.transition
    bad = np.argwhere(~np.isfinite(p) | (p < 0))
    if bad.size:
        s0, a0, s1 = (int(v) for v in bad[0])
        raise GameValidationError(
            f"transition row s={s0}, joint_a={a0}: entry s'={s1} is negative or not finite "
            f"({float(p[s0, a0, s1]):.15g})")
    sums = p.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
    if bad.size:
        s0, a0 = (int(v) for v in bad[0])
        raise GameValidationError(
            f"transition row s={s0}, joint_a={a0} sums to {float(sums[s0, a0]):.15g}")
    bad = np.argwhere(~np.isfinite(game.rewards))
    if bad.size:
        i, s0, a0 = (int(v) for v in bad[0])
        raise GameValidationError(
            f"rewards[{i}][{s0}][{a0}] is {float(game.rewards[i, s0, a0])}")


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class JointPolicy:
    """Time-indexed joint policy; ``probs[t, s, joint_a]``."""

    probs: np.ndarray
    action_counts: tuple

    def __post_init__(self):
        object.__setattr__(self, "action_counts", tuple(int(c) for c in self.action_counts))
        arr = np.array(self.probs, dtype=float)
        if arr.ndim != 3 or arr.shape[2] != n_joint(self.action_counts):
            raise GameValidationError(
                f"policy must have shape (T, S, {n_joint(self.action_counts)}), got {arr.shape}")
        if np.any(~np.isfinite(arr)) or np.any(arr < 0):
            raise GameValidationError("policy has negative or non-finite entries")
        bad = np.argwhere(np.abs(arr.sum(axis=2) - 1.0) > POLICY_TOL)
        if bad.size:
            t, s = (int(v) for v in bad[0])
            raise GameValidationError(f"policy row t={t}, s={s} sums to {float(arr[t, s].sum()):.15g}")
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def horizon(self) -> int:
        return self.probs.shape[0]

    @property
    def n_states(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, game: MarkovGame) -> "JointPolicy":
        a = game.n_joint
        return cls(np.full((game.horizon, game.n_states, a), 1.0 / a), game.action_counts)

    @classmethod
    def product(cls, marginals: Sequence[np.ndarray]) -> "JointPolicy":
        """Independent play: ``marginals[i]`` has shape ``(T, S, |A_i|)``."""
        marginals = [np.asarray(m, dtype=float) for m in marginals]
        n = len(marginals)
        t, s = marginals[0].shape[:2]
        joint = np.ones((t, s) + (1,) * n)
        for i, m in enumerate(marginals):
            shape = [t, s] + [1] * n
            shape[2 + i] = m.shape[2]
            joint = joint * m.reshape(shape)
        return cls(from_agent_axes(joint, n), tuple(m.shape[2] for m in marginals))


def validate_policy(game: MarkovGame, policy: JointPolicy) -> None:
    expected = (game.horizon, game.n_states, game.n_joint)
    if policy.probs.shape != expected or policy.action_counts != game.action_counts:
        raise GameValidationError(
            f"policy shape {policy.probs.shape} / actions {policy.action_counts} do not match "
            f"game {expected} / {game.action_counts}")
    p = policy.probs
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise GameValidationError("policy has negative or non-finite entries")
    sums = p.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > POLICY_TOL)
    if bad.size:
        t, s = (int(v) for v in bad[0])
        raise GameValidationError(f"policy row t={t}, s={s} sums to {sums[t, s]!r}")


def marginal_policy(policy: JointPolicy, agent: int):
    """Exact marginals ``(others, own)`` with shapes ``(T, S, |A_-i|)`` and ``(T, S, |A_i|)``.

    The others' joint index is mixed-radix over the remaining agents in
    ascending order, lowest agent fastest.
    """
    counts = policy.action_counts
    if not 0 <= agent < len(counts):
        raise IndexError(f"agent {agent} out of range for {len(counts)} agents")
    n = len(counts)
    tensor = to_agent_axes(policy.probs, counts)
    own_axes = tuple(2 + k for k in range(n) if k != agent)
    own = tensor.sum(axis=own_axes) if own_axes else tensor
    others = tensor.sum(axis=2 + agent)
    others = from_agent_axes(others, n - 1) if n > 1 else others[..., None]
    return others, own


def conditional_from_joint(policy: JointPolicy, agent: int) -> np.ndarray:
    """Joint-indexed conditional ``c[t, s, a] = pi(a_i | a_-i, s)``.

    Raises :class:`UndefinedConditionalError` listing every ``(t, s, a_-i)``
    with zero marginal probability; no fallback is substituted.
    """
    counts = policy.action_counts
    if not 0 <= agent < len(counts):
        raise IndexError(f"agent {agent} out of range for {len(counts)} agents")
    tensor = to_agent_axes(policy.probs, counts)
    denom = tensor.sum(axis=2 + agent, keepdims=True)
    if np.any(denom <= 0):
        flat = np.argwhere(np.squeeze(denom, axis=2 + agent) <= 0)
        events = [tuple(int(v) for v in row) for row in flat]
        raise UndefinedConditionalError(
            f"agent {agent}: conditional undefined at {len(events)} event(s), first "
            f"(t, s, a_-i)={events[0]}", events)
    return from_agent_axes(tensor / denom, len(counts))


# --------------------------------------------------------------------------
# trajectories and rollouts
# --------------------------------------------------------------------------

class Trajectory(NamedTuple):
    """States ``(T,)`` and per-agent actions ``(T, N)`` of one episode."""

    states: np.ndarray
    actions: np.ndarray


@dataclass(frozen=True, eq=False)
class DemoSet:
    """``M`` trajectories of one game: ``states (M, T)``, ``actions (M, T, N)``."""

    states: np.ndarray
    actions: np.ndarray
    seed: int
    fingerprint: str

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))
        if self.states.ndim != 2 or self.actions.shape[:2] != self.states.shape:
            raise GameValidationError(
                f"inconsistent demo arrays: states {self.states.shape}, actions {self.actions.shape}")
        if self.states.shape[0] < 1:
            raise GameValidationError("a demo set needs at least one trajectory")

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, m) -> Trajectory:
        return Trajectory(self.states[m], self.actions[m])

    def check_against(self, game: MarkovGame) -> None:
        if self.states.shape[1] != game.horizon or self.actions.shape[2] != game.n_agents:
            raise GameValidationError(
                f"demos have shape {self.actions.shape}, game horizon {game.horizon} "
                f"with {game.n_agents} agents")
        if np.any((self.states < 0) | (self.states >= game.n_states)):
            raise GameValidationError("demo state index out of range")
        if np.any((self.actions < 0) | (self.actions >= np.asarray(game.action_counts))):
            raise GameValidationError("demo action index out of range")

    def joint(self, action_counts) -> np.ndarray:
        return joint_index(self.actions, action_counts)

    def counts(self, game: MarkovGame) -> np.ndarray:
        """Visit counts ``(T, S, A)`` of (time, state, joint action)."""
        t = np.broadcast_to(np.arange(game.horizon), self.states.shape)
        flat = np.ravel_multi_index(
            (t.ravel(), self.states.ravel(), self.joint(game.action_counts).ravel()),
            (game.horizon, game.n_states, game.n_joint))
        out = np.bincount(flat, minlength=game.horizon * game.n_states * game.n_joint)
        return out.reshape(game.horizon, game.n_states, game.n_joint).astype(float)


def _draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF per row; clip guards the cumulative sum falling short of 1
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_trajectories(game: MarkovGame, policy: JointPolicy, m: int, rng, *,
                        with_next_state: bool = False):
    """Sample ``m`` episodes; returns ``(states, actions[, next_states])``.

    Per step the generator is consumed in a fixed order (joint actions, then
    next states), so results depend only on the seed.  ``next_states[:, T-1]``
    is one extra transition draw past the horizon.
    """
    validate_policy(game, policy)
    rng = make_rng(rng)
    T = game.horizon
    states = np.empty((m, T), dtype=np.int64)
    joints = np.empty((m, T), dtype=np.int64)
    nxt = np.empty((m, T), dtype=np.int64)
    s = _draw(np.broadcast_to(game.initial_dist, (m, game.n_states)), rng.random(m))
    for t in range(T):
        states[:, t] = s
        a = _draw(policy.probs[t, s], rng.random(m))
        joints[:, t] = a
        s = _draw(game.transition[s, a], rng.random(m))
        nxt[:, t] = s
    actions = joint_actions(game.action_counts)[joints]
    if with_next_state:
        return states, actions, nxt
    return states, actions


def rollout(game: MarkovGame, policy: JointPolicy, rng_seed) -> Trajectory:
    """One episode: ``s1 ~ eta``, ``a_t ~ pi_t(.|s_t)``, ``s_{t+1} ~ P(.|s_t, a_t)``."""
    states, actions = sample_trajectories(game, policy, 1, rng_seed)
    return Trajectory(states[0], actions[0])


def generate_demos(game: MarkovGame, policy: JointPolicy, m: int, seed: int) -> DemoSet:
    if m < 1:
        raise GameValidationError(f"demo count must be at least 1, got {m}")
    states, actions = sample_trajectories(game, policy, m, seed)
    return DemoSet(states, actions, int(seed), game.fingerprint())


def trajectory_log_prob(game: MarkovGame, policy: JointPolicy, traj: Trajectory) -> float:
    """Log of ``eta(s1) * prod_t pi_t(a_t|s_t) * prod_{t<T} P(s_{t+1}|s_t, a_t)``."""
    s = np.asarray(traj.states)
    a = joint_index(np.asarray(traj.actions), game.action_counts)
    a = np.atleast_1d(a)
    with np.errstate(divide="ignore"):
        lp = math.log(game.initial_dist[s[0]]) if game.initial_dist[s[0]] > 0 else -math.inf
        lp += float(np.log(policy.probs[np.arange(len(s)), s, a]).sum())
        lp += float(np.log(game.transition[s[:-1], a[:-1], s[1:]]).sum())
    return lp


# --------------------------------------------------------------------------
# exact forward propagation
# --------------------------------------------------------------------------

def state_distributions(game: MarkovGame, policy: JointPolicy) -> np.ndarray:
    """Exact ``P(s_t = s)`` for every step, shape ``(T, S)``."""
    d = np.empty((game.horizon, game.n_states))
    cur = game.initial_dist.copy()
    for t in range(game.horizon):
        d[t] = cur
        sa = cur[:, None] * policy.probs[t]
        cur = np.einsum("sa,sap->p", sa, game.transition)
    return d


def occupancy(game: MarkovGame, policy: JointPolicy) -> np.ndarray:
    """Exact ``P(s_t = s, a_t = a)``, shape ``(T, S, A)``; each step sums to 1."""
    return state_distributions(game, policy)[:, :, None] * policy.probs


def expected_return(game: MarkovGame, policy: JointPolicy, agent: int, rewards=None) -> float:
    """``E[sum_t gamma^(t-1) r_i(s_t, a_t)]`` by exact forward propagation.

    ``rewards`` overrides the game's table for this agent, shape ``(S, A)``
    or time-indexed ``(T, S, A)``.
    """
    if not 0 <= agent < game.n_agents:
        raise IndexError(f"agent {agent} out of range for {game.n_agents} agents")
    validate_policy(game, policy)
    r = game.rewards[agent] if rewards is None else np.asarray(rewards, dtype=float)
    occ = occupancy(game, policy)
    disc = game.discount ** np.arange(game.horizon)
    r = np.broadcast_to(r, occ.shape)
    return float(np.einsum("t,tsa,tsa->", disc, occ, r))
