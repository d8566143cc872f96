"""Reward-recovery and imitation metrics."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import GameValidationError, UndefinedMetricError
from .game import DemoSet, JointPolicy, MarkovGame, expected_return, marginal_policy, occupancy


def _check_pair(x, y):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise UndefinedMetricError(f"need two equal-length vectors of length >= 2, got {x.size} and {y.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedMetricError("correlation undefined for a constant vector")
    return x, y


def pcc(x, y) -> float:
    """Sample Pearson correlation."""
    x, y = _check_pair(x, y)
    return float(np.clip(stats.pearsonr(x, y)[0], -1.0, 1.0))


def _snap(x: np.ndarray) -> np.ndarray:
    # values equal up to summation-order roundoff rank as ties
    return np.round(x / np.abs(x).max(), 12)


def scc(x, y) -> float:
    """Spearman correlation (Pearson on average-tie ranks).

    Entries within 1e-12 of each other, relative to the vector's largest
    magnitude, are treated as ties.
    """
    x, y = _check_pair(x, y)
    x, y = _snap(x), _snap(y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedMetricError("correlation undefined for a constant vector")
    return float(np.clip(stats.spearmanr(x, y)[0], -1.0, 1.0))


def _per_step(game: MarkovGame, rewards, demos: DemoSet) -> np.ndarray:
    """Per-step rewards ``(N, M, T)`` along the demos; tables are ``(N, S, A)`` or ``(N, T, S, A)``."""
    r = np.asarray(rewards, dtype=float)
    n, T = game.n_agents, game.horizon
    if r.shape == (n, game.n_states, game.n_joint):
        r = np.broadcast_to(r[:, None], (n, T) + r.shape[1:])
    if r.shape != (n, T, game.n_states, game.n_joint):
        raise GameValidationError(f"reward table shape {r.shape} does not match the game")
    j = demos.joint(game.action_counts)
    t = np.broadcast_to(np.arange(T), demos.states.shape)
    return np.stack([r[i][t, demos.states, j] for i in range(n)])


def trajectory_returns(game: MarkovGame, rewards, demos: DemoSet) -> np.ndarray:
    """Undiscounted per-trajectory returns ``(N, M)``."""
    return _per_step(game, rewards, demos).sum(axis=2)


def reward_recovery_report(game: MarkovGame, true_rewards, learned_rewards, demos: DemoSet) -> list:
    """Per-agent correlation of true vs learned rewards.

    The ``traj`` columns correlate per-trajectory returns; the ``step``
    columns correlate per-step rewards over all visited pairs.  Either
    table may be time-indexed.
    """
    if len(demos) < 2:
        raise UndefinedMetricError("reward recovery needs at least two trajectories")
    demos.check_against(game)
    st = _per_step(game, true_rewards, demos)
    sl = _per_step(game, learned_rewards, demos)
    rt, rl = st.sum(axis=2), sl.sum(axis=2)
    rows = []
    for i in range(game.n_agents):
        row = {"agent": i, "pcc_traj": pcc(rt[i], rl[i]), "scc_traj": scc(rt[i], rl[i])}
        try:
            row["pcc_step"], row["scc_step"] = pcc(st[i], sl[i]), scc(st[i], sl[i])
        except UndefinedMetricError:
            row["pcc_step"] = row["scc_step"] = float("nan")
        rows.append(row)
    return rows


def cross_play(game: MarkovGame, policy_sets: dict, pairings=None) -> list:
    """Exact expected returns for each assignment of policy sources to agents.

    ``policy_sets`` maps a label to a :class:`JointPolicy`.  A pairing names
    one label per agent; when all agents use one label its joint policy is
    used unchanged, otherwise agents play the designated per-agent
    marginals independently.  By default every assignment is evaluated.
    """
    labels = list(policy_sets)
    for lab, pol in policy_sets.items():
        if pol.probs.shape != (game.horizon, game.n_states, game.n_joint):
            raise GameValidationError(f"policy set {lab!r} does not match the game")
    if pairings is None:
        pairings = list(itertools.product(labels, repeat=game.n_agents))
    marg = {lab: [marginal_policy(p, i)[1] for i in range(game.n_agents)]
            for lab, p in policy_sets.items()}
    rows = []
    for pairing in pairings:
        pairing = tuple(pairing)
        if len(pairing) != game.n_agents or any(p not in policy_sets for p in pairing):
            raise GameValidationError(f"bad pairing {pairing}")
        if len(set(pairing)) == 1:
            joint = policy_sets[pairing[0]]
        else:
            joint = JointPolicy.product([marg[lab][i] for i, lab in enumerate(pairing)])
        rows.append({"pairing": pairing,
                     "returns": [expected_return(game, joint, i) for i in range(game.n_agents)]})
    return rows


def occupancy_measure(game: MarkovGame, policy: JointPolicy) -> np.ndarray:
    """Time-averaged ``(S, A)`` state/joint-action occupancy."""
    return occupancy(game, policy).mean(axis=0)


def occupancy_kl(game: MarkovGame, p: JointPolicy, q: JointPolicy) -> float:
    """``KL(rho_p || rho_q)`` between exact time-averaged occupancies."""
    rp, rq = occupancy_measure(game, p), occupancy_measure(game, q)
    support = rp > 0
    if np.any(rq[support] <= 0):
        raise GameValidationError("q has zero occupancy where p is positive")
    return float(max(0.0, np.sum(rp[support] * np.log(rp[support] / rq[support]))))


@dataclass
class MetricReport:
    recovery: list = field(default_factory=list)
    expected_returns: dict = field(default_factory=dict)
    cross_play: list = field(default_factory=list)
    occupancy_kl: float | None = None
    metadata: dict = field(default_factory=dict)

    def rows(self) -> list:
        """Flat ``(agent, metric, value)`` rows."""
        out = []
        for row in self.recovery:
            for key in ("pcc_traj", "scc_traj", "pcc_step", "scc_step"):
                out.append((str(row["agent"]), key, row[key]))
        n = len(self.recovery)
        for key in ("pcc_traj", "scc_traj"):
            if n:
                out.append(("mean", key, float(np.mean([r[key] for r in self.recovery]))))
        for label, values in self.expected_returns.items():
            for i, v in enumerate(values):
                out.append((str(i), f"return[{label}]", v))
        for row in self.cross_play:
            tag = "|".join(row["pairing"])
            for i, v in enumerate(row["returns"]):
                out.append((str(i), f"cross_play[{tag}]", v))
        if self.occupancy_kl is not None:
            out.append(("all", "occupancy_kl", self.occupancy_kl))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["agent", "metric", "value"])
            for agent, metric, value in self.rows():
                w.writerow([agent, metric, f"{value:.17g}"])

    def to_dict(self) -> dict:
        return {"recovery": self.recovery, "expected_returns": self.expected_returns,
                "cross_play": [{"pairing": list(r["pairing"]), "returns": r["returns"]}
                               for r in self.cross_play],
                "occupancy_kl": self.occupancy_kl, "metadata": self.metadata}
