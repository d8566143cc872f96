"""Maximum pseudolikelihood IRL.

The objective is the average log of the per-agent LSBRE conditionals at the
demonstrated (time, state, joint action) triples, minus an L2 penalty::

    l(w) = (1/M) sum_m sum_t sum_i log pi_i^t(a_i | a_-i, s; w_i) - rho * ||w||^2

For one-step games the conditionals are plain softmaxes of ``lam * r`` and
the gradient has a closed form; longer horizons use central differences
through the full backward solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import GameValidationError, OptimizerAbort
from .game import DemoSet, MarkovGame, expand_others, own_axis_sum, to_agent_axes, from_agent_axes
from .solver import LsbreConfig, lsbre_conditionals, solve_lsbre

log = logging.getLogger(__name__)

FD_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Features ``phi[s, a]`` of length ``d`` for every state and joint action."""

    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        if f.ndim != 3 or f.shape[2] < 1:
            raise ValueError(f"features must have shape (S, A, d) with d >= 1, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", f)

    @property
    def dim(self) -> int:
        return self.features.shape[2]


@dataclass(frozen=True, eq=False)
class RewardParams:
    """Per-agent reward parameters.

    ``kind == "tabular"``: ``weights`` has shape ``(N, S, A)`` and is the
    reward table itself.  ``kind == "linear"``: ``weights`` has shape
    ``(N, d)`` and ``r_i(s, a) = features[s, a] @ weights[i]``.
    """

    weights: np.ndarray
    kind: str = "tabular"
    features: FeatureMap | None = None
    l2: float = 1e-4

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if self.kind not in ("tabular", "linear"):
            raise ValueError(f"unknown parameterization {self.kind!r}")
        if self.kind == "linear" and (self.features is None or w.shape[1:] != (self.features.dim,)):
            raise ValueError("linear parameters need a FeatureMap matching the weight dimension")
        if self.l2 < 0:
            raise ValueError("l2 penalty must be non-negative")
        if not np.all(np.isfinite(w)):
            raise ValueError("reward parameters must be finite")

    @classmethod
    def zeros(cls, game: MarkovGame, kind="tabular", features=None, l2=1e-4) -> "RewardParams":
        if kind == "tabular":
            return cls(np.zeros((game.n_agents, game.n_states, game.n_joint)), kind, None, l2)
        return cls(np.zeros((game.n_agents, features.dim)), kind, features, l2)

    def rewards(self) -> np.ndarray:
        if self.kind == "tabular":
            return self.weights
        return np.einsum("sad,id->isa", self.features.features, self.weights)

    def with_weights(self, w) -> "RewardParams":
        return RewardParams(np.reshape(w, self.weights.shape), self.kind, self.features, self.l2)

    def penalty(self) -> float:
        with np.errstate(over="ignore"):
            return self.l2 * float(np.sum(self.weights ** 2))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "l2": self.l2, "weights": self.weights}


def gauge_fix(rewards: np.ndarray, action_counts) -> np.ndarray:
    """Center each agent's table over its own action per ``(s, a_-i)``."""
    r = np.array(rewards, dtype=float)
    n = len(action_counts)
    for i in range(n):
        y = to_agent_axes(r[i], action_counts)
        axis = r[i].ndim - 1 + i
        r[i] = from_agent_axes(y - y.mean(axis=axis, keepdims=True), n)
    return r


def data_weights(game: MarkovGame, data) -> np.ndarray:
    """Per-trajectory visit weights ``(T, S, A)`` from demos or an exact distribution.

    An array is taken as the exact distribution over ``(t, s, a)`` (each
    step summing to 1); a one-dimensional array is a normal-form ``p(a)``.
    """
    if isinstance(data, DemoSet):
        if len(data) == 0:
            raise GameValidationError("empty demonstration set")
        data.check_against(game)
        return data.counts(game) / len(data)
    w = np.asarray(data, dtype=float)
    if w.ndim == 1:
        w = w.reshape(1, 1, -1)
    if w.shape != (game.horizon, game.n_states, game.n_joint):
        raise GameValidationError(f"data distribution shape {w.shape} does not match game")
    return w


def _conditionals(game: MarkovGame, r: np.ndarray, cfg: LsbreConfig) -> np.ndarray:
    if game.horizon == 1:
        return lsbre_conditionals(r[:, None], game.action_counts, cfg)
    return solve_lsbre(game, cfg, rewards=r).conditionals


def pl_objective(game: MarkovGame, data, params: RewardParams, cfg: LsbreConfig = LsbreConfig()) -> float:
    w = data_weights(game, data)
    cond = _conditionals(game, params.rewards(), cfg)
    with np.errstate(divide="ignore"):
        ll = np.log(cond)
    # zero-weight cells never contribute, even where a conditional underflows
    total = float(np.sum(np.where(w > 0, w * ll, 0.0)))
    return total - params.penalty()


def _closed_form_gradient(game: MarkovGame, w: np.ndarray, params: RewardParams, cfg: LsbreConfig):
    counts = game.action_counts
    cond = lsbre_conditionals(params.rewards()[:, None], counts, cfg)[:, 0]
    w0 = w[0]
    g = np.empty((game.n_agents,) + w0.shape)
    for i in range(game.n_agents):
        w_others = expand_others(own_axis_sum(w0, counts, i), counts, i)
        g[i] = cfg.lam * (w0 - w_others * cond[i])
    if params.kind == "tabular":
        grad = g
    else:
        grad = np.einsum("isa,sad->id", g, params.features.features)
    return grad - 2.0 * params.l2 * params.weights


def pl_gradient(game: MarkovGame, data, params: RewardParams, cfg: LsbreConfig = LsbreConfig(), *,
                method: str = "auto") -> np.ndarray:
    """Gradient of :func:`pl_objective` with the shape of ``params.weights``.

    ``method`` is ``"closed"`` (one-step games only), ``"fd"`` (central
    differences, step 1e-6) or ``"auto"``.
    """
    w = data_weights(game, data)
    if method == "auto":
        method = "closed" if game.horizon == 1 else "fd"
    if method == "closed":
        if game.horizon != 1:
            raise ValueError("closed-form gradient is only available for one-step games")
        return _closed_form_gradient(game, w, params, cfg)
    if method != "fd":
        raise ValueError(f"unknown gradient method {method!r}")
    return finite_difference_gradient(lambda p: pl_objective(game, w, p, cfg), params)


def finite_difference_gradient(fn, params: RewardParams, step: float = FD_STEP) -> np.ndarray:
    flat = params.weights.ravel()
    grad = np.empty_like(flat)
    for k in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[k] += step
        down[k] -= step
        grad[k] = (fn(params.with_weights(up)) - fn(params.with_weights(down))) / (2 * step)
    return grad.reshape(params.weights.shape)


@dataclass
class FitReport:
    params: RewardParams
    objective_trace: list = field(default_factory=list)
    grad_norm_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "converged": self.converged,
                "objective_trace": self.objective_trace,
                "grad_norm_trace": self.grad_norm_trace,
                "params": self.params.to_dict()}


def fit_mpl(game: MarkovGame, data, init: RewardParams | None = None,
            cfg: LsbreConfig = LsbreConfig(), *, step_size: float = 1.0,
            max_iter: int = 5000, grad_tol: float = 1e-6, armijo_c: float = 1e-4,
            backtrack: float = 0.5, min_step: float = 1e-12) -> FitReport:
    """Gradient ascent with Armijo backtracking on the pseudolikelihood.

    Each search starts from twice the last accepted step (capped at
    ``step_size``).  Tabular results of one-step games are returned
    gauge-fixed; for longer horizons a per-``(s, a_-i)`` shift changes the
    soft-Q values of earlier steps, so the table is left as fitted.
    """
    w = data_weights(game, data)
    params = init if init is not None else RewardParams.zeros(game)
    obj = pl_objective(game, w, params, cfg)
    if not np.isfinite(obj):
        raise OptimizerAbort(f"objective is not finite at the initial point ({obj})")
    report = FitReport(params)
    step = step_size
    for it in range(max_iter):
        grad = pl_gradient(game, w, params, cfg)
        gnorm = float(np.max(np.abs(grad)))
        report.objective_trace.append(obj)
        report.grad_norm_trace.append(gnorm)
        if gnorm <= grad_tol:
            report.converged = True
            break
        sq = float(np.sum(grad ** 2))
        step = min(step * 2.0, step_size)
        while True:
            trial = params.with_weights(params.weights + step * grad)
            new = pl_objective(game, w, trial, cfg)
            if not np.isfinite(new):
                raise OptimizerAbort(f"non-finite objective at iteration {it} (step {step:g})")
            if new >= obj + armijo_c * step * sq:
                break
            step *= backtrack
            if step < min_step:
                log.warning("line search stalled at iteration %d", it)
                report.iterations = it
                report.params = _finish(game, params)
                return report
        params, obj = trial, new
        report.iterations = it + 1
    report.params = _finish(game, params)
    return report


def _finish(game: MarkovGame, params: RewardParams) -> RewardParams:
    if params.kind == "tabular" and game.horizon == 1:
        return params.with_weights(gauge_fix(params.weights, game.action_counts))
    return params
