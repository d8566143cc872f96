"""Command-line pipeline: generate, solve, sample demos, fit rewards, evaluate.

Every command is a pure function of its input files, flags and seed.
Exit codes: 0 success, 2 input/validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from .airl import AirlConfig, SamplerPolicy, train
from .errors import (
    ConvergenceError,
    GameValidationError,
    OptimizerAbort,
    UndefinedConditionalError,
    UndefinedMetricError,
)
from .evaluation import MetricReport, cross_play, occupancy_kl, reward_recovery_report
from .game import JointPolicy, MarkovGame, expected_return, generate_demos, make_rng, validate_game
from .mpl import RewardParams, fit_mpl
from .serialization import dumps, load_demos, load_game, read_json, save_demos, save_game, write_json
from .solver import LsbreConfig, LsbreSolution, marginal_entropies, solve_lsbre

log = logging.getLogger("lsbre")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

GAME_FILE = "game.json"
SOLUTION_FILE = "solution.json"
SUMMARY_FILE = "solve_summary.csv"
DEMOS_FILE = "demos.jsonl"
REWARDS_FILE = "learned_rewards.json"
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"

MPL_KEYS = ("step_size", "max_iter", "grad_tol", "armijo_c", "backtrack", "min_step")


class InputError(Exception):
    """Bad flags, config or missing files (exit code 2)."""


# --------------------------------------------------------------------------
# random games
# --------------------------------------------------------------------------

def random_game(spec: dict, seed: int) -> MarkovGame:
    """Game with uniform rewards in ``reward_range`` and Dirichlet(1) transitions.

    ``spec`` keys: ``n_states``, ``action_counts`` (or ``n_agents`` plus
    ``n_actions``), ``horizon``, optional ``reward_range`` (default
    ``[-1, 1]``), ``discount`` (1.0), ``cooperative`` (shared reward) and
    ``seed``, which overrides the global seed.  The initial distribution is
    uniform.
    """
    try:
        if "action_counts" in spec:
            counts = [int(c) for c in spec["action_counts"]]
        else:
            counts = [int(spec.get("n_actions", 2))] * int(spec["n_agents"])
        if "n_agents" in spec and int(spec["n_agents"]) != len(counts):
            raise InputError("generator n_agents disagrees with action_counts")
        n_states, horizon = int(spec["n_states"]), int(spec["horizon"])
    except KeyError as exc:
        raise InputError(f"generator spec missing {exc.args[0]!r}") from exc
    lo, hi = (float(v) for v in spec.get("reward_range", (-1.0, 1.0)))
    if not lo <= hi:
        raise InputError(f"empty reward range [{lo}, {hi}]")
    rng = make_rng(int(spec.get("seed", seed)))
    n, a = len(counts), int(np.prod(counts))
    if spec.get("cooperative", False):
        rewards = np.broadcast_to(rng.uniform(lo, hi, (n_states, a)), (n, n_states, a)).copy()
    else:
        rewards = rng.uniform(lo, hi, (n, n_states, a))
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, a))
    init = np.full(n_states, 1.0 / n_states)
    game = MarkovGame(counts, transition, rewards, init, horizon,
                      float(spec.get("discount", 1.0)), str(spec.get("name", "random")))
    validate_game(game)
    return game


# --------------------------------------------------------------------------
# config resolution
# --------------------------------------------------------------------------

def _load_config(path) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    cfg = read_json(p)
    if not isinstance(cfg, dict):
        raise InputError(f"{p}: config must be an object")
    return cfg, p.parent


class Run:
    """Flags merged over the config file; flags win."""

    def __init__(self, args):
        self.args = args
        self.cfg, self.base = _load_config(args.config)
        seed = args.seed if args.seed is not None else self.cfg.get("seed")
        if seed is None:
            raise InputError("a seed is required (--seed or \"seed\" in the config)")
        self.seed = int(seed)
        if not 0 <= self.seed < 2 ** 64:
            raise InputError("seed must be an unsigned 64-bit integer")
        out = args.out if args.out is not None else self.cfg.get("out")
        if out is None:
            raise InputError("an output directory is required (--out or \"out\" in the config)")
        self.out = Path(out) if args.out is not None else self.base / out
        self.out.mkdir(parents=True, exist_ok=True)

    def _path(self, flag_value, key, default_name=None, required=True):
        if flag_value is not None:
            p = Path(flag_value)
        elif key in self.cfg and isinstance(self.cfg[key], str):
            p = self.base / self.cfg[key]
        elif default_name is not None and (self.out / default_name).is_file():
            p = self.out / default_name
        elif required:
            raise InputError(f"no {key} given (--{key} or \"{key}\" in the config)")
        else:
            return None
        if not p.is_file():
            raise InputError(f"{key} file not found: {p}")
        return p

    def lsbre(self) -> LsbreConfig:
        c = dict(self.cfg.get("lsbre", {}))
        lam = self.args.lam if self.args.lam is not None else c.get("lambda", 1.0)
        return LsbreConfig(float(lam), float(c.get("power_iter_tol", 1e-12)),
                           int(c.get("power_iter_max", 100_000)))

    def method(self) -> str:
        irl = self.cfg.get("irl", {})
        m = self.args.method if self.args.method is not None else irl.get("method", "mpl")
        if m not in ("mpl", "airl"):
            raise InputError(f"unknown IRL method {m!r}")
        return m

    def game(self) -> MarkovGame:
        p = self._path(getattr(self.args, "game", None), "game", GAME_FILE, required=False)
        if p is not None:
            game = load_game(p)
        elif "generator" in self.cfg:
            game = random_game(self.cfg["generator"], self.seed)
        else:
            raise InputError("no game given (--game, \"game\" or \"generator\" in the config)")
        validate_game(game)
        return game

    def n_demos(self) -> int:
        m = self.args.m if getattr(self.args, "m", None) is not None else \
            self.cfg.get("demos", {}).get("m", 200)
        if int(m) < 1:
            raise InputError(f"demo count must be at least 1, got {m}")
        return int(m)


def _config_hash(d: dict) -> str:
    return hashlib.sha256(dumps(d, indent=None).encode()).hexdigest()[:16]


def _check_fingerprint(kind: str, found, game: MarkovGame):
    if found != game.fingerprint():
        raise InputError(f"{kind} fingerprint {found!r} does not match the game "
                         f"({game.fingerprint()})")


def _load_solution(path, game: MarkovGame) -> LsbreSolution:
    d = read_json(path)
    if not isinstance(d, dict) or "joint" not in d:
        raise InputError(f"{path}: not a solution file")
    _check_fingerprint("solution", d.get("game_fingerprint"), game)
    try:
        return LsbreSolution.from_dict(d)
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: malformed solution: {exc}") from exc


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_game(run: Run) -> None:
    spec = run.cfg.get("generator")
    if spec is None:
        raise InputError("gen-game needs a \"generator\" section in the config")
    save_game(run.out / GAME_FILE, random_game(spec, run.seed))


def _solve(run: Run, game: MarkovGame) -> LsbreSolution:
    sol = solve_lsbre(game, run.lsbre())
    write_json(run.out / SOLUTION_FILE, sol.to_dict(game.fingerprint()))
    with open(run.out / SUMMARY_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "s", "residual", "joint_entropy"]
                   + [f"entropy_agent{i}" for i in range(game.n_agents)])
        p = sol.joint.probs
        for t in range(game.horizon):
            ent = marginal_entropies(p[t], game.action_counts)
            for s in range(game.n_states):
                nz = p[t, s][p[t, s] > 0]
                row = [sol.residuals[t, s], float(-np.sum(nz * np.log(nz)))] + list(ent[:, s])
                w.writerow([t, s] + [f"{v:.17g}" for v in row])
    return sol


def cmd_solve(run: Run) -> None:
    game = run.game()
    save_game(run.out / GAME_FILE, game)
    sol = _solve(run, game)
    log.info("solved %d steps x %d states, max residual %.3g",
             game.horizon, game.n_states, float(sol.residuals.max()))


def cmd_gen_demos(run: Run) -> None:
    game = run.game()
    m = run.n_demos()
    sp = run._path(getattr(run.args, "solution", None), "solution", SOLUTION_FILE, required=False)
    sol = _load_solution(sp, game) if sp is not None else solve_lsbre(game, run.lsbre())
    save_game(run.out / GAME_FILE, game)
    save_demos(run.out / DEMOS_FILE, generate_demos(game, sol.joint, m, run.seed))


def _irl_section(run: Run, method: str) -> dict:
    return dict(run.cfg.get("irl", {}).get(method, {}))


def cmd_irl(run: Run) -> None:
    game = run.game()
    demos = load_demos(run._path(getattr(run.args, "demos", None), "demos", DEMOS_FILE))
    _check_fingerprint("demo", demos.fingerprint, game)
    method = run.method()
    lcfg = run.lsbre()
    sec = _irl_section(run, method)
    out = {"method": method, "game_fingerprint": game.fingerprint(), "seed": run.seed}
    if method == "mpl":
        unknown = set(sec) - set(MPL_KEYS) - {"l2"}
        if unknown:
            raise InputError(f"unknown mpl option(s): {', '.join(sorted(unknown))}")
        init = RewardParams.zeros(game, l2=float(sec.pop("l2", 1e-4)))
        report = fit_mpl(game, demos, init, lcfg, **sec)
        out["rewards"] = report.params.rewards()
        write_json(run.out / "fit_report.json", report.to_dict())
    else:
        sec.setdefault("seed", run.seed + 1)
        try:
            acfg = AirlConfig(**sec)
        except TypeError as exc:
            raise InputError(f"bad airl option: {exc}") from exc
        ckpt = run.out / "checkpoints"
        if acfg.checkpoint_every:
            ckpt.mkdir(exist_ok=True)
        state = train(game, demos, acfg, lcfg, checkpoint_dir=ckpt)
        out["rewards"] = state.learned_rewards()
        out["samplers"] = list(state.samplers.probs)
        write_json(run.out / "train_state.json", state.to_dict())
    write_json(run.out / REWARDS_FILE, out)


def _learned_policy(game: MarkovGame, learned: dict, rewards: np.ndarray, cfg: LsbreConfig) -> JointPolicy:
    if "samplers" in learned:
        try:
            return SamplerPolicy(tuple(np.array(p) for p in learned["samplers"])).joint()
        except ValueError as exc:
            raise InputError(f"malformed samplers in rewards file: {exc}") from exc
    return solve_lsbre(game, cfg, rewards=rewards).joint


def cmd_eval(run: Run) -> None:
    game = run.game()
    demos = load_demos(run._path(getattr(run.args, "demos", None), "demos", DEMOS_FILE))
    _check_fingerprint("demo", demos.fingerprint, game)
    rp = run._path(getattr(run.args, "rewards", None), "rewards", REWARDS_FILE)
    learned = read_json(rp)
    if not isinstance(learned, dict) or "rewards" not in learned:
        raise InputError(f"{rp}: not a learned-rewards file")
    _check_fingerprint("rewards", learned.get("game_fingerprint"), game)
    rewards = np.array(learned["rewards"], dtype=float)
    if rewards.shape != game.rewards.shape:
        raise InputError(f"learned rewards have shape {rewards.shape}, game needs {game.rewards.shape}")
    cfg = run.lsbre()
    sp = run._path(getattr(run.args, "solution", None), "solution", SOLUTION_FILE, required=False)
    expert = _load_solution(sp, game).joint if sp is not None else solve_lsbre(game, cfg).joint
    policy = _learned_policy(game, learned, rewards, cfg)
    sets = {"expert": expert, "learned": policy}
    report = MetricReport(
        recovery=reward_recovery_report(game, game.rewards, rewards, demos),
        expected_returns={k: [expected_return(game, p, i) for i in range(game.n_agents)]
                          for k, p in sets.items()},
        cross_play=cross_play(game, sets),
        occupancy_kl=occupancy_kl(game, expert, policy),
        metadata={"seed": run.seed, "demo_seed": demos.seed, "method": learned.get("method"),
                  "game_fingerprint": game.fingerprint(),
                  "lsbre_config": _config_hash(cfg.to_dict()),
                  "n_trajectories": len(demos)},
    )
    report.write_csv(run.out / METRICS_CSV)
    write_json(run.out / METRICS_JSON, report.to_dict())


def cmd_run_all(run: Run) -> None:
    """Solve, sample demos, fit and evaluate inside the output directory."""
    game = run.game()
    save_game(run.out / GAME_FILE, game)
    sol = _solve(run, game)
    save_demos(run.out / DEMOS_FILE, generate_demos(game, sol.joint, run.n_demos(), run.seed))
    # downstream steps read the files just written
    for attr in ("game", "demos", "rewards", "solution"):
        setattr(run.args, attr, None)
    run.cfg = {k: v for k, v in run.cfg.items() if k not in ("game", "generator", "demos_file")}
    cmd_irl(run)
    cmd_eval(run)


COMMANDS = {
    "gen-game": cmd_gen_game,
    "solve": cmd_solve,
    "gen-demos": cmd_gen_demos,
    "irl": cmd_irl,
    "eval": cmd_eval,
    "run-all": cmd_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed (required here or in config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--lambda", dest="lam", type=float, help="rationality parameter")
    common.add_argument("--method", choices=("mpl", "airl"), help="IRL method")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lsbre", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-game", parents=[common], help="write a random game from the config generator")
    p = sub.add_parser("solve", parents=[common], help="solve for the LSBRE policies")
    p.add_argument("--game")
    p = sub.add_parser("gen-demos", parents=[common], help="sample expert demonstrations")
    p.add_argument("--game")
    p.add_argument("--solution")
    p.add_argument("--m", type=int, help="number of trajectories")
    p = sub.add_parser("irl", parents=[common], help="fit rewards from demonstrations")
    p.add_argument("--game")
    p.add_argument("--demos")
    p = sub.add_parser("eval", parents=[common], help="score learned rewards and policies")
    p.add_argument("--game")
    p.add_argument("--demos")
    p.add_argument("--rewards")
    p.add_argument("--solution")
    p = sub.add_parser("run-all", parents=[common], help="full pipeline")
    p.add_argument("--game")
    p.add_argument("--m", type=int, help="number of trajectories")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](Run(args))
    except (InputError, GameValidationError, UndefinedConditionalError, UndefinedMetricError,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConvergenceError, OptimizerAbort, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
