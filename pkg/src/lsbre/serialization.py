"""Deterministic text serialization.

Floats are written with 17 significant digits so every double round-trips
exactly, and key order is preserved, so equal inputs give byte-identical
files.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import GameValidationError
from .game import DemoSet, MarkovGame


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    text = f"{x:.17g}"
    if "e" not in text and "." not in text and "inf" not in text:
        text += ".0"
    return text


def _encode(obj, indent, level):
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        obj = int(obj)
    if obj is None or isinstance(obj, (bool, str)):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, (list, tuple)):
        items = [_encode(v, indent, level + 1) for v in obj]
        # numeric leaves stay on one line
        if indent is None or all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(items) + "]"
        pad = " " * (indent * (level + 1))
        return "[\n" + ",\n".join(pad + v for v in items) + "\n" + " " * (indent * level) + "]"
    if isinstance(obj, dict):
        items = [f"{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        if indent is None:
            return "{" + ", ".join(items) + "}"
        pad = " " * (indent * (level + 1))
        return "{\n" + ",\n".join(pad + v for v in items) + "\n" + " " * (indent * level) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int | None = 1) -> str:
    return _encode(obj, indent, 0)


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path):
    """Parse JSON, turning syntax errors into a line-level validation error."""
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise GameValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def save_game(path, game: MarkovGame) -> None:
    write_json(path, game.to_dict())


def load_game(path) -> MarkovGame:
    data = read_json(path)
    if not isinstance(data, dict):
        raise GameValidationError(f"{path}: top-level value must be an object")
    return MarkovGame.from_dict(data)


def save_demos(path, demos: DemoSet) -> None:
    header = {"seed": demos.seed, "fingerprint": demos.fingerprint,
              "n_trajectories": len(demos), "horizon": int(demos.states.shape[1]),
              "n_agents": int(demos.actions.shape[2])}
    lines = [dumps(header, indent=None)]
    for s_row, a_row in zip(demos.states, demos.actions):
        steps = [[int(s), [int(a) for a in acts]] for s, acts in zip(s_row, a_row)]
        lines.append(dumps(steps, indent=None))
    Path(path).write_text("\n".join(lines) + "\n")


def load_demos(path) -> DemoSet:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise GameValidationError(f"{path}: empty demo file")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise GameValidationError(f"{path}: malformed JSON line: {exc.msg}") from exc
    if not isinstance(header, dict) or "fingerprint" not in header or "seed" not in header:
        raise GameValidationError(f"{path}:1: header must carry seed and fingerprint")
    if not rows:
        raise GameValidationError(f"{path}: no trajectories")
    try:
        states = [[step[0] for step in row] for row in rows]
        actions = [[step[1] for step in row] for row in rows]
        return DemoSet(np.array(states), np.array(actions), int(header["seed"]),
                       str(header["fingerprint"]))
    except (TypeError, IndexError, ValueError) as exc:
        raise GameValidationError(f"{path}: malformed trajectory line: {exc}") from exc
