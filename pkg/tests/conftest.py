import numpy as np
import pytest

from lsbre.game import MarkovGame, NormalFormGame, joint_actions


def random_markov_game(rng, counts=(2, 2), n_states=2, horizon=2, discount=1.0, shared=False, scale=1.0):
    a = int(np.prod(counts))
    n = len(counts)
    r = rng.uniform(-scale, scale, (n, n_states, a))
    if shared:
        r[:] = r[0]
    p = rng.dirichlet(np.ones(n_states), size=(n_states, a))
    eta = rng.dirichlet(np.ones(n_states))
    return MarkovGame(counts, p, r, eta, horizon, discount)


def coop_identity():
    """Shared identity payoff on 2x2."""
    eye = np.eye(2)
    return NormalFormGame.from_payoff_tensors([eye, eye])


def matching_pennies():
    r = np.array([[1.0, -1.0], [-1.0, 1.0]])
    return NormalFormGame.from_payoff_tensors([r, -r])


def coop_3state(kappa=0.2, pref=0.15):
    counts = (2, 2)
    ja = joint_actions(counts)
    sign = [1, -1, 1]
    pa = [[0, 1], [1, 0], [0, 0]]
    r = np.zeros((3, 4))
    p = np.zeros((3, 4, 3))
    for s in range(3):
        for k, (a1, a2) in enumerate(ja):
            r[s, k] = sign[s] * kappa * (2 * (a1 == a2) - 1) + pref * ((a1 == pa[s][0]) + (a2 == pa[s][1]) - 1)
            p[s, k] = 0.1
            p[s, k, (s + a1 + a2) % 3] += 0.7
    return MarkovGame(counts, p, np.stack([r, r]), [1 / 3] * 3, 5, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
