import itertools

import numpy as np
import pytest

from fedshap.nn import Dataset, init_params, loss_and_accuracy, model_average


def random_game(rng, players):
    """Table game with an independent random value for every coalition."""
    table = {frozenset(): float(rng.normal())}
    for size in range(1, len(players) + 1):
        for c in itertools.combinations(players, size):
            table[frozenset(c)] = float(rng.normal())
    return table


def fl_utility(rng, m, dim=4, classes=3, n_val=30):
    """Negative validation loss of size-weighted averages of random small models."""
    layer_dims = (dim, 5, classes)
    val = Dataset(rng.normal(size=(n_val, dim)), rng.integers(0, classes, n_val), classes)
    server = init_params(layer_dims, rng)
    updates = {
        k: (int(rng.integers(5, 50)), server.with_values(server.values + rng.normal(0, 0.5, len(server))))
        for k in range(m)
    }

    def u(subset):
        if not subset:
            return -loss_and_accuracy(server, val)[0]
        return -loss_and_accuracy(model_average({k: updates[k] for k in subset}), val)[0]

    return u


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Report one acceptance criterion as a PASS/FAIL line and return the verdict."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def report(number, title, ok, detail="", status=None):
        status = status or ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2} {status}  {title}"
        if detail:
            line += f"  [{detail}]"
        print(line)
        lines.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
