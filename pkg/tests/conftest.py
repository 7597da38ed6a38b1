import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rlst.network import RLSTNetConfig, init_network  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_net(layers=2, hidden=8, emb=4, src=9, trg=9, seed=0, dropout=0.0, precision="float64"):
    cfg = RLSTNetConfig(src_vocab_size=src, trg_vocab_size=trg, emb_dim=emb, hidden_dim=hidden,
                        num_gru_layers=layers, dropout_in=dropout, dropout_out=dropout,
                        precision=precision)
    return init_network(cfg, seed=seed)


def zero_net(**kw):
    net = small_net(**kw)
    for p in net.params.values():
        p.value[...] = 0.0
    return net


def random_episode(rng, vocab=9, max_x=6, max_y=6):
    from rlst.episode import Episode
    nx = int(rng.integers(0, max_x))
    ny = int(rng.integers(0, max_y))
    x = list(rng.integers(4, vocab, size=nx)) + [2]
    y = list(rng.integers(4, vocab, size=ny)) + [2]
    return Episode(x, y)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE = {}
CRITERIA = tuple(f"A{k}" for k in range(1, 10))


def record(criterion, ok, detail):
    """Note a criterion's outcome for the end-of-run summary, then assert it."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    assert ok, f"{criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in str(r.nodeid)
              for reps in terminalreporter.stats.values() for r in reps
              if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for c in CRITERIA:
        ok, detail = ACCEPTANCE.get(c, (False, "not run or errored before a verdict"))
        terminalreporter.write_line(f"{c} {'PASS' if ok else 'FAIL'}  {detail}")
