import pytest

from fedshard.datagen import DataConfig, build_clients
from fedshard.engine import RunConfig, run_training

_ACCEPTANCE: list = []


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, name, ok, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0][2:])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {cid} {name}: {detail}")


_CACHE = {}


@pytest.fixture(scope="session")
def trained():
    """Memoised ``(cache, clients)`` for small runs, keyed by (K, R, rounds, merge, seed)."""

    def get(K=8, R=2, fixed_rounds=5, merge="a1", seed=0):
        key = (K, R, fixed_rounds, merge, seed)
        if key not in _CACHE:
            cfg = RunConfig(K=K, R=R, fixed_rounds=fixed_rounds, merge=merge, master_seed=seed,
                            data=DataConfig(seed=seed))
            clients = build_clients(cfg.data, K)
            _CACHE[key] = (run_training(cfg, clients), clients)
        return _CACHE[key]

    return get
