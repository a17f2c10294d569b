import pytest

from fedgan_trust.modmath import Prng
from fedgan_trust.phe import keygen, keypair_from_primes


@pytest.fixture(scope="session")
def tiny_kp():
    return keypair_from_primes(3, 5)


@pytest.fixture(scope="session")
def kp64():
    return keygen(64, Prng(11, "test-key"))


@pytest.fixture(scope="session")
def kp128():
    return keygen(128, Prng(12, "test-key"))


@pytest.fixture
def rng():
    return Prng(2024, "test")


def small_config(seed=1, faults=(), **overrides):
    """A fast consortium run: small networks, short merge interval, loose stop threshold."""
    from fedgan_trust.registry import SimulationConfig

    d = {"members": 3, "merge_interval": 3, "min_merge_rounds": 2, "gen_loss_threshold": 5.0,
         "key_bits": 64, "gan": {"noise_dim": 4, "hidden": 8, "batch_size": 16},
         "seed": seed, "max_iterations": 60, "dataset_rows": 50, "faults": list(faults)}
    d.update(overrides)
    return SimulationConfig.from_dict(d)


@pytest.fixture(scope="session")
def small_run():
    from fedgan_trust.registry import run_simulation

    return run_simulation(small_config(), test_mode=True)


# criterion number -> (passed, title, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
