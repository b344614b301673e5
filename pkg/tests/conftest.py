import random

import pytest

from cryptdp.lhe import keygen


@pytest.fixture(scope="session")
def keypair():
    return keygen(512, random.Random(20240601))


@pytest.fixture(scope="session")
def other_keypair():
    return keygen(512, random.Random(77))


@pytest.fixture
def rng():
    return random.Random(12345)


@pytest.fixture(scope="session")
def schema():
    from cryptdp.encoding import Attribute, Schema

    return Schema((
        Attribute("Age", tuple(range(1, 9))),
        Attribute("Gender", ("Male", "Female")),
        Attribute("NativeCountry", ("United-States", "Mexico", "India")),
        Attribute("Race", ("White", "Black", "Asian", "Other")),
    ))


def make_rows(schema, n, seed):
    r = random.Random(seed)
    return [tuple(r.choice(a.domain) for a in schema.attributes) for _ in range(n)]


@pytest.fixture
def deployment(keypair):
    """Factory for noise-free in-process deployments; closed after the test."""
    from cryptdp.engine.session import deploy

    made = []

    def factory(budget=1000, seed=7, noise_off=True, **kw):
        dep = deploy(keypair, budget, seed=seed, unsafe_disable_noise=noise_off, **kw)
        made.append(dep)
        return dep

    yield factory
    for dep in made:
        dep.close()


# Template parameters that fit the small test schema.
SMALL_PARAMS = {"P1": {"ranges": 8}, "P5": {"age": 3}, "P7": {"threshold": 2}}


def expand_small(tid, schema, epsilon=1.0):
    from cryptdp.programs import expand

    return expand(tid, schema, epsilon, **SMALL_PARAMS.get(tid, {}))


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
