import pytest
from hypothesis import HealthCheck, settings

from gridwatch.fixtures import read_fixture
from gridwatch.harness.scenarios import gateway_model, testbed_model
from gridwatch.rules import generate_rules, load_config

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# property suites that back the acceptance criteria
PROPERTY = settings(max_examples=1000, deadline=None, suppress_health_check=list(HealthCheck))


@pytest.fixture(scope="session")
def testbed_gim():
    return testbed_model()


@pytest.fixture(scope="session")
def testbed_config():
    return load_config(read_fixture("testbed_config.json"))


@pytest.fixture
def sb(testbed_gim, testbed_config):
    return generate_rules(testbed_gim, testbed_config)


@pytest.fixture
def gateway_sb():
    return generate_rules(gateway_model(), load_config(read_fixture("gateway_config.json")))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
