import warnings

import numpy as np
import pytest

from behaviorseg import synth


# acceptance criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_configure(config):
    warnings.filterwarnings("ignore", message="excluded .* definition-only users")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scenario():
    return synth.load_example_scenario(n_users=2000, unseen_fraction=0.1, dropout=0.1)


@pytest.fixture(scope="session")
def small_cohort(small_scenario):
    return small_scenario.generate(seed=5)


@pytest.fixture(scope="session")
def small_fit(small_cohort):
    from behaviorseg.config import RunConfig
    from behaviorseg.pipeline import fit_model

    cohort, _, _ = small_cohort
    config = RunConfig(k_range=(2, 7), seed=3, definition_period=cohort.periods.definition)
    return fit_model(cohort.definition, config, "sha256:test"), config
