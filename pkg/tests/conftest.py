import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from clustertmle.cli import bundled_data_dir
from clustertmle.simulate import TrialSimSpec, synth_trial
from clustertmle.trial_data import load_trial

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bundled_trial():
    return load_trial(bundled_data_dir())


@pytest.fixture(scope="session")
def small_trial():
    """A 12-clinic synthetic trial with deaths, missing VL and exclusions."""
    spec = TrialSimSpec(clusters_per_arm=6, m=30, pi1=0.8, excluded_fraction=0.1,
                        death_fraction=0.2, missing_fraction=0.3, satisfaction_shift=0.5,
                        replicates=1, seed=5)
    return synth_trial(spec, 0)
