import numpy as np
import pytest

from fusereg.simulation import DgpParams, generate_dataset


@pytest.fixture(scope="session")
def params():
    return DgpParams()


@pytest.fixture(scope="session")
def ds2000(params):
    return generate_dataset(params, 2000, 12345)


@pytest.fixture(scope="session")
def ds500(params):
    return generate_dataset(params, 500, 777)


# Full-size simulation studies are expensive, so every test module shares one
# lazily filled cache per session.
STUDY_SEED = 20240601
STUDY_N = 2000
STUDY_REPS = 500


class StudyCache:
    def __init__(self):
        self._reports = {}
        self._efficiency = None

    def scenario(self, scenario, alpha3=2.0):
        from fusereg.simulation import run_scenario

        key = (scenario, alpha3)
        if key not in self._reports:
            self._reports[key] = run_scenario(scenario, STUDY_N, STUDY_REPS, STUDY_SEED, alpha3=alpha3)
        return self._reports[key]

    def efficiency(self):
        from fusereg.simulation import run_efficiency_study

        if self._efficiency is None:
            self._efficiency = run_efficiency_study(STUDY_N, STUDY_REPS, STUDY_SEED)
        return self._efficiency


@pytest.fixture(scope="session")
def studies():
    return StudyCache()


CRITERIA_ORDER = ("1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "pool")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in CRITERIA_ORDER:
        if cid in results:
            passed, detail = results[cid]
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {cid}: {detail}")
        else:
            terminalreporter.write_line(f"NOT RUN  criterion {cid}")
