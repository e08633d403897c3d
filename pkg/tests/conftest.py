import pytest

from splittrust.scenarios import run_scenario


class ScenarioCache:
    """Runs each shipped scenario at most once per test session."""

    def __init__(self):
        self.results = {}

    def __getitem__(self, name):
        if name not in self.results:
            self.results[name] = run_scenario(name)
        return self.results[name]


@pytest.fixture(scope="session")
def scenarios():
    return ScenarioCache()
