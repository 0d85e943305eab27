from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from builders import make_record  # noqa: E402
from councilsim.config import demo_script_path, load_config  # noqa: E402
from councilsim.deliberation import PromptTemplateSet  # noqa: E402
from councilsim.providers import ScriptedProvider  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: numbered acceptance criterion")


@pytest.fixture(scope="session")
def config():
    return load_config()


@pytest.fixture(scope="session")
def templates():
    return PromptTemplateSet.load()


@pytest.fixture
def scripted():
    return ScriptedProvider.from_file(demo_script_path())


@pytest.fixture(scope="session")
def scenario(config):
    return config.scenario("child_welfare")


@pytest.fixture
def record_factory(config):
    def build(rankings, **kwargs):
        return make_record(config, rankings, **kwargs)

    return build


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, number: int, label: str, limit: float | None):
        self.number, self.label, self.limit = number, label, limit
        self.elapsed = 0.0

    @staticmethod
    def note(line: str) -> None:
        _ACCEPTANCE_LINES.append(line)
        print(line)

    def __enter__(self):
        import time

        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        self.elapsed = time.perf_counter() - self._t0
        slow = self.limit is not None and self.elapsed >= self.limit
        ok = exc_type is None and not slow
        budget = f" (limit {self.limit:g}s)" if self.limit is not None else ""
        note = " over time budget" if exc_type is None and slow else ""
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number}: {self.label} [{self.elapsed:.2f}s{budget}]{note}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        if exc_type is None and slow:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, label, limit_seconds):`` times a block and logs a PASS/FAIL line."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
