import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split()[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def pinned_run():
    """The pinned default pipeline, run once per session; (RunReport, seconds)."""
    from facemae import pipeline
    from facemae.config import PipelineConfig

    start = time.perf_counter()
    rep = pipeline.run_pipeline(PipelineConfig())
    return rep, time.perf_counter() - start
