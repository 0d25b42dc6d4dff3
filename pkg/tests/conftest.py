import sys
from pathlib import Path

# Make oracles.py importable from any test module.
sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    # Echo the acceptance scoreboard collected during the run (if any).
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "SCOREBOARD", None)
    if lines:
        terminalreporter.section("acceptance scoreboard")
        for line in lines:
            terminalreporter.line(line)
