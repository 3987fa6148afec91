import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def demo_config(tmp_path):
    """Path to a copy of the demo config writing into ``tmp_path/out``."""
    text = (ROOT / "configs" / "demo.toml").read_text()
    text = text.replace('output_dir = "../out/demo"', 'output_dir = "out"')
    path = tmp_path / "demo.toml"
    path.write_text(text)
    return path


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "").split("::")[-1]
            if "test_acceptance.py" in getattr(rep, "nodeid", "") and rep.when == "call" or (
                outcome == "error" and "test_acceptance.py" in getattr(rep, "nodeid", "")
            ):
                number, _, label = name[len("test_criterion_"):].partition("_")
                lines.append((int(number), f"criterion {number}: {'PASS' if outcome == 'passed' else 'FAIL'}  {label}"))
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
