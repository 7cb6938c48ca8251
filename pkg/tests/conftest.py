from dataclasses import dataclass
from pathlib import Path

import pytest

from priorquant.cli import cmd_simulate, cmd_train

TOY_SEED = 0


@dataclass
class ToyRun:
    sim_dir: Path
    manifest: Path
    train_dir: Path
    checkpoint: Path
    rows: list
    net: object


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> ToyRun:
    """16 simulated 64x64 pairs and a 200-step training run at the pinned seed."""
    root = tmp_path_factory.mktemp("toy")
    manifest = cmd_simulate(None, root / "sim", seed=TOY_SEED)
    net, rows = cmd_train(manifest, None, root / "train", seed=TOY_SEED)
    return ToyRun(root / "sim", manifest, root / "train", root / "train" / "checkpoint", rows, net)


# ------------------------------------------------------ acceptance summary

_criteria: dict[int, tuple[str, bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    number, title = marker.args
    if rep.when == "call" or rep.failed:
        _criteria[number] = (title, rep.passed and not rep.failed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")


def pytest_collection_modifyitems(items):
    for item in items:
        if "toy_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
