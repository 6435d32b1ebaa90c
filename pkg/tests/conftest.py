import json

import pytest

from lastmeter.config import RunConfig

# (criterion, line) pairs filled in by test_acceptance.py
ACCEPTANCE_LINES: list[tuple[float, str]] = []


def small_config_dict(seed: int = 7) -> dict:
    """A few-trajectory configuration that runs the whole CLI chain in seconds."""
    d = RunConfig().to_dict()
    d["seed"] = seed
    d["world"]["training_grid"] = {"radial_distances": [0.4, 0.8], "approach_angles": [0.0, 30.0],
                                   "start_orientations": [0.0, 60.0]}
    d["world"]["rollout_grid"] = {"radial_distances": [0.6], "approach_angles": [0.0, -30.0],
                                  "start_orientations": [0.0]}
    d["world"]["heldout_count"] = 2
    d["train"].update({"grid": 2, "box_hidden": 8, "box_dim": 8, "head_hidden": [16], "epochs": 2,
                       "batch_size": 32})
    d["rollout"]["max_steps"] = 30
    return d


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_config_dict()))
    return path


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda item: item[0]):
            terminalreporter.write_line(line)
