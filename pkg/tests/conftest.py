from __future__ import annotations

import copy

import pytest

TINY = {
    "seed": 5,
    "patch_size": 32,
    "corpus": {"n_train_pos": 8, "n_train_neg": 8, "n_test_pos": 4, "n_test_neg": 4,
               "width": 128, "height": 96},
    "preprocess": {"thumbnail_size": 32},
    "backbone": {"input_size": 32, "widths": [8, 16]},
    "optimizer": {"epochs": 1, "batch_size": 32},
    "emipld": {"max_iterations": 2, "warm_start_epochs": 1, "val_fraction": 0.0, "s0": 0.9},
}


@pytest.fixture
def tiny_raw():
    """A config small enough to train in a few seconds on one core."""
    return copy.deepcopy(TINY)


# Acceptance criteria report one line each at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
