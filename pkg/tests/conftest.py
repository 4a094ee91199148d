import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
