import numpy as np
import pytest

from nearlight.render import RenderOptions, render_capture_set
from nearlight.solver import SolverConfig, solve
from nearlight.synthetic import standard_camera, standard_lights, standard_scene


@pytest.fixture(scope="session")
def standard_case():
    """Noiseless 12-light render of the sphere-indented dome at 128 x 128, solved once."""
    cam = standard_camera(128)
    surf = standard_scene(cam)
    cap = render_capture_set(surf, standard_lights(12), cam, RenderOptions())
    res = solve(cap, SolverConfig())
    return cam, surf, cap, res


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Records one pass/fail line per acceptance criterion; all lines are
    repeated in the terminal summary."""
    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
