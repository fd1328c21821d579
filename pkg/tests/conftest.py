import numpy as np
import pytest

from mpmto.benchmarks import build_problem
from mpmto.config import parse_config, shipped_config_text
from mpmto.grid import BackgroundGrid, Rectangle, populate_domain
from mpmto.solver import MaterialParams, MPMModel


@pytest.fixture(autouse=True)
def _output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("MPMTO_OUTPUT", str(tmp_path / "runs"))


def patch_model(cells=(4, 2), h=0.25, ppc=2, lam=1.0, mu=1.5, backend=None,
                clamp=True, min_node_weight=1e-3):
    """Block of ``cells`` particle-filled cells inside a one-cell grid margin."""
    nx, ny = cells
    grid = BackgroundGrid((-2 * h, -2 * h), h, (nx + 4, ny + 4))
    pts = populate_domain(Rectangle(0, 0, nx * h, ny * h), grid, ppc)
    if clamp:
        grid.fix(lambda x, y: x <= 1e-12)
    model = MPMModel(grid, pts, backend=backend, min_node_weight=min_node_weight)
    params = MaterialParams.uniform(len(pts), lam, mu, 1.0)
    return model, params


@pytest.fixture
def patch():
    return patch_model()


def shipped(name, overrides=()):
    return parse_config(shipped_config_text(name), name + ".cfg", list(overrides))


@pytest.fixture(scope="session")
def gradcheck_built():
    return build_problem(shipped("grad_check"))


def tip_load(points, f=(0.0, -0.01)):
    out = np.zeros((len(points), 2))
    out[points.nearest(points.X0.max(axis=0))] = f
    return out


# --------------------------------------------------------------------------
# acceptance report: one line per criterion in the terminal summary

_ACCEPTANCE: list = []


@pytest.fixture(scope="session")
def acceptance():
    def record(tag, ok, detail, known=False):
        word = "PASS" if ok else ("FAIL (known)" if known else "FAIL")
        _ACCEPTANCE.append(f"{word:<13}{tag}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
