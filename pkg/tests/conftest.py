import numpy as np
import pytest

from coarse2fine import artmodel as am
from coarse2fine import meshkit as mk


@pytest.fixture(scope="session")
def toy_model():
    return am.make_toy_model()


@pytest.fixture(scope="session")
def toy_hierarchy(toy_model):
    return mk.build_hierarchy(toy_model.mesh(), n_levels=3, factor=4)


@pytest.fixture(scope="session")
def big_sphere():
    mesh = mk.uv_sphere(23, 169)
    assert mesh.n_vertices == 3889
    return mesh


@pytest.fixture(scope="session")
def big_hierarchy(big_sphere):
    return mk.build_hierarchy(big_sphere, n_levels=3, factor=4)


@pytest.fixture(scope="session")
def small_synth(toy_model):
    from coarse2fine import datagen as dg

    return dg.synth_generate(toy_model, 12, dg.CameraSpec(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------------- acceptance log

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict per acceptance criterion: acceptance(n, ok, detail)."""

    def record(n, ok, detail):
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
