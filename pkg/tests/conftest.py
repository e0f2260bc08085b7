import numpy as np
import pytest

from varinv.eit import StateEnsemble
from varinv.mesh import build_structured_mesh


@pytest.fixture(scope="session")
def mesh1():
    return build_structured_mesh(1)


@pytest.fixture(scope="session")
def mesh4():
    return build_structured_mesh(4)


@pytest.fixture(scope="session")
def mesh8():
    return build_structured_mesh(8)


def random_instance(mesh, rng, n_exp=2, lo=0.5, hi=3.0):
    sigma = rng.uniform(lo, hi, mesh.n_triangles)
    state = StateEnsemble(rng.standard_normal((n_exp, mesh.n_nodes)),
                          rng.standard_normal((n_exp, mesh.n_nodes)))
    return sigma, state


def assert_minimality(report):
    """T(output) <= T(truth) + 1e-8 (1 + |T(truth)|) whenever the truth was admissible."""
    if report.reference_objective is None:
        return
    ref = report.reference_objective
    assert report.final_objective <= ref + 1e-8 * (1 + abs(ref)), (report.final_objective, ref)
