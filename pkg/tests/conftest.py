import numpy as np
import pytest

from diracqc.constraints import constraint_gallery, project_momenta, project_positions
from diracqc.phase import PhasePoint

GALLERY = {
    "dimer-bond": {},
    "parabola-bead": {},
    "linear-plane": {"normals": [[1.0, 1.0, 0.0], [0.0, 1.0, -1.0]], "offsets": [0.2, -0.1],
                     "masses": [1.0, 2.0, 3.0]},
}


def gallery(name):
    return constraint_gallery(name, **GALLERY.get(name, {}))


def manifold_points(cset, count, seed=0, spread=0.3, beta=1.0):
    """Projected positions near the reference with tangent Gaussian momenta."""
    rng = np.random.default_rng(seed)
    R = cset.reference_point() + spread * rng.normal(size=(3 * count + 4, cset.N))
    R, ok = project_positions(cset, R)
    R = R[ok][:count]
    assert len(R) == count
    P = project_momenta(cset, R, rng.normal(size=R.shape) * np.sqrt(cset.masses / beta))
    return [PhasePoint(r, p, cset.masses) for r, p in zip(R, P)]


@pytest.fixture(params=sorted(GALLERY))
def cset(request):
    return gallery(request.param)


@pytest.fixture
def dimer():
    return gallery("dimer-bond")


@pytest.fixture
def parabola():
    return gallery("parabola-bead")
