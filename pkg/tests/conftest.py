import numpy as np
import pytest

from garmentkit import synth
from garmentkit.garment import CATEGORIES
from garmentkit.mesh import Mesh


@pytest.fixture(scope="session")
def body_model():
    return synth.synth_body_model(0)


@pytest.fixture(scope="session")
def small_body():
    return synth.synth_body_model(0, n_ring=8, n_segments=32)


@pytest.fixture(scope="session")
def templates(body_model):
    return {c: synth.synth_garment_template(c, 0, body_model, n_corpus=20)[0] for c in CATEGORIES}


def grid_mesh(nx=4, ny=3, z=0.0):
    """Planar CCW-triangulated grid in the z plane."""
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="xy")
    v = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)], 1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            faces.append((a, a + 1, a + nx))
            faces.append((a + 1, a + nx + 1, a + nx))
    return Mesh(v, faces)


def icosphere(subdiv=2, radius=1.0, center=(0.0, 0.0, 0.0)):
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(subdiv):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return Mesh(np.asarray(v) * radius + np.asarray(center), np.asarray(f))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_simplex(rng, n, k=24, sparse=True):
    w = rng.random((n, k)) ** 4
    if sparse:
        w[rng.random((n, k)) < 0.7] = 0.0
        w[np.arange(n), rng.integers(k, size=n)] += 0.1
    return w / w.sum(1, keepdims=True)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
