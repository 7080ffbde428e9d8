import numpy as np
import pytest

from mash.model import MashModel


def sphere_points(n, rng, radius=1.0):
    x = rng.normal(size=(n, 3))
    return radius * x / np.linalg.norm(x, axis=1, keepdims=True)


def cube_points(n, rng, half=0.5):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.zeros((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [i for i in range(3) if i != a]
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return half * pts


def torus_points(n, rng, major=1.0, minor=0.4):
    """Area-uniform torus samples by rejection on the tube angle."""
    chunks, total = [], 0
    while total < n:
        u = rng.uniform(0.0, 2 * np.pi, 2 * n)
        v = rng.uniform(0.0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0.0, 1.0, 2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        chunks.append(np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1))
        total += len(u)
    return np.concatenate(chunks)[:n]


def random_model(rng, M=4, L=2, K=3, n_dir=100, c0=1.0):
    """Well-conditioned random model: positive dominant C_0^0, moderate masks."""
    sh = rng.normal(scale=0.15, size=(M, (L + 1) ** 2))
    sh[:, 0] += c0
    return MashModel(rng.normal(size=(M, 3)), rng.normal(size=(M, 3)), sh,
                     rng.normal(scale=0.4, size=(M, 2 * K + 1)), L, K, n_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sphere_fit():
    """Unit sphere, 4096 points, M=20, at most 1000 iterations; shared by the slow tests."""
    import time

    from mash.fitting import FitConfig, fit
    from mash.io import normalize

    raw = sphere_points(4096, np.random.default_rng(0))
    Q, tr = normalize(raw)
    t0 = time.perf_counter()
    model, report = fit(Q, FitConfig(M=20, max_iters=1000, seed=0))
    return {"raw": raw, "Q": Q, "transform": tr, "model": model, "report": report,
            "seconds": time.perf_counter() - t0}
