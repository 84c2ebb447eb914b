import numpy as np
import pytest

from mvscene.geometry import Camera
from mvscene.pipeline import LiftingConfig, TeacherConfig, make_scene, make_supervision
from mvscene.synth import SynthConfig


def gradcheck(loss_fn, arrays, analytic, rng, n_probe=30, h=1e-5):
    """Central-difference check of analytic gradients.

    Relative error uses the usual mixed denominator max(|num|, |ana|, 1e-3),
    so exactly-zero gradient coordinates are not penalized for finite
    difference rounding noise. Returns the worst relative error.
    """
    worst = 0.0
    for arr, ana in zip(arrays, analytic):
        flat = arr.ravel()
        g = ana.ravel()
        idxs = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            err = abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-3)
            worst = max(worst, err)
    return worst


def random_camera(rng, width=32, height=24):
    """Random valid pinhole camera with an orthonormal rotation."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Camera(fx=rng.uniform(20, 80), fy=rng.uniform(20, 80),
                  cx=rng.uniform(width * 0.25, width * 0.75),
                  cy=rng.uniform(height * 0.25, height * 0.75),
                  rotation=rot, translation=rng.normal(scale=0.5, size=3),
                  width=width, height=height)


@pytest.fixture(scope="session")
def small_scene():
    """One tiny rendered scene shared by integration-style tests."""
    cfg = SynthConfig(seed=42, n_cameras=6, width=48, height=48,
                      n_objects=(3, 3), articulated_fraction=0.7)
    scene, cameras, frames = make_scene(cfg)
    return cfg, scene, cameras, frames


@pytest.fixture(scope="session")
def small_supervised(small_scene):
    cfg, scene, cameras, frames = small_scene
    bank, labels, corr = make_supervision(
        scene, cameras, frames, TeacherConfig(), LiftingConfig(),
        seed=42, n_classes=cfg.n_classes)
    return cfg, scene, cameras, frames, bank, labels, corr
