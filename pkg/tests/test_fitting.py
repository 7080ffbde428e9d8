import io

import numpy as np
import pytest

from mash import sampler
from mash.fitting import (Adam, FitConfig, FitReport, IterRecord, REPORT_FIELDS, Y00, _converged,
                          _select_nonempty, fit, initialize, learning_rates, rotvec_between,
                          schedule_weights)
from mash.losses import fitting_loss
from mash.metrics import chamfer_l1
from mash.model import MashModel, mask_angle, rotation_matrix

from conftest import sphere_points


def plane_grid(n=20):
    g = np.linspace(-0.4, 0.4, n)
    x, y = np.meshgrid(g, g)
    return np.stack([x.ravel(), y.ravel(), np.zeros(n * n)], 1)


class TestInitialize:
    def test_c00_from_d_init(self):
        Q = sphere_points(500, np.random.default_rng(1), 0.45)
        m = initialize(Q, FitConfig(M=10, d_init=0.1))
        np.testing.assert_allclose(m.sh_coeffs[:, 0], 0.1 * 2 * np.sqrt(np.pi), rtol=1e-14)
        assert abs(m.sh_coeffs[0, 0] - 0.35449) < 1e-5
        assert np.all(m.sh_coeffs[:, 1:] == 0)

    def test_masks_start_half_open(self):
        Q = sphere_points(500, np.random.default_rng(1), 0.45)
        m = initialize(Q, FitConfig(M=10))
        assert np.all(m.mask_coeffs == 0)
        phi = np.linspace(0, 2 * np.pi, 7)
        np.testing.assert_allclose(mask_angle(m.mask_coeffs[:, None, :], phi[None, :]), np.pi / 2)

    def test_fps_determinism(self):
        Q = sphere_points(800, np.random.default_rng(2), 0.45)
        a = initialize(Q, FitConfig(M=25, seed=7))
        b = initialize(Q, FitConfig(M=25, seed=7))
        c = initialize(Q, FitConfig(M=25, seed=8))
        assert a.flatten().tobytes() == b.flatten().tobytes()
        assert not np.array_equal(a.positions, c.positions)

    def test_anchor_looks_at_source_from_outside(self):
        Q = sphere_points(2000, np.random.default_rng(3), 0.45)
        m = initialize(Q, FitConfig(M=30))
        view = rotation_matrix(m.rotvecs) @ np.array([0.0, 0.0, 1.0])
        radial = m.positions / np.linalg.norm(m.positions, axis=1, keepdims=True)
        # outside the sphere, looking inwards
        assert np.all(np.linalg.norm(m.positions, axis=1) > 0.45)
        assert np.all(np.sum(view * radial, axis=1) < -0.99)

    def test_patch_centre_on_source_point(self):
        Q = plane_grid()
        m = initialize(Q, FitConfig(M=5, d_init=0.05))
        centre = sampler.forward(m, np.arange(5), np.zeros(5), np.zeros(5))
        dist = np.min(np.linalg.norm(centre[:, None] - Q[None], axis=2), axis=1)
        assert np.max(dist) < 1e-12

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="fewer than M"):
            initialize(np.zeros((3, 3)), FitConfig(M=4))

    def test_rotvec_between(self, rng):
        a = rng.normal(size=(50, 3))
        b = rng.normal(size=(50, 3))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        b[0] = -a[0]
        b[1] = a[1]
        R = rotation_matrix(rotvec_between(a, b))
        np.testing.assert_allclose(np.einsum("nij,nj->ni", R, a), b, atol=1e-12)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"M": 0}, {"max_iters": 0}, {"n_dir": 8}, {"lr_sh": 0.0},
                                    {"d_init": -1.0}, {"lr_final": 0.0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            FitConfig(**kw)

    def test_default_learning_rates(self):
        lr = learning_rates(MashModel.zeros(2, 2, 3), FitConfig())
        block = lr[:22]
        assert np.all(block[:6] == 2e-3) and np.all(block[6:] == 5e-3)
        np.testing.assert_array_equal(lr[22:], block)


class TestSchedule:
    cfg = FitConfig(max_iters=2000)

    def test_stage1(self):
        w = np.array([schedule_weights(i, self.cfg, None) for i in range(2000)])
        assert np.all(w[:, 0] == 1.0) and np.all(w[:, 2] == 0.0)
        assert w[0, 1] == 0.5 and w[500, 1] == 1.0 and w[250, 1] == 0.75
        assert np.all(np.diff(w[:, 1]) >= 0)

    def test_stage2(self):
        start = 300
        w = np.array([schedule_weights(i, self.cfg, start) for i in range(start, 2000)])
        assert w[0, 2] == 0.0 and w[250, 2] == 0.5 and w[500, 2] == 1.0
        assert np.all(np.diff(w[:, 2]) >= 0) and np.all((w[:, 2] >= 0) & (w[:, 2] <= 1))

    def test_short_runs_scale_ramps(self):
        cfg = FitConfig(max_iters=100)
        assert schedule_weights(25, cfg, None)[1] == 1.0
        assert schedule_weights(70, cfg, 40)[2] == 1.0 > schedule_weights(69, cfg, 40)[2]


class TestAdam:
    def test_first_step_is_lr(self):
        opt = Adam(np.array([0.1, 0.01]))
        out = opt.step(np.zeros(2), np.array([3.0, -1e-3]))
        np.testing.assert_allclose(out, [-0.1, 0.01], rtol=1e-4)

    def test_minimises_quadratic(self):
        opt = Adam(np.full(3, 0.05))
        x = np.array([1.0, -2.0, 0.5])
        for _ in range(2000):
            x = opt.step(x, 2 * x)
        assert np.max(np.abs(x)) < 1e-3


class TestConvergence:
    def test_needs_two_windows(self):
        assert not _converged([1.0] * 99, [(1, 1, 1)] * 99, 50, 1e-4)
        assert _converged([1.0] * 100, [(1, 1, 1)] * 100, 50, 1e-4)

    def test_ramping_weights_block(self):
        w = [(1, 1, 0.5)] + [(1, 1, 1)] * 99
        assert not _converged([1.0] * 100, w, 50, 1e-4)

    def test_relative_and_absolute(self):
        L = [1.0] * 50 + [1.0 + 2e-4] * 50
        assert not _converged(L, [(1, 1, 1)] * 100, 50, 1e-4)
        L = [1e-4] * 50 + [1e-4 + 5e-7] * 50
        assert _converged(L, [(1, 1, 1)] * 100, 50, 1e-4, atol=1e-6)


class TestReport:
    def test_csv(self):
        rep = FitReport([IterRecord(0, 0.1, 0.2, 0.0, 0.2, 1.0, 0.5, 0.0, 0.25, 1, 3.14159),
                         IterRecord(1, 0.05, 0.1, 0.01, 0.11, 1.0, 0.75, 0.5, 0.9, 2, 2.0)])
        lines = rep.to_csv().splitlines()
        assert lines[0] == ",".join(REPORT_FIELDS)
        assert lines[1] == "0,0.1,0.2,0.0,0.2,1.0,0.5,0.0,0.25,1,3.142"
        buf = io.StringIO()
        rep.write_csv(buf)
        assert buf.getvalue() == rep.to_csv()
        np.testing.assert_array_equal(rep.column("stage"), [1, 2])


def test_empty_mask_reinflation():
    m = MashModel.zeros(3, 1, 1, n_dir=64)
    m.mask_coeffs[1, 0] = -50.0
    rep = FitReport()
    rays = _select_nonempty(m, sampler.fibonacci_presample(64), rep)
    assert np.all(rays.counts(3) > 0)
    assert rep.mask_reinflations > 0
    assert m.mask_coeffs[1, 0] == -50.0 + 0.5 * rep.mask_reinflations
    assert m.mask_coeffs[0, 0] == 0.0


def test_fit_is_deterministic():
    Q = sphere_points(600, np.random.default_rng(4), 0.45)
    cfg = FitConfig(M=6, n_dir=64, max_iters=30, seed=3)
    a, ra = fit(Q, cfg)
    b, rb = fit(Q, cfg)
    assert a.flatten().tobytes() == b.flatten().tobytes()
    assert ra.column("L").tobytes() == rb.column("L").tobytes()


def test_callback_and_report_fields():
    Q = sphere_points(400, np.random.default_rng(5), 0.45)
    seen = []
    _, rep = fit(Q, FitConfig(M=4, n_dir=64, max_iters=12), callback=seen.append)
    assert [r.iteration for r in seen] == list(range(12)) == list(rep.column("iteration"))
    for r in rep.records:
        assert r.L == pytest.approx(r.wf * r.L_f + r.wc * r.L_c + r.wb * r.L_b, rel=1e-12)
        assert 0.0 <= r.coverage <= 1.0 and r.ms >= 0


def test_loss_decreases_on_sphere():
    Q = sphere_points(1000, np.random.default_rng(6), 0.45)
    _, rep = fit(Q, FitConfig(M=8, n_dir=100, max_iters=200))
    L_f = rep.column("L_f")
    assert L_f[-20:].mean() < 0.8 * L_f[0]
    assert rep.stage2_start is not None and rep.records[-1].coverage >= 0.8


def test_degenerate_point_target():
    # a single repeated point; constant-rate Adam jitters at the lr scale, so decay it
    Q = np.tile([0.1, -0.2, 0.3], (64, 1))
    model, rep = fit(Q, FitConfig(M=1, n_dir=100, max_iters=1000, lr_final=0.01))
    P = sampler.sample_model(model).points
    assert rep.converged
    assert len(P) > 0 and np.max(np.linalg.norm(P - Q[0], axis=1)) < 1e-3




@pytest.mark.slow
def test_sphere_fit_reaches_sampling_floor(sphere_fit):
    """L_f against the 4096 sparse targets cannot beat the value of the exact surface.

    Oracle: the exact (densely sampled) sphere scored against the same targets.
    """
    rep, Q, tr = sphere_fit["report"], sphere_fit["Q"], sphere_fit["transform"]
    exact = tr.apply(sphere_points(200_000, np.random.default_rng(1)))
    floor = fitting_loss(exact, Q)
    assert len(rep.records) <= 1000
    assert 1000 * floor > 5          # the literal "L_f x 1000 < 5" is below this floor
    assert rep.records[-1].L_f < 1.05 * floor
    dense = sphere_fit["model"].copy()
    dense.n_dir = 8000
    assert chamfer_l1(sampler.sample_model(dense).points, exact) * 1000 < 5
