import numpy as np
import pytest

from madkit.crops import CellViews
from madkit.distill import (AdamW, DistillConfig, config_from_dict,
                            ema_momentum_schedule, fit_views, init_trainer,
                            load_checkpoint, lr_schedule, mad_loss,
                            save_checkpoint, teacher_probs,
                            teacher_statistics, teacher_temp_schedule,
                            _crop_batches)
from madkit.errors import ConfigError, NumericalAbort, UsageError
from madkit.numcore import backward, parameter, set_finite_checks
from madkit.vit import EncoderConfig


TINY_ENCODER = EncoderConfig(patch_size=8, depth=1, token_dim=16, heads=2,
                             mlp_ratio=2.0, head_depth=2, head_hidden=16,
                             proto_dim=12, channels=3)


def tiny_config(**overrides):
    base = dict(encoder=TINY_ENCODER, epochs=1, batch_size=10,
                steps_per_epoch=2, n_global=2, n_local=1, seed=5)
    base.update(overrides)
    return DistillConfig(**base)


def toy_views(n=30, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:24, :24]
    disk = (((yy - 11.5) ** 2 + (xx - 11.5) ** 2) <= 100.0).astype(float)
    morph = rng.random((n, 24, 24, 3)) * disk[None, :, :, None]
    comp = rng.random((n, 5))
    return CellViews(
        morphology=morph,
        morphology_mask=np.broadcast_to(disk, (n, 24, 24)).copy(),
        environment=rng.random((n, 64, 64, 3)),
        environment_mask=np.ones((n, 64, 64)),
        cell_ids=np.arange(n, dtype=np.int64),
        labels=rng.integers(0, 5, size=n),
        expression=rng.random((n, 8)),
        composition=comp / comp.sum(axis=1, keepdims=True))


class TestSchedules:
    def test_lr_warmup_then_cosine(self):
        assert lr_schedule(0, 100, 1e-3, 10) == pytest.approx(1e-4)
        assert lr_schedule(9, 100, 1e-3, 10) == pytest.approx(1e-3)
        assert lr_schedule(10, 100, 1e-3, 10) == pytest.approx(1e-3)
        mid = lr_schedule(55, 100, 1e-3, 10)
        assert mid == pytest.approx(1e-3 * 0.5 * (1 + np.cos(np.pi * 0.5)))
        assert lr_schedule(100, 100, 1e-3, 10) == pytest.approx(0.0)
        # monotone decay after warmup
        vals = [lr_schedule(s, 100, 1e-3, 10) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_teacher_temp_ramp(self):
        assert teacher_temp_schedule(0, 10, 0.02, 0.04) == pytest.approx(0.02)
        assert teacher_temp_schedule(5, 10, 0.02, 0.04) == pytest.approx(0.03)
        assert teacher_temp_schedule(10, 10, 0.02, 0.04) == 0.04
        assert teacher_temp_schedule(50, 10, 0.02, 0.04) == 0.04
        assert teacher_temp_schedule(0, 0, 0.02, 0.04) == 0.04

    def test_ema_momentum_endpoints(self):
        assert ema_momentum_schedule(0, 100, 0.996) == pytest.approx(0.996)
        assert ema_momentum_schedule(99, 100, 0.996) == pytest.approx(1.0)
        mid = ema_momentum_schedule(50, 101, 0.996)
        assert 0.996 < mid < 1.0
        vals = [ema_momentum_schedule(s, 100, 0.996) for s in range(100)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))


class TestAdamW:
    def adamw_oracle(self, p0, grads, lr, wd, decay):
        # independent reimplementation of the update rule
        b1, b2, eps = 0.9, 0.999, 1e-8
        p = p0.copy()
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            upd = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            if decay:
                upd = upd + wd * p
            p = p - lr * upd
        return p

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=4)
        w = parameter(w0.copy())
        b = parameter(b0.copy())
        opt = AdamW({"w": w, "b": b}, weight_decay=0.1)
        grads_w = [rng.normal(size=(3, 4)) for _ in range(3)]
        grads_b = [rng.normal(size=4) for _ in range(3)]
        for gw, gb in zip(grads_w, grads_b):
            w.grad = gw
            b.grad = gb
            opt.step(0.05)
        np.testing.assert_allclose(
            w.data, self.adamw_oracle(w0, grads_w, 0.05, 0.1, decay=True),
            atol=1e-15)
        np.testing.assert_allclose(
            b.data, self.adamw_oracle(b0, grads_b, 0.05, 0.1, decay=False),
            atol=1e-15)

    def test_decay_skips_vectors(self):
        w = parameter(np.ones((2, 2)))
        b = parameter(np.ones(2))
        opt = AdamW({"w": w, "b": b}, weight_decay=0.5)
        w.grad = np.zeros((2, 2))
        b.grad = np.zeros(2)
        opt.step(0.1)
        assert np.all(w.data < 1.0)
        np.testing.assert_array_equal(b.data, np.ones(2))

    def test_missing_grad_rejected(self):
        w = parameter(np.ones((2, 2)))
        opt = AdamW({"w": w})
        with pytest.raises(UsageError):
            opt.step(0.1)


class TestMadLoss:
    def uniform_inputs(self, views, n_crops, n_global, b=4, k=12):
        student = {v: [parameter(np.zeros((b, k))) for _ in range(n_crops)]
                   for v in views}
        teacher = {v: [np.zeros((b, k)) for _ in range(n_global)]
                   for v in views}
        centers = {v: np.zeros(k) for v in views}
        return student, teacher, centers

    def test_uniform_oracle_two_views(self):
        for alpha in (0.0, 0.5, 1.0):
            s, t, c = self.uniform_inputs(("morphology", "environment"), 3, 2)
            loss = mad_loss(s, t, c, alpha, 0.1, 0.04)
            assert loss.data == pytest.approx((2 + 2 * alpha) * np.log(12),
                                              rel=1e-12)

    def test_uniform_oracle_single_view(self):
        s, t, c = self.uniform_inputs(("morphology",), 3, 2)
        loss = mad_loss(s, t, c, 0.5, 0.1, 0.04)
        assert loss.data == pytest.approx(np.log(12), rel=1e-12)

    def test_teacher_prob_frozen(self):
        p = teacher_probs(np.array([[2.0, 0.0]]), np.zeros(2), 1.0)
        np.testing.assert_allclose(
            p[0], [0.8807970779778823, 0.11920292202211756], atol=1e-15)

    def test_teacher_centering_and_temp(self):
        z = np.array([[1.0, 3.0]])
        center = np.array([1.0, 1.0])
        p = teacher_probs(z, center, 0.5)
        expected = np.exp((z[0] - center) / 0.5)
        expected /= expected.sum()
        np.testing.assert_allclose(p[0], expected, atol=1e-15)

    def test_same_instance_pair_excluded(self):
        # one global, one extra student crop: the only within-view pair is
        # teacher crop 0 -> student crop 1, so student crop 0 gets no grad
        rng = np.random.default_rng(1)
        s = {"morphology": [parameter(rng.normal(size=(3, 6))),
                            parameter(rng.normal(size=(3, 6)))]}
        t = {"morphology": [rng.normal(size=(3, 6))]}
        c = {"morphology": np.zeros(6)}
        loss = mad_loss(s, t, c, 0.0, 0.1, 0.04)
        backward(loss)
        # the excluded crop is not even part of the graph
        assert s["morphology"][0].grad is None
        assert np.any(s["morphology"][1].grad != 0.0)

    def test_cross_terms_reach_other_view(self):
        # one global plus one local per view: within-view pairs only reach
        # student crop 1, so crop 0 is touched by cross terms alone
        def build(rng):
            views = ("morphology", "environment")
            s = {v: [parameter(rng.normal(size=(3, 6))) for _ in range(2)]
                 for v in views}
            t = {v: [rng.normal(size=(3, 6))] for v in views}
            c = {v: np.zeros(6) for v in views}
            return s, t, c

        s, t, c = build(np.random.default_rng(2))
        backward(mad_loss(s, t, c, 0.0, 0.1, 0.04))
        for v in s:
            assert s[v][0].grad is None

        s, t, c = build(np.random.default_rng(2))
        backward(mad_loss(s, t, c, 0.5, 0.1, 0.04))
        for v in s:
            assert np.any(s[v][0].grad != 0.0)

    def test_single_crop_rejected(self):
        s = {"morphology": [parameter(np.zeros((2, 4)))]}
        t = {"morphology": [np.zeros((2, 4))]}
        c = {"morphology": np.zeros(4)}
        with pytest.raises(UsageError):
            mad_loss(s, t, c, 0.0, 0.1, 0.04)

    def test_zero_weight_equals_sum_of_single_views(self):
        rng = np.random.default_rng(3)
        views = ("morphology", "environment")
        logits = {v: [rng.normal(size=(4, 8)) for _ in range(3)]
                  for v in views}
        teach = {v: [rng.normal(size=(4, 8)) for _ in range(2)]
                 for v in views}
        centers = {v: rng.normal(size=8) for v in views}

        def build(vs):
            s = {v: [parameter(logits[v][i].copy()) for i in range(3)]
                 for v in vs}
            t = {v: [teach[v][i].copy() for i in range(2)] for v in vs}
            c = {v: centers[v].copy() for v in vs}
            return s, t, c

        s, t, c = build(views)
        joint = mad_loss(s, t, c, 0.0, 0.1, 0.04)
        singles = []
        for v in views:
            sv, tv, cv = build((v,))
            singles.append(mad_loss(sv, tv, cv, 0.0, 0.1, 0.04).data)
        assert joint.data == singles[0] + singles[1]


class TestTraining:
    def test_smoke_run_shapes_and_history(self):
        views = toy_views()
        config = tiny_config(epochs=2)
        state, history = fit_views(config, views)
        assert state.step == 4
        assert len(history) == 2
        for rec in history:
            assert np.isfinite(rec["loss_mean"])
            assert rec["lr"] > 0
        assert state.embedding_dim() == 32

    def test_deterministic(self):
        views = toy_views()
        config = tiny_config()
        s1, h1 = fit_views(config, views)
        s2, h2 = fit_views(config, views)
        for v in config.views:
            a = s1.students[v].arrays()
            b = s2.students[v].arrays()
            for name in a:
                assert a[name].tobytes() == b[name].tobytes()
        assert h1 == h2

    def test_frozen_teacher_when_momentum_one(self):
        views = toy_views()
        config = tiny_config(ema_start=1.0)
        state, _ = fit_views(config, views)
        init = init_trainer(config, state.sides)
        for v in config.views:
            trained = state.teachers[v].arrays()
            fresh = init.teachers[v].arrays()
            for name in trained:
                assert trained[name].tobytes() == fresh[name].tobytes()
            student = state.students[v].arrays()
            assert any(student[n].tobytes() != trained[n].tobytes()
                       for n in student)

    def test_teacher_moves_otherwise(self):
        views = toy_views()
        config = tiny_config(ema_start=0.9)
        state, _ = fit_views(config, views)
        init = init_trainer(config, state.sides)
        for v in config.views:
            trained = state.teachers[v].arrays()
            fresh = init.teachers[v].arrays()
            assert any(trained[n].tobytes() != fresh[n].tobytes()
                       for n in trained)

    def test_decoupled_joint_run_matches_single_view_runs(self):
        # with the cross-view weight at zero the two views of a joint run
        # must evolve bit for bit like two separate single-view runs
        views = toy_views()
        joint, _ = fit_views(tiny_config(cross_weight=0.0), views)
        for v in ("morphology", "environment"):
            single, _ = fit_views(tiny_config(cross_weight=0.0, views=(v,)),
                                  views)
            js, ss = joint.students[v].arrays(), single.students[v].arrays()
            for name in js:
                assert js[name].tobytes() == ss[name].tobytes(), (v, name)
            jt, st = joint.teachers[v].arrays(), single.teachers[v].arrays()
            for name in jt:
                assert jt[name].tobytes() == st[name].tobytes(), (v, name)
            assert joint.centers[v].tobytes() == single.centers[v].tobytes()

    def test_coupling_changes_training(self):
        views = toy_views()
        decoupled, _ = fit_views(tiny_config(cross_weight=0.0), views)
        coupled, _ = fit_views(tiny_config(cross_weight=0.5), views)
        diffs = []
        for v in ("morphology", "environment"):
            a = decoupled.students[v].arrays()
            b = coupled.students[v].arrays()
            diffs.append(any(a[n].tobytes() != b[n].tobytes() for n in a))
        assert all(diffs)

    def test_views_start_identical_across_geometries(self):
        config = tiny_config()
        state = init_trainer(config, {"morphology": 24, "environment": 64})
        m = state.students["morphology"].arrays()
        e = state.students["environment"].arrays()
        for name in m:
            if name.startswith("pos/"):
                continue
            assert m[name].tobytes() == e[name].tobytes(), name

    def test_crop_batches_deterministic_per_step(self):
        views = toy_views(n=12)
        config = tiny_config()
        idx = np.arange(10)
        a = _crop_batches(config, "morphology", views.morphology,
                          views.morphology_mask, views.cell_ids, idx, 3)
        b = _crop_batches(config, "morphology", views.morphology,
                          views.morphology_mask, views.cell_ids, idx, 3)
        c = _crop_batches(config, "morphology", views.morphology,
                          views.morphology_mask, views.cell_ids, idx, 4)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()
        assert any(x.tobytes() != z.tobytes() for x, z in zip(a, c))

    def test_nan_aborts_with_diagnostics(self):
        views = toy_views()
        views.environment[:] = np.nan
        set_finite_checks(False)
        try:
            with pytest.raises(NumericalAbort) as exc:
                fit_views(tiny_config(), views)
        finally:
            set_finite_checks(True)
        diag = exc.value.diagnostics
        assert diag["step"] == 0
        assert diag["environment/logit_nonfinite"] > 0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            tiny_config(views=("morphology", "morphology"))
        with pytest.raises(ConfigError):
            tiny_config(views=("bogus",))
        with pytest.raises(ConfigError):
            tiny_config(cross_weight=-0.1)
        with pytest.raises(ConfigError):
            tiny_config(n_global=1, n_local=0)
        with pytest.raises(ConfigError):
            tiny_config(student_temp=0.0)

    def test_too_few_cells_rejected(self):
        views = toy_views(n=5)
        with pytest.raises(ConfigError):
            fit_views(tiny_config(batch_size=10), views)
        with pytest.raises(ConfigError):
            fit_views(tiny_config(batch_size=3, steps_per_epoch=50), views)


class TestTeacherStatistics:
    def test_entropy_bounds_and_jensen(self):
        # at a fresh state the center is still zero, so the uncentered
        # prototype bias pattern may dominate and per-cell entropies can be
        # arbitrarily sharp; only the reporting contract is invariant here
        views = toy_views(n=20)
        config = tiny_config()
        state = init_trainer(config, {"morphology": 24, "environment": 64})
        stats = teacher_statistics(state, views, batch_size=8)
        k = config.encoder.proto_dim
        for v in config.views:
            dist = stats[f"{v}/mean_dist_entropy"]
            cell = stats[f"{v}/mean_cell_entropy"]
            assert 0.0 <= cell <= np.log(k) + 1e-12
            assert 0.0 <= dist <= np.log(k) + 1e-12
            # entropy is concave, so the mean distribution is at least as
            # spread as the average per-cell one
            assert dist >= cell - 1e-12

    def test_statistics_after_training_steps(self):
        views = toy_views(n=20)
        config = tiny_config()
        state, _ = fit_views(config, views)
        stats = teacher_statistics(state, views, batch_size=8)
        k = config.encoder.proto_dim
        for v in config.views:
            assert np.isfinite(stats[f"{v}/mean_dist_entropy"])
            assert stats[f"{v}/mean_dist_entropy"] <= np.log(k) + 1e-12


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        views = toy_views()
        config = tiny_config()
        state, _ = fit_views(config, views)
        path = tmp_path / "ckpt.madc"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        assert loaded.config == config
        assert loaded.step == state.step
        for v in config.views:
            for (name, a), (_, b) in zip(
                    state.students[v].named_parameters(),
                    loaded.students[v].named_parameters()):
                assert a.data.tobytes() == b.data.tobytes(), (v, name)
                assert b.requires_grad
            for (name, a), (_, b) in zip(
                    state.teachers[v].named_parameters(),
                    loaded.teachers[v].named_parameters()):
                assert a.data.tobytes() == b.data.tobytes()
                assert not b.requires_grad
            assert state.centers[v].tobytes() == loaded.centers[v].tobytes()

    def test_config_dict_round_trip(self):
        config = tiny_config(cross_weight=0.25, n_local=3)
        from madkit.distill import _config_to_dict
        assert config_from_dict(_config_to_dict(config)) == config

    def test_unknown_config_key_rejected(self):
        from madkit.distill import _config_to_dict
        d = _config_to_dict(tiny_config())
        d["bogus_knob"] = 1
        with pytest.raises(ConfigError):
            config_from_dict(d)
