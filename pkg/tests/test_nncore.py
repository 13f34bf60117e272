import numpy as np
import pytest

from conftest import central_difference_grad, max_relative_error
from sspslab.nncore import (
    L2NormLayer,
    LinearLayer,
    Mlp,
    NonFiniteGradientError,
    Schedule,
    build_model_pair,
    clone_mlp,
    ema_update,
    forward_full,
    backward_full,
    init_mlp,
    init_optimizer,
    optimizer_step,
    read_checkpoint,
    schedule_value,
    write_checkpoint,
)


def random_mlp(dims, seed=0, l2norm=False):
    return init_mlp(list(dims), np.random.default_rng(seed), l2norm_before_last=l2norm)


class TestForward:
    def test_zero_weights_zero_output(self):
        layer = LinearLayer(np.zeros((4, 3)), np.zeros(3), "relu")
        out, _ = Mlp([layer]).forward(np.random.default_rng(0).normal(size=(5, 4)))
        np.testing.assert_array_equal(out, np.zeros((5, 3)))

    def test_identity_layer_passthrough(self):
        layer = LinearLayer(np.eye(4), np.zeros(4), "identity")
        x = np.random.default_rng(0).normal(size=(3, 4))
        out, _ = Mlp([layer]).forward(x)
        np.testing.assert_array_equal(out, x)

    def test_matrix_chain_oracle(self):
        # straight-line recomputation of a 2-layer net on a 3x4 input
        mlp = random_mlp([4, 5, 2], seed=7)
        x = np.random.default_rng(1).normal(size=(3, 4))
        out, _ = mlp.forward(x)
        w1, b1 = mlp.layers[0].weight, mlp.layers[0].bias
        w2, b2 = mlp.layers[1].weight, mlp.layers[1].bias
        hidden = np.maximum(x @ w1 + b1, 0.0)
        expected = hidden @ w2 + b2
        np.testing.assert_allclose(out, expected, rtol=1e-14)

    def test_dimension_mismatch(self):
        mlp = random_mlp([4, 2])
        with pytest.raises(ValueError):
            mlp.forward(np.zeros((3, 5)))

    def test_bad_chain_rejected(self):
        with pytest.raises(ValueError):
            Mlp([
                LinearLayer(np.zeros((4, 3)), np.zeros(3), "relu"),
                LinearLayer(np.zeros((2, 2)), np.zeros(2), "identity"),
            ])

    def test_batch_equivariance(self):
        mlp = random_mlp([6, 8, 4], seed=3)
        x = np.random.default_rng(2).normal(size=(7, 6))
        perm = np.random.default_rng(3).permutation(7)
        out, _ = mlp.forward(x)
        out_p, _ = mlp.forward(x[perm])
        np.testing.assert_array_equal(out[perm], out_p)

    def test_forward_leaves_parameters_unchanged(self):
        mlp = random_mlp([4, 6, 3], seed=5)
        before = [p.copy() for p in mlp.parameters()]
        out, cache = mlp.forward(np.random.default_rng(0).normal(size=(4, 4)))
        mlp.backward(cache, np.ones_like(out))
        for p, b in zip(mlp.parameters(), before):
            np.testing.assert_array_equal(p, b)


class TestBackward:
    def test_zero_output_grad(self):
        mlp = random_mlp([4, 6, 3], seed=1)
        out, cache = mlp.forward(np.random.default_rng(0).normal(size=(5, 4)))
        grads, gin = mlp.backward(cache, np.zeros_like(out))
        for g in grads:
            np.testing.assert_array_equal(g, np.zeros_like(g))
        np.testing.assert_array_equal(gin, np.zeros((5, 4)))

    def test_single_linear_sum_loss_closed_form(self):
        # loss = sum(outputs) -> dW = column-sums outer pattern: x^T @ 1
        mlp = random_mlp([3, 2], seed=2)
        x = np.random.default_rng(1).normal(size=(4, 3))
        out, cache = mlp.forward(x)
        grads, _ = mlp.backward(cache, np.ones_like(out))
        np.testing.assert_allclose(grads[0], x.T @ np.ones((4, 2)), rtol=1e-14)
        np.testing.assert_allclose(grads[1], np.full(2, 4.0), rtol=1e-14)

    @pytest.mark.parametrize("l2norm", [False, True])
    def test_finite_difference_oracle(self, l2norm):
        # width 12 keeps relu rows away from the all-dead zero-norm corner
        mlp = random_mlp([5, 12, 4], seed=9, l2norm=l2norm)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 5))
        direction = rng.normal(size=(6, 4))

        def loss_value():
            out, _ = mlp.forward(x)
            return float(np.sum(out * direction))

        out, cache = mlp.forward(x)
        grads, gin = mlp.backward(cache, direction)
        for p, g in zip(mlp.parameters(), grads):
            fd = central_difference_grad(loss_value, p)
            assert max_relative_error(g, fd) < 1e-4
        fd_x = central_difference_grad(loss_value, x)
        assert max_relative_error(gin, fd_x) < 1e-4

    def test_stale_cache_rejected(self):
        mlp = random_mlp([4, 3], seed=0)
        other = random_mlp([4, 5, 3], seed=1)
        _, cache = other.forward(np.zeros((2, 4)))
        with pytest.raises(ValueError):
            mlp.backward(cache, np.zeros((2, 3)))


class TestOptimizer:
    def test_zero_lr_no_change(self):
        p = [np.array([1.0, 2.0])]
        state = init_optimizer("adam", p, lr=0.0)
        optimizer_step(state, p, [np.array([0.5, -0.5])], lr=0.0)
        np.testing.assert_array_equal(p[0], [1.0, 2.0])

    def test_sgd_closed_form(self):
        p = [np.array([1.0])]
        state = init_optimizer("sgd_momentum", p, lr=0.1, momentum=0.0)
        optimizer_step(state, p, [np.array([2.0])])
        np.testing.assert_allclose(p[0], [0.8], rtol=1e-15)

    def test_adam_hand_computed(self):
        # scalar recomputation of one Adam update on a 3-vector
        rng = np.random.default_rng(0)
        p0 = rng.normal(size=3)
        g = rng.normal(size=3)
        p = [p0.copy()]
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        state = init_optimizer("adam", p, lr=lr, beta1=b1, beta2=b2, epsilon=eps)
        optimizer_step(state, p, [g.copy()])
        m_hat = ((1 - b1) * g) / (1 - b1)
        v_hat = ((1 - b2) * g**2) / (1 - b2)
        expected = p0 - lr * m_hat / (np.sqrt(v_hat) + eps)
        np.testing.assert_allclose(p[0], expected, rtol=1e-12)

    def test_sgd_weight_decay_as_l2_on_grads(self):
        p = [np.array([2.0])]
        state = init_optimizer("sgd_momentum", p, lr=0.1, momentum=0.0, weight_decay=0.5)
        optimizer_step(state, p, [np.array([0.0])])
        # effective grad = 0 + 0.5*2 = 1 -> p = 2 - 0.1
        np.testing.assert_allclose(p[0], [1.9], rtol=1e-15)

    def test_non_finite_grad_aborts(self):
        p = [np.array([1.0])]
        state = init_optimizer("adam", p, lr=0.1)
        with pytest.raises(NonFiniteGradientError):
            optimizer_step(state, p, [np.array([np.nan])])
        np.testing.assert_array_equal(p[0], [1.0])


class TestEma:
    def test_endpoints(self):
        t, s = [np.array([1.0, 2.0])], [np.array([3.0, 5.0])]
        ema_update(t, s, 1.0)
        np.testing.assert_array_equal(t[0], [1.0, 2.0])
        ema_update(t, s, 0.0)
        np.testing.assert_array_equal(t[0], [3.0, 5.0])

    def test_paper_endpoint_value(self):
        t, s = [np.array([1.0])], [np.array([0.0])]
        ema_update(t, s, 0.996)
        np.testing.assert_allclose(t[0], [0.996], rtol=1e-15)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ema_update([np.zeros(1)], [np.zeros(1)], 1.5)
        with pytest.raises(ValueError):
            ema_update([np.zeros(1)], [np.zeros(1)], -0.1)

    def test_convex_combination(self):
        rng = np.random.default_rng(1)
        t = [rng.normal(size=(4, 3))]
        s = [rng.normal(size=(4, 3))]
        before = t[0].copy()
        ema_update(t, s, 0.7)
        lo = np.minimum(before, s[0]) - 1e-12
        hi = np.maximum(before, s[0]) + 1e-12
        assert np.all(t[0] >= lo) and np.all(t[0] <= hi)


class TestSchedules:
    def test_step_decay_epoch_zero(self):
        s = Schedule(kind="step_decay", base=0.001, total_steps=100, steps_per_epoch=10)
        assert schedule_value(s, 0) == 0.001

    def test_step_decay_five_percent_every_five_epochs(self):
        s = Schedule(kind="step_decay", base=0.001, total_steps=1000, steps_per_epoch=10)
        assert schedule_value(s, 50) == pytest.approx(0.00095, rel=1e-12)

    def test_cosine_momentum_reaches_one_exactly(self):
        s = Schedule(kind="cosine_momentum", base=0.996, end=1.0, total_steps=123)
        assert schedule_value(s, 123) == 1.0
        assert schedule_value(s, 0) == 0.996

    def test_cosine_warmup_ramp_and_decay(self):
        s = Schedule(kind="cosine_with_warmup", base=0.2, total_steps=100, warmup_steps=10)
        assert schedule_value(s, 9) == pytest.approx(0.2)
        assert schedule_value(s, 4) == pytest.approx(0.2 * 0.5)
        assert schedule_value(s, 100) == pytest.approx(0.0, abs=1e-15)

    def test_values_stay_in_range(self):
        for s in [
            Schedule(kind="step_decay", base=0.1, total_steps=500, steps_per_epoch=5),
            Schedule(kind="cosine_with_warmup", base=0.2, total_steps=500, warmup_steps=50),
            Schedule(kind="cosine_momentum", base=0.996, end=1.0, total_steps=500),
        ]:
            values = [schedule_value(s, k) for k in range(501)]
            lo, hi = min(s.base, s.end), max(s.base, s.end)
            assert all(lo - 1e-12 <= v <= hi + 1e-12 for v in values)


class TestModelPair:
    def test_symmetric_shares_parameters_bitwise(self):
        pair = build_model_pair("symmetric", [4, 6, 3], np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(5, 4))
        out_s, _ = pair.student_encoder.forward(x)
        out_t, _ = pair.teacher_encoder.forward(x)
        assert pair.teacher_encoder is pair.student_encoder
        np.testing.assert_array_equal(out_s, out_t)

    def test_student_teacher_decoupled(self):
        pair = build_model_pair(
            "student_teacher", [4, 6, 3], np.random.default_rng(0), projector_dims=[3, 5, 8]
        )
        sp, tp = pair.student_parameters(), pair.teacher_parameters()
        assert len(sp) == len(tp)
        sp[0] += 1.0
        assert not np.array_equal(sp[0], tp[0])

    def test_projector_has_l2norm_stage(self):
        pair = build_model_pair(
            "student_teacher", [4, 6, 3], np.random.default_rng(0), projector_dims=[3, 5, 8]
        )
        kinds = [type(l).__name__ for l in pair.student_projector.layers]
        assert kinds == ["LinearLayer", "L2NormLayer", "LinearLayer"]

    def test_forward_backward_full_through_projector(self):
        pair = build_model_pair(
            "student_teacher", [4, 6, 3], np.random.default_rng(0), projector_dims=[3, 5, 8]
        )
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 4))
        direction = rng.normal(size=(3, 8))

        def loss_value():
            emb, _, _ = forward_full(pair.student_encoder, pair.student_projector, x)
            return float(np.sum(emb * direction))

        emb, reps, cache = forward_full(pair.student_encoder, pair.student_projector, x)
        assert reps.shape == (3, 3) and emb.shape == (3, 8)
        grads = backward_full(pair.student_encoder, pair.student_projector, cache, direction)
        for p, g in zip(pair.student_parameters(), grads):
            fd = central_difference_grad(loss_value, p)
            assert max_relative_error(g, fd) < 1e-4


class TestCheckpointContainer:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = [("a", rng.normal(size=(3, 4))), ("b", rng.normal(size=7))]
        header = {"config": {"x": 1}, "epoch": 3}
        path = tmp_path / "t.ckpt"
        write_checkpoint(path, header, arrays)
        loaded_header, loaded = read_checkpoint(path)
        assert loaded_header["epoch"] == 3
        np.testing.assert_array_equal(loaded["a"], arrays[0][1])
        np.testing.assert_array_equal(loaded["b"], arrays[1][1])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        path.write_bytes(b"garbage")
        with pytest.raises(ValueError):
            read_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        write_checkpoint(path, {}, [("a", np.ones((4, 4)))])
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ValueError):
            read_checkpoint(path)

    def test_clone_is_deep(self):
        mlp = random_mlp([3, 4, 2], seed=1, l2norm=True)
        copy = clone_mlp(mlp)
        copy.parameters()[0][:] = 0.0
        assert not np.array_equal(mlp.parameters()[0], copy.parameters()[0])
