import numpy as np
import pytest

from conftest import check_grads_fd
from kronrnn.cells import make_cell
from kronrnn.kron import KroneckerMatrix
from kronrnn.tasks import TaskBatch, gen_copy_batch
from kronrnn.training import (Adam, RmsProp, bptt_loss_and_grads,
                              clip_gradients, cross_entropy,
                              global_grad_norm, make_optimizer, mse,
                              plateau_decay, tree_leaves)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros(8), 3)
        assert loss == pytest.approx(np.log(8.0), rel=1e-12)
        assert loss == pytest.approx(2.0794, abs=1e-4)

    def test_saturated_target(self):
        logits = np.zeros(5)
        logits[2] = 50.0
        loss, _ = cross_entropy(logits, 2)
        assert loss <= 1e-9

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal(6)
        loss, grad = cross_entropy(logits, 4)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        onehot = np.zeros(6)
        onehot[4] = 1.0
        assert np.allclose(grad, p - onehot, atol=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal(7)
        _, grad = cross_entropy(logits, 2)
        eps = 1e-6
        for i in range(7):
            logits[i] += eps
            lp, _ = cross_entropy(logits, 2)
            logits[i] -= 2 * eps
            lm, _ = cross_entropy(logits, 2)
            logits[i] += eps
            fd = (lp - lm) / (2 * eps)
            assert abs(grad[i] - fd) <= 1e-8

    def test_batched_rows(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((4, 5))
        targets = np.array([0, 1, 2, 3])
        losses, grads = cross_entropy(logits, targets)
        for b in range(4):
            l1, g1 = cross_entropy(logits[b], int(targets[b]))
            assert losses[b] == pytest.approx(l1, rel=1e-12)
            assert np.allclose(grads[b], g1)


class TestMse:
    def test_exact_match(self):
        loss, grad = mse(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_scalar_case(self):
        loss, grad = mse(0.0, 1.0)
        assert loss == pytest.approx(1.0)
        assert grad[0] == pytest.approx(-2.0)

    def test_definition_oracle(self):
        rng = np.random.default_rng(3)
        pred = rng.standard_normal(9)
        target = rng.standard_normal(9)
        loss, grad = mse(pred, target)
        assert loss == pytest.approx(np.mean((pred - target) ** 2), rel=1e-12)
        assert np.allclose(grad, 2 * (pred - target) / 9)

    def test_shape_mismatch(self):
        from kronrnn.errors import ShapeMismatchError
        with pytest.raises(ShapeMismatchError):
            mse(np.zeros(3), np.zeros(4))


class TestRmsProp:
    def test_zero_grad_keeps_params(self):
        params = {"a": np.ones(3)}
        opt = RmsProp(params, learning_rate=1e-3)
        opt.step(params, {"a": np.zeros(3)})
        assert np.array_equal(params["a"], np.ones(3))

    def test_first_step_hand_value(self):
        # v = 0.1, delta = -1e-3 / (sqrt(0.1) + 1e-8)
        params = {"a": np.zeros(1)}
        opt = RmsProp(params, learning_rate=1e-3, decay=0.9, epsilon=1e-8)
        opt.step(params, {"a": np.ones(1)})
        want = -1e-3 / (np.sqrt(0.1) + 1e-8)
        assert params["a"][0] == pytest.approx(want, rel=1e-12)
        assert params["a"][0] == pytest.approx(-3.1623e-3, abs=1e-7)

    def test_repeated_steps_shrink(self):
        params = {"a": np.zeros(1)}
        opt = RmsProp(params, learning_rate=1e-3)
        opt.step(params, {"a": np.ones(1)})
        first = abs(params["a"][0])
        before = params["a"][0]
        opt.step(params, {"a": np.ones(1)})
        second = abs(params["a"][0] - before)
        assert second < first

    def test_complex_params_update_split_real(self):
        params = {"a": np.array([1.0 + 1.0j])}
        opt = RmsProp(params, learning_rate=1e-3)
        opt.step(params, {"a": np.array([1.0 + 0.0j])})  # only re part moves
        assert params["a"][0].imag == 1.0
        assert params["a"][0].real < 1.0

    def test_step_counter(self):
        params = {"a": np.zeros(1)}
        opt = RmsProp(params)
        for k in range(3):
            opt.step(params, {"a": np.ones(1)})
            assert opt.step_count == k + 1


class TestAdam:
    def test_zero_grad_keeps_params(self):
        params = {"a": np.full(2, 5.0)}
        opt = Adam(params)
        for _ in range(4):
            opt.step(params, {"a": np.zeros(2)})
        assert np.array_equal(params["a"], np.full(2, 5.0))

    def test_first_step_magnitude_is_lr(self):
        # bias correction makes the first update ~lr regardless of g scale
        for g in (1e-4, 1.0, 37.0):
            params = {"a": np.zeros(1)}
            opt = Adam(params, learning_rate=1e-3)
            opt.step(params, {"a": np.full(1, g)})
            assert abs(params["a"][0]) == pytest.approx(1e-3, rel=1e-4)

    def test_determinism(self):
        def run():
            params = {"a": np.zeros(4)}
            opt = Adam(params)
            rng = np.random.default_rng(7)
            for _ in range(10):
                opt.step(params, {"a": rng.standard_normal(4)})
            return params["a"].copy()
        assert np.array_equal(run(), run())


class TestPlateau:
    def test_improving_keeps_lr(self):
        assert plateau_decay([2.0, 1.5], 1e-3) == 1e-3

    def test_stall_decays(self):
        assert plateau_decay([1.0, 1.2], 1e-3, 0.3) == pytest.approx(3e-4)

    def test_two_stalls(self):
        lr = 1e-3
        lr = plateau_decay([1.0, 1.2], lr, 0.3)
        lr = plateau_decay([1.0, 1.2, 1.1], lr, 0.3)
        assert lr == pytest.approx(9e-5)

    def test_single_epoch_no_decay(self):
        assert plateau_decay([5.0], 1e-3) == 1e-3


class TestClip:
    def test_identity_inside_ball(self):
        grads = {"a": np.array([0.3, 0.4])}   # norm 0.5
        out = clip_gradients(grads, 5.0)
        assert np.array_equal(out["a"], grads["a"])

    def test_rescales_to_threshold(self):
        grads = {"a": np.array([6.0, 8.0])}   # norm 10
        out = clip_gradients(grads, 5.0)
        assert global_grad_norm(out) == pytest.approx(5.0)
        assert np.allclose(out["a"], [3.0, 4.0])

    def test_direction_preserved(self):
        rng = np.random.default_rng(4)
        grads = {"a": rng.standard_normal(5), "b": [rng.standard_normal((2, 2))]}
        out = clip_gradients(grads, 1e-3)
        for (_, g0), (_, g1) in zip(tree_leaves(grads), tree_leaves(out)):
            d0 = g0 / np.linalg.norm(g0)
            d1 = g1 / np.linalg.norm(g1)
            assert np.allclose(d0, d1, atol=1e-12)


def _tiny_batch(kind, rng, b=3, t=4, m=2):
    if kind == "ce":
        targets = rng.integers(0, m, size=(b, t))
        mask = rng.random((b, t)) < 0.7
        mask[0, 0] = True   # keep at least one position
        return TaskBatch(inputs=rng.standard_normal((b, t, 3)),
                         targets=targets, loss_mask=mask, loss_kind="ce")
    mask = np.zeros((b, t), dtype=bool)
    mask[:, -1] = True
    return TaskBatch(inputs=rng.standard_normal((b, t, 3)),
                     targets=rng.standard_normal(b), loss_mask=mask,
                     loss_kind="mse")


CELLS = {
    "rnn": lambda m: make_cell("rnn", 6, 3, m),
    "kru": lambda m: make_cell("kru", 8, 3, m, factor_shapes=[(2, 2)] * 3),
    "lstm": lambda m: make_cell("lstm", 4, 3, m),
    "kru-lstm": lambda m: make_cell("kru-lstm", 4, 3, m,
                                    factor_shapes=[(2, 2)] * 2),
}


class TestBptt:
    def test_single_step_reduces_to_cell_backward(self):
        cell = CELLS["rnn"](2)
        params = cell.init_params(0)
        rng = np.random.default_rng(1)
        batch = _tiny_batch("ce", rng, b=3, t=1)
        batch.loss_mask[:] = True
        res = bptt_loss_and_grads(cell, params, batch)
        # reproduce by hand: one step + head + CE
        h0 = cell.zero_state(3)
        h, cache = cell.step_with_cache(params, h0, batch.inputs[:, 0])
        logits = cell.output_head(params, h)
        losses, dlogits = cross_entropy(logits, batch.targets[:, 0])
        assert res.task_loss == pytest.approx(float(losses.mean()), rel=1e-12)
        gh = (dlogits / 3) @ params["v"]
        step_grads, _ = cell.step_backward(params, cache, gh)
        for name in ("u", "w", "b"):
            assert np.allclose(res.grads[name], step_grads[name], atol=1e-12)

    @pytest.mark.parametrize("model", list(CELLS))
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full_finite_difference(self, model, seed):
        m = 2
        cell = CELLS[model](m)
        params = cell.init_params(seed)
        rng = np.random.default_rng(40 + seed)
        if "beta" in params:
            params["beta"] = rng.uniform(-0.3, 0.3, cell.n)
        amplitude = 1e-2 if model in ("rnn", "kru") else 0.0
        batch = _tiny_batch("ce", rng, b=3, t=5, m=m)
        res = bptt_loss_and_grads(cell, params, batch,
                                  unitary_amplitude=amplitude)

        def loss():
            r = bptt_loss_and_grads(cell, params, batch,
                                    unitary_amplitude=amplitude)
            return r.loss

        check_grads_fd(params, res.grads, loss, rtol=1e-5, atol=1e-7,
                       rng=rng, max_entries=5)

    def test_mse_task_finite_difference(self):
        cell = CELLS["kru"](1)
        params = cell.init_params(2)
        rng = np.random.default_rng(3)
        batch = _tiny_batch("mse", rng, b=3, t=4, m=1)
        res = bptt_loss_and_grads(cell, params, batch)

        def loss():
            return bptt_loss_and_grads(cell, params, batch).loss

        check_grads_fd(params, res.grads, loss, rtol=1e-5, atol=1e-7, rng=rng,
                       max_entries=5)

    def test_masked_positions_contribute_nothing(self):
        cell = CELLS["rnn"](2)
        params = cell.init_params(0)
        rng = np.random.default_rng(4)
        batch = _tiny_batch("ce", rng, b=2, t=5)
        res1 = bptt_loss_and_grads(cell, params, batch)
        # poison the targets at masked-out positions
        targets2 = batch.targets.copy()
        targets2[~batch.loss_mask] = (targets2[~batch.loss_mask] + 1) % 2
        batch2 = TaskBatch(inputs=batch.inputs, targets=targets2,
                           loss_mask=batch.loss_mask, loss_kind="ce")
        res2 = bptt_loss_and_grads(cell, params, batch2)
        assert res1.loss == res2.loss
        for (_, g1), (_, g2) in zip(tree_leaves(res1.grads),
                                    tree_leaves(res2.grads)):
            assert np.array_equal(g1, g2)

    def test_penalty_skipped_for_gated_cells(self):
        cell = CELLS["lstm"](2)
        params = cell.init_params(0)
        rng = np.random.default_rng(5)
        batch = _tiny_batch("ce", rng)
        res = bptt_loss_and_grads(cell, params, batch, unitary_amplitude=0.5)
        assert res.penalty == 0.0
        res2 = bptt_loss_and_grads(cell, params, batch, unitary_amplitude=0.5,
                                   penalty_override=True)
        assert res2.penalty > 0.0

    def test_divergence_raises(self):
        from kronrnn.errors import DivergenceError
        cell = CELLS["rnn"](2)
        params = cell.init_params(0)
        params["v"][:] = np.inf
        rng = np.random.default_rng(6)
        batch = _tiny_batch("ce", rng)
        with np.errstate(invalid="ignore"):
            with pytest.raises(DivergenceError):
                bptt_loss_and_grads(cell, params, batch)


class TestPenaltyDrivesUnitarity:
    def test_residual_monotone_under_penalty_only_steps(self):
        from kronrnn.diagnostics import unitarity_residual
        rng = np.random.default_rng(7)
        factors = [rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
                   for _ in range(3)]
        params = {"w": factors}
        opt = make_optimizer(params, "rmsprop", learning_rate=1e-3)
        amplitude = 1.0
        last = unitarity_residual(KroneckerMatrix(params["w"]))
        assert last > 0.1   # genuinely non-unitary start
        for _ in range(100):
            from kronrnn.kron import soft_unitary_grad
            grads = {"w": soft_unitary_grad(KroneckerMatrix(params["w"]),
                                            amplitude)}
            opt.step(params, grads)
            now = unitarity_residual(KroneckerMatrix(params["w"]))
            assert now <= last + 1e-12
            last = now


class TestDeterminism:
    def test_identical_loss_trajectory(self):
        def run():
            cell = make_cell("kru", 8, 10, 10, factor_shapes=[(2, 2)] * 3)
            params = cell.init_params(3)
            opt = make_optimizer(params, "rmsprop", learning_rate=1e-3)
            losses = []
            for i in range(5):
                batch = gen_copy_batch(6, 4, seed=100 + i)
                res = bptt_loss_and_grads(cell, params, batch)
                opt.step(params, res.grads)
                losses.append(res.loss)
            return losses
        assert run() == run()
