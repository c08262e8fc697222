"""Backward-pass contracts and finite-difference gradient checks per op."""

import numpy as np
import pytest

from nve import ops
from nve.errors import GraphError
from nve.tensor import Tensor

from gradcheck import check_gradients, rand_weights


class TestBackwardContracts:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        ops.tensor_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_unreachable_parameter_has_no_gradient(self):
        # a parameter the loss does not depend on keeps grad None (read as 0)
        p = Tensor(np.ones(3), requires_grad=True)
        x = Tensor(np.ones(3), requires_grad=True)
        ops.tensor_sum(x).backward()
        assert p.grad is None

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = ops.relu(x)
        with pytest.raises(GraphError):
            y.backward()

    def test_backward_twice_yields_identical_grads(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 3)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)).astype(np.float64), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        loss = ops.tensor_sum(ops.relu(ops.linear(x, w, b)))
        loss.backward()
        first = {id(t): t.grad.copy() for t in (x, w, b)}
        loss.backward()
        for t in (x, w, b):
            np.testing.assert_array_equal(t.grad, first[id(t)])

    def test_reused_node_accumulates_within_one_pass(self):
        # y = x + x => dy/dx = 2
        x = Tensor(np.full(3, 1.5), requires_grad=True)
        ops.tensor_sum(ops.add(x, x)).backward()
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_no_grad_graph_is_not_built(self):
        x = Tensor(np.ones((2, 2)))
        y = ops.relu(x)
        assert y._backward_fn is None and y._parents == ()


def _proj_loss(op, rng, *shapes):
    """Wrap an op producing a tensor into a random-projection scalar loss."""
    def build(tensors):
        out = op(*tensors)
        w = _proj_loss.cache.get(out.shape)
        if w is None:
            w = rng.uniform(-1, 1, size=out.shape)
            _proj_loss.cache[out.shape] = w
        return ops.weighted_sum(out, w.astype(out.dtype))

    _proj_loss.cache = {}
    return build


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
class TestGradChecks:
    def test_linear(self, dtype):
        rng = np.random.default_rng(10)
        arrays = [
            rng.normal(size=(3, 4)).astype(dtype),
            rng.normal(size=(5, 4)).astype(dtype),
            rng.normal(size=5).astype(dtype),
        ]
        check_gradients(_proj_loss(ops.linear, rng), arrays)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0)])
    def test_conv2d(self, dtype, stride, padding):
        rng = np.random.default_rng(11 + stride)
        arrays = [
            rng.normal(size=(2, 2, 5, 5)).astype(dtype),
            rng.normal(size=(3, 2, 3, 3)).astype(dtype),
            rng.normal(size=3).astype(dtype),
        ]
        op = lambda x, w, b: ops.conv2d(x, w, b, stride, padding)
        check_gradients(_proj_loss(op, rng), arrays)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_depthwise_conv2d(self, dtype, stride):
        rng = np.random.default_rng(13 + stride)
        arrays = [
            rng.normal(size=(2, 3, 5, 4)).astype(dtype),
            rng.normal(size=(3, 3, 3)).astype(dtype),
            rng.normal(size=3).astype(dtype),
        ]
        op = lambda x, w, b: ops.depthwise_conv2d(x, w, b, stride, 1)
        check_gradients(_proj_loss(op, rng), arrays)

    def test_relu(self, dtype):
        rng = np.random.default_rng(15)
        # keep values away from the kink at 0
        x = rng.normal(size=(4, 4)).astype(dtype)
        x = np.where(np.abs(x) < 0.2, x + 0.5, x)
        check_gradients(_proj_loss(ops.relu, rng), [x])

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_pool2d(self, dtype, kind):
        rng = np.random.default_rng(16)
        # distinct values keep the max selection stable under FD perturbation;
        # small magnitudes keep float32 differences accurate
        x = rng.permutation(64).reshape(1, 1, 8, 8).astype(dtype) / 8.0
        x += rng.uniform(-0.05, 0.05, size=x.shape).astype(dtype)
        op = lambda t: ops.pool2d(t, kind, 2, 2)
        check_gradients(_proj_loss(op, rng), [x])

    def test_concat(self, dtype):
        rng = np.random.default_rng(17)
        arrays = [
            rng.normal(size=(2, 3, 2, 2)).astype(dtype),
            rng.normal(size=(2, 5, 2, 2)).astype(dtype),
        ]
        op = lambda a, b: ops.concat([a, b], axis=1)
        check_gradients(_proj_loss(op, rng), arrays)

    def test_channel_shuffle(self, dtype):
        rng = np.random.default_rng(18)
        x = rng.normal(size=(2, 6, 3, 3)).astype(dtype)
        op = lambda t: ops.channel_shuffle(t, 3)
        check_gradients(_proj_loss(op, rng), [x])

    def test_slice_channels(self, dtype):
        rng = np.random.default_rng(19)
        x = rng.normal(size=(2, 6, 2, 2)).astype(dtype)
        op = lambda t: ops.slice_channels(t, 1, 4)
        check_gradients(_proj_loss(op, rng), [x])

    def test_global_avg_pool(self, dtype):
        rng = np.random.default_rng(20)
        x = rng.normal(size=(3, 4, 3, 5)).astype(dtype)
        check_gradients(_proj_loss(ops.global_avg_pool, rng), [x])

    def test_add(self, dtype):
        rng = np.random.default_rng(21)
        arrays = [
            rng.normal(size=(3, 4)).astype(dtype),
            rng.normal(size=(3, 4)).astype(dtype),
        ]
        check_gradients(_proj_loss(ops.add, rng), arrays)

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm2d(self, dtype, training):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(4, 3, 3, 3)).astype(dtype)
        gamma = rng.uniform(0.5, 1.5, size=3).astype(dtype)
        beta = rng.normal(size=3).astype(dtype)
        rm = rng.normal(size=3).astype(dtype)
        rv = rng.uniform(0.5, 2.0, size=3).astype(dtype)

        def op(xt, gt, bt):
            return ops.batchnorm2d(xt, gt, bt, rm.copy(), rv.copy(), training)

        check_gradients(_proj_loss(op, rng), [x, gamma, beta])

    def test_cross_entropy(self, dtype):
        rng = np.random.default_rng(23)
        logits = rng.normal(size=(5, 2)).astype(dtype)
        targets = rng.integers(0, 2, size=5)
        check_gradients(
            lambda ts: ops.cross_entropy(ts[0], targets), [logits]
        )

def test_composite_network_float64():
    # conv -> relu -> pool -> flatten-by-gap -> linear -> cross entropy.
    # float64 only: through this many layers the float32 forward loses more
    # bits than the FD tolerance allows, per-op float32 checks cover that case
    rng = np.random.default_rng(24)
    dtype = np.float64
    x = rng.normal(size=(2, 2, 6, 6)).astype(dtype)
    cw = rng.normal(size=(4, 2, 3, 3)).astype(dtype) * 0.5
    cb = rng.normal(size=4).astype(dtype) * 0.1
    lw = rng.normal(size=(2, 4)).astype(dtype) * 0.5
    lb = rng.normal(size=2).astype(dtype) * 0.1
    targets = np.array([0, 1])

    def build(ts):
        xt, cwt, cbt, lwt, lbt = ts
        h = ops.relu(ops.conv2d(xt, cwt, cbt, 1, 1))
        h = ops.pool2d(h, "max", 2, 2)
        h = ops.global_avg_pool(h)
        return ops.cross_entropy(ops.linear(h, lwt, lbt), targets)

    check_gradients(build, [x, cw, cb, lw, lb], wrt=[1, 2, 3, 4])
