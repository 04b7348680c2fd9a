"""Finite-difference checks of every analytic gradient, in float64."""

import numpy as np
import pytest

from tadet import autograd as ag
from tadet.model import BackboneConfig, Detector, ModelConfig
from tadet.roipool import PoolGrid
from tadet.training import TrainConfig, compute_step

from .oracles import finite_difference, relative_error

TOL = 1e-4


def check_op(build, inputs, rng):
    """Compare backprop through ``build(*tensors)`` with central differences of a random projection."""
    tensors = [ag.Tensor(x, requires_grad=True) for x in inputs]
    out = build(*tensors)
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    for t, x in zip(tensors, inputs):
        f = lambda: float(np.sum(proj * build(*[ag.Tensor(v) for v in inputs]).data))
        num = finite_difference(f, x)
        assert relative_error(t.grad, num) < TOL


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestLayers:
    @pytest.mark.parametrize("dilation", [1, 2, 3])
    def test_conv_time(self, rng, dilation):
        x = rng.standard_normal((3, 10, 4))
        w = rng.standard_normal((5, 3, 3))
        b = rng.standard_normal(5)
        check_op(lambda x, w, b: ag.conv_time(x, w, b, dilation), [x, w, b], rng)

    def test_conv_time_wide_kernel(self, rng):
        check_op(lambda x, w, b: ag.conv_time(x, w, b), [rng.standard_normal((2, 7, 1)), rng.standard_normal((3, 2, 5)), rng.standard_normal(3)], rng)

    def test_relu(self, rng):
        check_op(ag.relu, [rng.standard_normal((3, 5, 2))], rng)

    def test_maxpool_time(self, rng):
        check_op(lambda x: ag.maxpool_time(x, 2), [rng.standard_normal((3, 8, 4))], rng)

    def test_max_spatial(self, rng):
        check_op(ag.max_spatial, [rng.standard_normal((3, 5, 6))], rng)

    def test_linear(self, rng):
        check_op(ag.linear, [rng.standard_normal((4, 6)), rng.standard_normal((6, 3)), rng.standard_normal(3)], rng)

    def test_reshape_transpose(self, rng):
        check_op(lambda x: ag.transpose(ag.reshape(x, (6, 4))), [rng.standard_normal((2, 3, 4))], rng)

    def test_roi_pool(self, rng):
        segs = np.array([[0.0, 40.0], [13.0, 77.0], [60.0, 64.0]])
        check_op(lambda x: ag.roi_pool(x, (2, 3), segs, PoolGrid(2, 2, 2), 8), [rng.standard_normal((3, 10, 6))], rng)

    def test_shared_input_accumulates(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 4))
        b = np.zeros(4)
        check_op(lambda x, w, b: ag.linear(ag.relu(ag.linear(x, w, b)), w, b), [x, w, b], rng)


def tiny_model(seed=0):
    cfg = ModelConfig(
        backbone=BackboneConfig(
            in_channels=3,
            hidden_channels=[4, 5, 6, 6],
            pool_factors=[2, 2, 2, 1],
            dilations=[1, 1, 1, 2],
            spatial_dims=(2, 2),
        ),
        num_classes=3,
        anchor_scales=[2, 4, 8],
        proposal_channels=6,
        fc_channels=7,
        pool_grid=(2, 2, 1),
    )
    model = Detector(cfg, seed=seed, dtype=np.float64)
    # non-zero biases so every term of the gradient is exercised
    r = np.random.default_rng(seed + 100)
    for name, t in model.params:
        if name.endswith("bias"):
            t.data[:] = r.normal(scale=0.1, size=t.shape)
    return model


class TestJointObjective:
    def test_full_network_fd(self):
        model = tiny_model()
        rng = np.random.default_rng(5)
        buf = rng.standard_normal((3, 64, 2, 2))
        gts = np.array([[8.0, 30.0], [35.0, 60.0]])
        classes = np.array([1, 3])
        cfg = TrainConfig(proposal_batch=16, cls_batch=8, lam=1.0)
        res = compute_step(model, buf, gts, classes, cfg, np.random.default_rng(0))
        assert res.proposal.n_reg > 0 and res.classifier.n_reg > 0
        analytic = {n: t.grad.copy() for n, t in model.params}
        model.params.zero_grad()
        plan = res.plan
        f = lambda: compute_step(model, buf, gts, classes, cfg, plan=plan, backward=False).total
        pick = np.random.default_rng(6)
        for name, t in model.params:
            flat = t.data.reshape(-1)
            idx = pick.choice(flat.size, size=min(flat.size, 12), replace=False)
            num = finite_difference(f, t.data, eps=1e-6, indices=idx)
            err = relative_error(analytic[name].reshape(-1)[idx], num.reshape(-1)[idx])
            assert err < TOL, f"{name}: relative error {err:.2e}"
