import numpy as np
import pytest

from tadet import autograd as ag
from tadet.model import (
    BackboneConfig,
    Detector,
    ModelConfig,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

from .oracles import finite_difference, relative_error


def small_config(**kw):
    bb = BackboneConfig(in_channels=4, hidden_channels=[6, 6, 8], spatial_dims=(3, 3))
    return ModelConfig(backbone=bb, **{"num_classes": 4, "proposal_channels": 8, "fc_channels": 16, **kw})


def zero_model(config):
    m = Detector(config)
    for _, t in m.params:
        t.data[:] = 0
    return m


class TestBackbone:
    def test_thumos_buffer_length(self):
        m = Detector(small_config())
        out = m.backbone_forward(np.zeros((4, 768, 3, 3), dtype=np.float32))
        assert out.shape == (8, 96, 9)

    @pytest.mark.parametrize("length", [8, 16, 200])
    def test_length_contract(self, length):
        m = Detector(small_config())
        assert m.backbone_forward(np.ones((4, length, 3, 3))).shape[1] == length // 8

    def test_zero_input_zero_bias(self):
        m = Detector(small_config())
        out = m.backbone_forward(np.zeros((4, 8, 3, 3)))
        assert not out.data.any()

    def test_errors(self):
        m = Detector(small_config())
        with pytest.raises(ValueError):
            m.backbone_forward(np.zeros((4, 12, 3, 3)))
        with pytest.raises(ValueError):
            m.backbone_forward(np.zeros((5, 16, 3, 3)))
        with pytest.raises(ValueError):
            m.backbone_forward(np.zeros((4, 16, 2, 2)))

    def test_bad_pool_product(self):
        with pytest.raises(ValueError):
            BackboneConfig(hidden_channels=[4, 4], pool_factors=[2, 2], dilations=[1, 1])

    def test_input_gradient_fd(self):
        cfg = ModelConfig(
            backbone=BackboneConfig(in_channels=2, hidden_channels=[3, 3], pool_factors=[2, 4], dilations=[1, 1], spatial_dims=(2, 1)),
            num_classes=2, anchor_scales=[2], proposal_channels=3, fc_channels=4, pool_grid=(1, 1, 1),
        )
        m = Detector(cfg, seed=3, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 16, 2, 1))
        proj = rng.standard_normal((3, 2, 2))
        t = ag.Tensor(x, requires_grad=True)
        out = m.backbone_forward(t)
        out.backward(proj)
        num = finite_difference(lambda: float(np.sum(proj * m.backbone_forward(x).data)), x)
        assert relative_error(t.grad, num) < 1e-4


class TestProposalHead:
    def test_counts(self):
        m = Detector(small_config())
        logits, offsets = m.proposal_forward(m.backbone_forward(np.zeros((4, 768, 3, 3), np.float32)))
        assert logits.shape == (960, 2) and offsets.shape == (960, 2)

    def test_zero_weights(self):
        m = zero_model(small_config())
        feats = ag.Tensor(np.random.default_rng(0).standard_normal((8, 12, 9)).astype(np.float32))
        logits, offsets = m.proposal_forward(feats)
        assert not logits.data.any() and not offsets.data.any()

    def test_translation_equivariance(self):
        cfg = small_config(anchor_scales=[2, 4, 8])
        m = Detector(cfg, seed=1, dtype=np.float64)
        rng = np.random.default_rng(2)
        f = rng.standard_normal((8, 20, 9))
        shifted = np.concatenate([rng.standard_normal((8, 1, 9)), f[:, :-1]], axis=1)
        a = [t.data.reshape(20, 3, 2) for t in m.proposal_forward(ag.Tensor(f))]
        b = [t.data.reshape(20, 3, 2) for t in m.proposal_forward(ag.Tensor(shifted))]
        for x, y in zip(a, b):
            np.testing.assert_allclose(y[2:19], x[1:18], rtol=1e-12, atol=1e-12)


class TestClassifier:
    def test_thumos_sizes(self):
        cfg = small_config(num_classes=20)
        m = Detector(cfg)
        pooled = ag.Tensor(np.zeros((3, 8 * 16), np.float32))
        logits, offsets = m.classifier_forward(pooled)
        assert logits.shape == (3, 21)
        assert offsets.data[0].size == 42

    def test_zero_weights_uniform(self):
        from tadet.loss import softmax

        m = zero_model(small_config())
        logits, _ = m.classifier_forward(ag.Tensor(np.ones((2, 128), np.float32)))
        np.testing.assert_allclose(softmax(logits.data), np.full((2, 5), 0.2), rtol=1e-6)

    def test_shape_mismatch(self):
        m = Detector(small_config())
        with pytest.raises(ValueError):
            m.classifier_forward(ag.Tensor(np.zeros((2, 7))))

    def test_logit_jacobian_wrt_input(self):
        cfg = ModelConfig(
            backbone=BackboneConfig(in_channels=2, hidden_channels=[3, 3], pool_factors=[2, 4], dilations=[1, 1], spatial_dims=(2, 2)),
            num_classes=2, anchor_scales=[2], proposal_channels=3, fc_channels=5, pool_grid=(2, 1, 2),
        )
        m = Detector(cfg, seed=4, dtype=np.float64)
        for name, t in m.params:
            if name.endswith("bias"):
                t.data[:] = 0.1
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 32, 2, 2))
        segs = np.array([[3.0, 29.0]])

        def logit(inp):
            return m.classifier_forward(m.pool(m.backbone_forward(inp), segs))[0]

        t = ag.Tensor(x, requires_grad=True)
        out = logit(t)
        seed = np.zeros(out.shape)
        seed[0, 1] = 1.0
        out.backward(seed)
        num = finite_difference(lambda: float(logit(x).data[0, 1]), x)
        assert relative_error(t.grad, num) < 1e-4


class TestGradients:
    def test_all_parameters_get_finite_grads(self):
        from tadet.training import TrainConfig, compute_step

        cfg = small_config(anchor_scales=[2, 4, 8])
        m = Detector(cfg, seed=0)
        rng = np.random.default_rng(0)
        buf = rng.standard_normal((4, 128, 3, 3)).astype(np.float32)
        compute_step(m, buf, np.array([[10.0, 40.0], [60.0, 120.0]]), np.array([1, 2]), TrainConfig(), rng)
        assert m.params.grads_finite()
        assert all(t.grad is not None for _, t in m.params)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = Detector(small_config(), seed=5)
        save_checkpoint(tmp_path / "m.tdck", m.params)
        assert (tmp_path / "m.tdck").read_bytes()[:4] == b"TDCK"
        other = Detector(small_config(), seed=6)
        load_checkpoint(tmp_path / "m.tdck", other)
        for (n, a), (_, b) in zip(m.params, other.params):
            np.testing.assert_array_equal(a.data, b.data, err_msg=n)

    def test_shape_mismatch_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "m.tdck", Detector(small_config()).params)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "m.tdck", Detector(small_config(num_classes=7)))

    def test_corrupt_rejected(self, tmp_path):
        p = tmp_path / "m.tdck"
        save_checkpoint(p, Detector(small_config()).params)
        p.write_bytes(p.read_bytes() + b"x")
        with pytest.raises(ValueError):
            read_checkpoint(p)
        p.write_bytes(b"NOPE" + p.read_bytes()[4:])
        with pytest.raises(ValueError):
            read_checkpoint(p)

    def test_config_dict_round_trip(self):
        cfg = small_config(offset_std=(0.1, 0.2))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
