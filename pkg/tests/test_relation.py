import numpy as np
import pytest

from mvpose import numerics as nm
from mvpose.numerics import ContractError, Tensor
from mvpose.relation import (
    PoseNet,
    RegressionHead,
    RelationConfig,
    RelationModule,
    TransformerEncoder,
)
from mvpose.spatial import SpatialConfig

MICRO_SPATIAL = SpatialConfig(image_size=(32, 32), patch_size=4, stage_depths=(1, 1),
                              stage_dims=(16, 32), stage_heads=(2, 2), window=4,
                              out_dim=32)
MICRO_RELATION = RelationConfig(token_dim=32, layers=1, heads=2, num_views=2,
                                num_joints=5, max_frames=4)


def zero_encoder_weights(encoder: TransformerEncoder):
    for norm1, attn, norm2, mlp in encoder.layers:
        for p in attn.params() + mlp.params():
            p.data[:] = 0.0


def ln_oracle(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class TestTemporalEncode:
    def _module(self, seed=0):
        return RelationModule(MICRO_RELATION, np.random.default_rng(seed))

    def test_zero_weights_reduce_to_ln_of_shifted_input(self):
        mod = self._module()
        zero_encoder_weights(mod.time_encoder)
        rng = np.random.default_rng(1)
        tokens = rng.normal(size=(3, 32))
        out = mod.temporal_encode(Tensor(tokens)).data
        expected = ln_oracle(tokens + mod.e_time.data[:3])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_zero_table_permutation_equivariance(self):
        mod = self._module(seed=2)
        mod.e_time.data[:] = 0.0
        rng = np.random.default_rng(3)
        tokens = rng.normal(size=(4, 32))
        perm = np.array([2, 0, 3, 1])
        a = mod.temporal_encode(Tensor(tokens[perm])).data
        b = mod.temporal_encode(Tensor(tokens)).data[perm]
        assert np.max(np.abs(a - b)) < 1e-12

    def test_nonzero_table_breaks_equivariance(self):
        mod = self._module(seed=4)
        rng = np.random.default_rng(5)
        tokens = rng.normal(size=(4, 32))
        perm = np.array([1, 0, 2, 3])
        a = mod.temporal_encode(Tensor(tokens[perm])).data
        b = mod.temporal_encode(Tensor(tokens)).data[perm]
        assert np.max(np.abs(a - b)) > 1e-6

    def test_too_many_frames_rejected(self):
        mod = self._module()
        with pytest.raises(ContractError):
            mod.temporal_encode(Tensor(np.zeros((5, 32))))


class TestViewEncode:
    def test_single_token_attention_is_identity_weighted(self):
        enc = TransformerEncoder(8, 1, 2, np.random.default_rng(6), "enc")
        sink = []
        enc(Tensor(np.random.default_rng(7).normal(size=(1, 8))), weights_out=sink)
        np.testing.assert_allclose(sink[0].reshape(-1), np.ones(2), atol=1e-15)

    def test_single_token_zero_weights_is_ln_chain(self):
        enc = TransformerEncoder(8, 2, 2, np.random.default_rng(8), "enc")
        for norm1, attn, norm2, mlp in enc.layers:
            for p in attn.params() + mlp.params():
                p.data[:] = 0.0
        x = np.random.default_rng(9).normal(size=(1, 8))
        out = enc(Tensor(x)).data
        np.testing.assert_allclose(out, ln_oracle(x), atol=1e-12)

    def test_zero_table_view_permutation_equivariance(self):
        mod = RelationModule(MICRO_RELATION, np.random.default_rng(10))
        mod.e_view.data[:] = 0.0
        rng = np.random.default_rng(11)
        tokens = rng.normal(size=(2, 32))
        a = mod.view_encode(Tensor(tokens[::-1].copy())).data
        b = mod.view_encode(Tensor(tokens)).data[::-1]
        assert np.max(np.abs(a - b)) < 1e-12

    def test_wrong_view_count_rejected(self):
        mod = RelationModule(MICRO_RELATION, np.random.default_rng(12))
        with pytest.raises(ContractError):
            mod.view_encode(Tensor(np.zeros((3, 32))))

    def test_gradient_matches_finite_differences(self):
        mod = RelationModule(MICRO_RELATION, np.random.default_rng(13))
        tokens = np.random.default_rng(14).normal(size=(2, 32))
        probe = np.random.default_rng(15).normal(size=(2, 32))
        params = {p.name: p for p in mod.params() if p.name.startswith("relation.view")}

        def loss_fn():
            return nm.tsum(nm.mul(mod.view_encode(Tensor(tokens)), Tensor(probe)))

        report = nm.finite_diff_check(loss_fn, params, h=1e-5, sample_per_param=8,
                                      rng=np.random.default_rng(16))
        assert report.max_rel_err < 1e-4, report.worst()


class TestRegressionHead:
    def test_constant_head(self):
        rng = np.random.default_rng(17)
        head = RegressionHead(16, 3, rng)
        head.w.data[:] = 0.0
        head.b.data[:] = rng.normal(size=6)
        tokens = Tensor(rng.normal(size=(4, 2, 16)))
        out = head(tokens).data
        expected = (1 / (1 + np.exp(-head.b.data))).reshape(3, 2)
        for f in range(4):
            for v in range(2):
                np.testing.assert_allclose(out[f, v], expected, atol=1e-12)

    def test_output_shape(self):
        head = RegressionHead(8, 17, np.random.default_rng(18))
        out = head(Tensor(np.random.default_rng(19).normal(size=(32, 4, 8))))
        assert out.shape == (32, 4, 17, 2)

    def test_outputs_in_unit_square(self):
        head = RegressionHead(8, 2, np.random.default_rng(20))
        tokens = Tensor(np.random.default_rng(21).normal(size=(5, 8)) * 100)
        out = head(tokens).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)


class TestPoseNet:
    def _net(self, seed=22, **kw):
        return PoseNet(MICRO_SPATIAL, MICRO_RELATION, np.random.default_rng(seed),
                       **kw)

    def _images(self, seed=23, f=2):
        return np.random.default_rng(seed).uniform(size=(f, 2, 32, 32, 3))

    def test_every_frame_gets_a_pose(self):
        net = self._net()
        out = net.forward(self._images(f=4, seed=24))
        assert out.shape == (4, 2, 5, 2)

    def test_deterministic(self):
        imgs = self._images()
        a = self._net(seed=25).forward(imgs).data
        b = self._net(seed=25).forward(imgs).data
        assert a.tobytes() == b.tobytes()

    def test_zero_tables_frame_and_view_equivariance(self):
        net = self._net(seed=26)
        net.relation.e_time.data[:] = 0.0
        net.relation.e_view.data[:] = 0.0
        imgs = self._images(seed=27, f=3)
        base = net.forward(imgs).data
        fperm = np.array([2, 0, 1])
        np.testing.assert_allclose(net.forward(imgs[fperm]).data, base[fperm],
                                   atol=1e-9)
        vperm = np.array([1, 0])
        np.testing.assert_allclose(net.forward(imgs[:, vperm]).data, base[:, vperm],
                                   atol=1e-9)

    def test_nonzero_tables_break_equivariance(self):
        net = self._net(seed=28)
        imgs = self._images(seed=29, f=3)
        base = net.forward(imgs).data
        fperm = np.array([2, 0, 1])
        assert np.max(np.abs(net.forward(imgs[fperm]).data - base[fperm])) > 1e-6
        vperm = np.array([1, 0])
        assert np.max(np.abs(net.forward(imgs[:, vperm]).data - base[:, vperm])) > 1e-6

    def test_layer_and_head_counts_do_not_change_shapes(self):
        imgs = self._images(seed=30)
        shapes = set()
        for layers in (1, 2):
            for heads in (2, 4):
                cfg = RelationConfig(token_dim=32, layers=layers, heads=heads,
                                     num_views=2, num_joints=5, max_frames=4)
                net = PoseNet(MICRO_SPATIAL, cfg, np.random.default_rng(31))
                shapes.add(net.forward(imgs).shape)
        assert shapes == {(2, 2, 5, 2)}

    def test_ablated_net_runs_and_has_no_relation_params(self):
        net = self._net(seed=32, ablate_relations=True)
        out = net.forward(self._images(seed=33))
        assert out.shape == (2, 2, 5, 2)
        assert not any(p.name.startswith("relation") for p in net.params())

    def test_loss_gradcheck_micro(self):
        net = self._net(seed=34)
        imgs = self._images(seed=35)
        gt = np.random.default_rng(36).uniform(size=(2, 2, 5, 2))
        params = net.param_dict()

        def loss_fn():
            return net.loss(imgs, gt)

        # step-size sweep: params whose gradients sit near the h=1e-5 noise
        # floor are retried at a coarser step
        best: dict[str, float] = {}
        for h in (1e-5, 1e-3):
            report = nm.finite_diff_check(loss_fn, params, h=h, sample_per_param=4,
                                          rng=np.random.default_rng(37))
            for k, v in report.per_param.items():
                best[k] = min(v, best.get(k, np.inf))
        worst = max(best, key=best.get)
        assert best[worst] < 1e-4, (worst, best[worst])

    def test_mismatched_views_rejected(self):
        net = self._net(seed=38)
        with pytest.raises(ContractError):
            net.forward(np.zeros((2, 3, 32, 32, 3)))


def test_paper_shaped_token_sequence():
    # 224x224 inputs, D=768 frame tokens: the per-view sequence entering the
    # relation stage has shape (1, f, D) = (1, 32, 768)
    cfg = SpatialConfig(image_size=(224, 224), patch_size=16, stage_depths=(1,),
                        stage_dims=(768,), stage_heads=(8,), window=7, out_dim=768)
    from mvpose.spatial import SpatialEncoder

    enc = SpatialEncoder(cfg, np.random.default_rng(39), dtype=np.float32)
    imgs = np.random.default_rng(40).uniform(size=(32, 224, 224, 3)).astype(np.float32)
    tokens = enc.forward(imgs)
    per_view = nm.reshape(tokens, (1, 32, 768))
    assert per_view.shape == (1, 32, 768)
