import numpy as np
import pytest

from fadenoise import fanet
from fadenoise.fanet import ConvSpec, ModelConfig, count_macs, forward, init_weights, layer_specs
from fadenoise.tensor import ConfigError, ShapeError, Tensor, mean, ops, sum_, mul

from conftest import grad_check


def randomize(weights, rng, scale=0.3, names=None, dtype=None):
    """Give every (or the named) parameter small random values."""
    for n, t in weights.items():
        if names is None or any(n.startswith(p) for p in names):
            t.data = (rng.normal(size=t.shape) * scale).astype(dtype or t.data.dtype)
    return weights


def to64(weights):
    for t in weights.values():
        t.data = t.data.astype(np.float64)
    return weights


def block_weights(rng, c_in, c_out, expansion, groups, prefix="blk", zero=False):
    hid = c_in * expansion
    shapes = {"expand": (hid, c_in, 1, 1), "group": (hid, hid // groups, 3, 3), "project": (c_out, hid, 1, 1)}
    w = {}
    for k, s in shapes.items():
        w[f"{prefix}.{k}.w"] = Tensor(np.zeros(s) if zero else rng.normal(size=s) * 0.3, requires_grad=True)
        w[f"{prefix}.{k}.b"] = Tensor(np.zeros(s[0]) if zero else rng.normal(size=s[0]) * 0.1, requires_grad=True)
    return w


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(base_width=10, groups=4)
        with pytest.raises(ConfigError):
            ModelConfig(scales=1)
        with pytest.raises(ConfigError):
            ModelConfig(skip_shrink_channels=0)

    def test_teacher_has_ten_times_the_macs(self):
        assert count_macs(fanet.teacher_config(), 512, 512) >= 10 * count_macs(ModelConfig(), 512, 512)


class TestArnet:
    def test_zero_weights_residual(self, rng):
        x = Tensor(rng.normal(size=(1, 8, 6, 6)))
        out = fanet.arnet_block(x, block_weights(rng, 8, 8, 2, 4, zero=True), "blk", 1, 4)
        np.testing.assert_array_equal(out.data, x.data)

    def test_stride_two_halves(self, rng):
        x = Tensor(rng.normal(size=(2, 8, 8, 6)))
        out = fanet.arnet_block(x, block_weights(rng, 8, 16, 2, 4), "blk", 2, 4)
        assert out.shape == (2, 16, 4, 3)

    def test_matches_reference_composition(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 6, 6)))
        w = block_weights(rng, 4, 4, 3, 1)
        h = ops.relu(ops.conv2d(x, w["blk.expand.w"], w["blk.expand.b"]))
        h = ops.relu(ops.conv2d(h, w["blk.group.w"], w["blk.group.b"], pad=1))
        ref = ops.conv2d(h, w["blk.project.w"], w["blk.project.b"]).data + x.data
        np.testing.assert_allclose(fanet.arnet_block(x, w, "blk", 1, 1).data, ref, rtol=1e-12, atol=1e-12)

    def test_group_mismatch(self, rng):
        with pytest.raises(ShapeError):
            fanet.arnet_block(Tensor(np.zeros((1, 6, 4, 4))), block_weights(rng, 6, 6, 2, 1), "blk", 1, 4)


def fa_weights(rng, channels, hidden=5, zero_heads=True):
    w = {
        "l.fa.trunk.w": Tensor(rng.normal(size=(hidden, 4, 3, 3)) * 0.3, requires_grad=True),
        "l.fa.trunk.b": Tensor(rng.normal(size=hidden) * 0.1, requires_grad=True),
    }
    for head in ("gamma", "beta"):
        shape = (channels, hidden, 1, 1)
        w[f"l.fa.{head}.w"] = Tensor(np.zeros(shape) if zero_heads else rng.normal(size=shape) * 0.3,
                                     requires_grad=True)
        w[f"l.fa.{head}.b"] = Tensor(np.zeros(channels) if zero_heads else rng.normal(size=channels) * 0.1,
                                     requires_grad=True)
    return w


class TestFeatureAlign:
    def test_zero_heads_identity(self, rng):
        f = Tensor(rng.normal(size=(2, 6, 5, 5)))
        out = fanet.feature_align(f, Tensor(rng.normal(size=(2, 4, 5, 5))), fa_weights(rng, 6), "l")
        np.testing.assert_array_equal(out.data, f.data)

    def test_gamma_minus_one_gives_beta(self, rng):
        f = Tensor(rng.normal(size=(1, 6, 5, 5)))
        noisy = Tensor(rng.normal(size=(1, 4, 5, 5)))
        w = fa_weights(rng, 6, zero_heads=False)
        w["l.fa.gamma.w"].data[:] = 0
        w["l.fa.gamma.b"].data[:] = -1
        h = ops.relu(ops.conv2d(noisy, w["l.fa.trunk.w"], w["l.fa.trunk.b"], pad=1))
        beta = ops.conv2d(h, w["l.fa.beta.w"], w["l.fa.beta.b"]).data
        np.testing.assert_allclose(fanet.feature_align(f, noisy, w, "l").data, beta, atol=1e-12)

    def test_head_gradients(self, rng):
        f = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
        noisy = Tensor(rng.uniform(0.5, 1.5, size=(1, 4, 4, 4)))
        w = fa_weights(rng, 3, zero_heads=False)
        r = rng.normal(size=(1, 3, 4, 4))
        fn = lambda: sum_(mul(fanet.feature_align(f, noisy, w, "l"), Tensor(r)))  # noqa: E731
        leaves = [w[k] for k in ("l.fa.gamma.w", "l.fa.gamma.b", "l.fa.beta.w", "l.fa.beta.b")] + [f]
        assert grad_check(fn, leaves, eps=1e-6) < 1e-3

    def test_resolution_mismatch(self, rng):
        with pytest.raises(ShapeError):
            fanet.feature_align(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 4, 2, 2))), fa_weights(rng, 3), "l")


class TestSkips:
    def test_cyclic_replication(self):
        x = Tensor(np.stack([np.zeros((2, 2)), np.ones((2, 2))])[None])
        out = fanet.expand_skip(x, 5)
        np.testing.assert_array_equal(out.data[0, :, 0, 0], [0, 1, 0, 1, 0])

    def test_identity_shrink_passes_through(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        w = {"s.w": Tensor(np.eye(3)[:, :, None, None]), "s.b": Tensor(np.zeros(3))}
        np.testing.assert_array_equal(fanet.expand_skip(fanet.shrink_skip(x, w, "s"), 3).data, x.data)

    def test_zero_shrink_contributes_nothing(self, rng):
        cfg = ModelConfig()
        w = randomize(init_weights(cfg, seed=1), rng, names=["head", "enc0.fa", "mid.fa"])
        for n in w:
            if n.startswith("skip"):
                w[n].data[:] = 0
        no_skip = ModelConfig(skips=False)
        w2 = {n: t for n, t in w.items() if not n.startswith("skip")}
        x = Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32) * 100)
        np.testing.assert_allclose(forward(cfg, w, x).data, forward(no_skip, w2, x).data, rtol=1e-6, atol=1e-4)


class TestForward:
    def test_zero_head_identity(self, rng):
        cfg = ModelConfig()
        w = randomize(init_weights(cfg, seed=0), rng, names=["enc0.fa", "down1.fa"])
        x = Tensor(rng.normal(size=(2, 4, 8, 8)).astype(np.float32) * 50)
        np.testing.assert_array_equal(forward(cfg, w, x).data, x.data)

    @pytest.mark.parametrize("cfg", [ModelConfig(), ModelConfig(scales=2, base_width=8, groups=2),
                                     ModelConfig(scales=4, base_width=8, groups=1, feature_align=False)])
    def test_shape_preserved(self, rng, cfg):
        w = randomize(init_weights(cfg, seed=0), rng, names=["head"])
        m = 2 ** (cfg.scales - 1)
        x = Tensor(rng.normal(size=(1, 4, 2 * m, 3 * m)).astype(np.float32))
        assert forward(cfg, w, x).shape == x.shape

    def test_bad_dims(self):
        cfg = ModelConfig()
        with pytest.raises(ShapeError):
            forward(cfg, init_weights(cfg), Tensor(np.zeros((1, 4, 6, 8), dtype=np.float32)))
        with pytest.raises(ShapeError):
            forward(cfg, init_weights(cfg), Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32)))

    def test_zero_fa_equals_structural_removal(self, rng):
        cfg = ModelConfig()
        w = randomize(init_weights(cfg, seed=2), rng, names=["head"])
        plain = ModelConfig(feature_align=False)
        w_plain = {n: t for n, t in w.items() if ".fa." not in n}
        assert set(w_plain) == {f"{sp.name}.{k}" for sp in layer_specs(plain) for k in "wb"}
        x = Tensor(rng.normal(size=(1, 4, 16, 16)).astype(np.float32) * 100)
        a, b = forward(cfg, w, x).data, forward(plain, w_plain, x).data
        assert np.max(np.abs(a - b)) <= 1e-6 * np.max(np.abs(b))

    def test_deterministic(self, rng):
        cfg = ModelConfig()
        w = randomize(init_weights(cfg, seed=0), rng, names=["head", "enc0.fa"])
        x = Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32))
        assert np.array_equal(forward(cfg, w, x).data, forward(cfg, w, x).data)

    def test_translation_covariance(self, rng):
        cfg = ModelConfig()
        w = randomize(init_weights(cfg, seed=3), rng, scale=0.2)
        step = 2 ** (cfg.scales - 1)   # packed pixels per 2**scales Bayer pixels
        base = rng.normal(size=(1, 4, 48, 48)).astype(np.float32) * 100
        shifted = np.roll(base, step, axis=3)
        a = forward(cfg, w, Tensor(base)).data
        b = forward(cfg, w, Tensor(shifted)).data
        inner = slice(16, 32)
        np.testing.assert_allclose(b[..., inner, 16 + step:32 + step], a[..., inner, inner], rtol=1e-5, atol=1e-5)

    def test_features_per_scale(self, rng):
        cfg = ModelConfig()
        _, feats = forward(cfg, init_weights(cfg), Tensor(np.zeros((1, 4, 8, 8), np.float32)), return_features=True)
        assert [f.shape[1:] for f in feats] == [(16, 8, 8), (32, 4, 4), (64, 2, 2)]


def test_full_network_gradient(rng):
    cfg = ModelConfig()
    # 64-bit accumulation keeps the finite-difference oracle trustworthy
    w = to64(randomize(init_weights(cfg, seed=0), rng, scale=0.2))
    x = Tensor(rng.random((1, 4, 16, 16)) * 200)
    params = list(w.values())
    picks = [params[i] for i in rng.choice(len(params), 10, replace=False)]

    def loss():
        return mean(forward(cfg, w, x))

    assert grad_check(loss, picks, n_coords=2, eps=1e-4, seed=1) < 1e-2


class TestMacs:
    def test_single_conv_closed_form(self):
        # 3x3 conv 4->8 on the packed grid of a 2000x1000 (2 MP) Bayer frame
        macs = count_macs([ConvSpec("c", 4, 8, 3)], 2000, 1000)
        assert macs == 4 * 8 * 9 * 1000 * 500 / 2.0 / 1e9

    def test_pointwise_closed_form(self):
        macs = count_macs([ConvSpec("c", 16, 32, 1, scale=1)], 512, 512)
        assert macs == 16 * 32 * 128 * 128 / (512 * 512 / 1e6) / 1e9

    def test_grouped_strided_closed_form(self):
        macs = count_macs([ConvSpec("c", 16, 16, 3, stride=2, groups=4, scale=1)], 256, 256)
        assert macs == (16 // 4) * 16 * 9 * 64 * 64 / (256 * 256 / 1e6) / 1e9

    @pytest.mark.parametrize("cfg", [ModelConfig(), fanet.teacher_config()])
    def test_resolution_invariant(self, cfg):
        a = count_macs(cfg, 512, 512)
        assert count_macs(cfg, 512, 1024) == pytest.approx(a, rel=1e-12)
        assert count_macs(cfg, 1024, 2048) == pytest.approx(a, rel=1e-12)


class TestCheckpoint:
    def test_round_trip_and_checksum(self, rng, tmp_path):
        cfg = ModelConfig(scales=2, base_width=8, groups=2)
        w = randomize(init_weights(cfg, seed=0), rng)
        fanet.save_checkpoint(tmp_path / "ck", cfg, w)
        cfg2, w2 = fanet.load_checkpoint(tmp_path / "ck")
        assert cfg2 == cfg
        assert fanet.weights_checksum(w2) == fanet.weights_checksum(w)

    def test_mismatched_config_rejected(self, tmp_path):
        cfg = ModelConfig(scales=2, base_width=8, groups=2)
        w = init_weights(cfg)
        del w["head.b"]
        fanet.save_checkpoint(tmp_path / "ck", cfg, w)
        with pytest.raises(ShapeError):
            fanet.load_checkpoint(tmp_path / "ck")
