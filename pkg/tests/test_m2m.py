"""Mask-to-matte network: shapes, determinism, parameter accounting, and a
full-network gradient check."""

import numpy as np
import pytest

import oracles
from mattekit import autodiff as ad
from mattekit import imageops as io
from mattekit import m2m
from mattekit.guidance import encoder_init, encode_features


def toy_cfg(c=8, seed=0):
    return m2m.M2MConfig.toy(feature_channels=c, seed=seed)


def random_inputs(rng, size=64, c=8):
    img = io.ImageRGB(rng.random((3, size, size), dtype=np.float32))
    mask_plane = np.zeros((size, size), np.uint8)
    q = size // 4
    mask_plane[q:size - q, q:size - q] = 1
    mask = io.BinaryMask(mask_plane)
    feats = ad.Tensor(rng.standard_normal((c, size // 16, size // 16))
                      .astype(np.float32))
    return img, mask, feats


class TestInit:
    def test_same_seed_identical_bytes(self):
        a = m2m.m2m_init(toy_cfg(seed=4))
        b = m2m.m2m_init(toy_cfg(seed=4))
        for (pa, ta), (pb, tb) in zip(a.params.items(), b.params.items()):
            assert pa == pb
            assert ta.data.tobytes() == tb.data.tobytes()

    def test_different_seed_differs(self):
        a = m2m.m2m_init(toy_cfg(seed=1))
        b = m2m.m2m_init(toy_cfg(seed=2))
        assert any(ta.data.tobytes() != tb.data.tobytes()
                   for (_, ta), (_, tb) in zip(a.params.items(), b.params.items()))

    def test_toy_count_under_100k(self):
        cfg = toy_cfg()
        assert m2m.count_params(cfg) < 100_000
        assert m2m.m2m_init(cfg).params.total_count() == m2m.count_params(cfg)

    def test_default_count_in_paper_band(self):
        cfg = m2m.M2MConfig()
        count = m2m.count_params(cfg)
        assert 2_000_000 <= count <= 3_000_000

    def test_count_is_pure_function_of_cfg(self):
        for cfg in (toy_cfg(), m2m.M2MConfig(feature_channels=32),
                    m2m.M2MConfig(feature_channels=16, stem_widths=(32, 32),
                                  widths=(24, 12, 6), blocks=(2, 2, 1))):
            built = m2m.m2m_init(cfg)
            assert built.params.total_count() == m2m.count_params(cfg)

    def test_attention_gate_zero_at_init(self):
        built = m2m.m2m_init(toy_cfg())
        gates = [t for p, t in built.params.items() if p.endswith("/gate")]
        assert gates and all(np.all(g.data == 0) for g in gates)


class TestRefinementBlock:
    def test_shape_preserved_at_os8(self):
        built = m2m.m2m_init(toy_cfg())
        x = ad.Tensor(np.random.default_rng(0)
                      .standard_normal((16, 8, 8)).astype(np.float32))
        out = m2m.refinement_block(x, built, "os8", 1)
        assert out.shape == (16, 8, 8)

    def test_gate_off_identity_conv_gives_activated_norm(self):
        # in-channel == out-channel block with an identity conv kernel and the
        # residual path removed by fixing channels: check out == act(norm(x)) + x
        built = m2m.m2m_init(toy_cfg())
        base = "m2m/os8/block1"
        w = built.params[f"{base}/conv/weight"]
        ident = np.zeros(w.shape, np.float32)
        for c in range(w.shape[0]):
            ident[c, c, 1, 1] = 1.0
        w.data = ident
        rng = np.random.default_rng(1)
        x = ad.Tensor(rng.standard_normal((16, 6, 6)).astype(np.float32))
        got = m2m.refinement_block(x, built, "os8", 1, training=False)
        normed = ad.batch_norm(x, built.params[f"{base}/bn/gamma"],
                               built.params[f"{base}/bn/beta"],
                               built.buffers[f"{base}/bn"], training=False)
        want = ad.leaky_relu(normed, 0.2).data + x.data  # gate 0 -> attention is identity
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_gradcheck_through_block(self):
        cfg = m2m.M2MConfig(feature_channels=4, stem_widths=(8,), widths=(8, 4, 4),
                            blocks=(1, 1, 1), seed=0)
        built = m2m.m2m_init(cfg)
        # move to float64 and open the attention gate so its path is exercised
        for _, t in built.params.items():
            t.data = t.data.astype(np.float64)
        for st in built.buffers.values():
            st.mean = st.mean.astype(np.float64)
            st.var = st.var.astype(np.float64)
        built.params["m2m/os8/block0/attn/gate"].data = np.array([0.4])
        rng = np.random.default_rng(3)
        x = rng.standard_normal((8, 4, 4))
        lin = rng.standard_normal((8, 4, 4))

        def forward_value():
            out = m2m.refinement_block(ad.Tensor(x), built, "os8", 0, training=True)
            return float((out.data * lin).sum())

        xt = ad.Tensor(x, requires_grad=True)
        out = m2m.refinement_block(xt, built, "os8", 0, training=True)
        ad.sum_(ad.mul(out, ad.Tensor(lin))).backward()

        num = oracles.numeric_grad(forward_value, [x])[0]
        assert oracles.max_rel_error(xt.grad, num) < 1e-4


class TestForward:
    def test_output_scales_64(self):
        rng = np.random.default_rng(0)
        built = m2m.m2m_init(toy_cfg())
        img, mask, feats = random_inputs(rng)
        preds = m2m.m2m_forward(img, mask, feats, built)
        assert preds.os8.shape == (1, 8, 8)
        assert preds.os4.shape == (1, 16, 16)
        assert preds.os1.shape == (1, 64, 64)

    def test_values_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(1)
        built = m2m.m2m_init(toy_cfg(seed=2))
        img, mask, feats = random_inputs(rng)
        preds = m2m.m2m_forward(img, mask, feats, built)
        for t in (preds.os8, preds.os4, preds.os1):
            assert np.all(t.data > 0.0) and np.all(t.data < 1.0)

    def test_saturated_head_bias(self):
        built = m2m.m2m_init(toy_cfg())
        for scale in m2m.SCALES:
            built.params[f"m2m/{scale}/head/bias"].data = np.array([20.0], np.float32)
            built.params[f"m2m/{scale}/head/weight"].data = \
                np.zeros_like(built.params[f"m2m/{scale}/head/weight"].data)
        rng = np.random.default_rng(2)
        img, mask, feats = random_inputs(rng)
        preds = m2m.m2m_forward(img, mask, feats, built)
        for t in (preds.os8, preds.os4, preds.os1):
            np.testing.assert_allclose(t.data, 1.0, atol=1e-6)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        built = m2m.m2m_init(toy_cfg(seed=5))
        img, mask, feats = random_inputs(rng)
        a = m2m.m2m_forward(img, mask, feats, built)
        b = m2m.m2m_forward(img, mask, feats, built)
        for ta, tb in zip((a.os8, a.os4, a.os1), (b.os8, b.os4, b.os1)):
            assert ta.data.tobytes() == tb.data.tobytes()

    @pytest.mark.parametrize("size", [16, 32, 48, 80, 128])
    def test_shape_contract_random_extents(self, size):
        rng = np.random.default_rng(size)
        built = m2m.m2m_init(toy_cfg())
        img = io.ImageRGB(rng.random((3, size, size), dtype=np.float32))
        mask = io.BinaryMask((rng.random((size, size)) > 0.5).astype(np.uint8))
        feats = ad.Tensor(rng.standard_normal((8, size // 16, size // 16))
                          .astype(np.float32))
        preds = m2m.m2m_forward(img, mask, feats, built)
        assert preds.os8.shape == (1, size // 8, size // 8)
        assert preds.os4.shape == (1, size // 4, size // 4)
        assert preds.os1.shape == (1, size, size)

    def test_rectangular_extents(self):
        rng = np.random.default_rng(9)
        built = m2m.m2m_init(toy_cfg())
        img = io.ImageRGB(rng.random((3, 32, 64), dtype=np.float32))
        mask = io.BinaryMask(np.ones((32, 64), np.uint8))
        feats = ad.Tensor(rng.standard_normal((8, 2, 4)).astype(np.float32))
        preds = m2m.m2m_forward(img, mask, feats, built)
        assert preds.os1.shape == (1, 32, 64)

    def test_feature_channel_mismatch_raises(self):
        rng = np.random.default_rng(4)
        built = m2m.m2m_init(toy_cfg(c=8))
        img, mask, _ = random_inputs(rng)
        bad = ad.Tensor(rng.standard_normal((4, 4, 4)).astype(np.float32))
        with pytest.raises(Exception, match="channels"):
            m2m.m2m_forward(img, mask, bad, built)


class TestGradients:
    def test_all_params_receive_gradient(self):
        rng = np.random.default_rng(6)
        cfg = toy_cfg(seed=7)
        built = m2m.m2m_init(cfg)
        enc = encoder_init(channels=8, seed=7)
        img, mask, _ = random_inputs(rng, size=32)
        feats = encode_features(img, enc, training=True)
        preds = m2m.m2m_forward_raw(img.planes, mask.plane[None], feats.tensor,
                                    built, training=True)
        loss = ad.add(ad.add(ad.mean_(preds.os8), ad.mean_(preds.os4)),
                      ad.mean_(preds.os1))
        loss.backward()
        for path, t in list(built.params.items()) + list(enc.params.items()):
            assert t.grad is not None, f"{path} has no grad"
            inside_gated_attention = "/attn/" in path and not path.endswith("gate")
            if inside_gated_attention:
                continue  # zero gate blocks gradient into q/k/v/proj at init
            assert np.any(t.grad != 0), f"{path} grad is all zero"

    def test_full_network_gradcheck(self):
        # tiny all-float64 network, finite differences on sampled coordinates
        cfg = m2m.M2MConfig(feature_channels=4, stem_widths=(6,), widths=(6, 4, 4),
                            blocks=(1, 1, 1), seed=1)
        built = m2m.m2m_init(cfg)
        for _, t in built.params.items():
            t.data = t.data.astype(np.float64)
        for st in built.buffers.values():
            st.mean = st.mean.astype(np.float64)
            st.var = st.var.astype(np.float64)
        built.params["m2m/os8/block0/attn/gate"].data = np.array([0.3])

        rng = np.random.default_rng(11)
        img = rng.random((3, 16, 16))
        mask = np.zeros((1, 16, 16)); mask[:, 4:12, 4:12] = 1
        feats_data = rng.standard_normal((4, 1, 1))
        lin = {s: rng.standard_normal(shape) for s, shape in
               (("os8", (1, 2, 2)), ("os4", (1, 4, 4)), ("os1", (1, 16, 16)))}

        def run(feat_tensor):
            preds = m2m.m2m_forward_raw(img, mask, feat_tensor, built, training=True)
            total = ad.sum_(ad.mul(preds.os8, ad.Tensor(lin["os8"])))
            total = ad.add(total, ad.sum_(ad.mul(preds.os4, ad.Tensor(lin["os4"]))))
            return ad.add(total, ad.sum_(ad.mul(preds.os1, ad.Tensor(lin["os1"]))))

        feats = ad.Tensor(feats_data, requires_grad=True)
        run(feats).backward()

        worst = 0.0
        for path in ["m2m/stem0/conv/weight", "m2m/os8/block0/conv/weight",
                     "m2m/os8/block0/attn/value/weight", "m2m/os8/block0/attn/gate",
                     "m2m/os4/block0/bn/gamma", "m2m/os1/block0/conv/weight",
                     "m2m/os1/head/bias"]:
            t = built.params[path]
            picks = np.random.default_rng(hash(path) % 2 ** 31) \
                .choice(t.size, size=min(6, t.size), replace=False)
            num = oracles.numeric_grad_sampled(lambda: run(ad.Tensor(feats_data)).item(),
                                               t.data, picks)
            worst = max(worst, oracles.max_rel_error(t.grad.reshape(-1)[picks], num))
        num_f = oracles.numeric_grad_sampled(lambda: run(ad.Tensor(feats_data)).item(),
                                             feats_data, range(feats_data.size))
        worst = max(worst, oracles.max_rel_error(feats.grad.reshape(-1), num_f))
        assert worst < 1e-4

    def test_batched_forward_matches_per_sample_inference(self):
        rng = np.random.default_rng(8)
        built = m2m.m2m_init(toy_cfg(seed=9))
        imgs = rng.random((2, 3, 32, 32)).astype(np.float32)
        masks = (rng.random((2, 1, 32, 32)) > 0.5).astype(np.float32)
        feats = rng.standard_normal((2, 8, 2, 2)).astype(np.float32)
        batched = m2m.m2m_forward_raw(imgs, masks, ad.Tensor(feats), built,
                                      training=False)
        for n in range(2):
            single = m2m.m2m_forward_raw(imgs[n], masks[n], ad.Tensor(feats[n]),
                                         built, training=False)
            np.testing.assert_allclose(batched.os1.data[n], single.os1.data,
                                       atol=1e-6)
