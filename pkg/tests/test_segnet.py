import math

import numpy as np
import pytest

import oracles
from mitoseg import ndcore as nd
from mitoseg.losses import combined_loss
from mitoseg.ndcore import Tensor
from mitoseg.segnet import (CBAM, CSAG, PLUMBING_VARIANTS, VARIANTS, ConfigError, ConvGRUCell,
                            PaddingError, SegConfig, architecture_manifest, build_dscrb,
                            build_segnet, cbam_attention, count_parameters, csag_fuse, gru_fuse,
                            seg_forward)


def f64(x):
    return Tensor(x, dtype=np.float64)


# -- DSCRB ------------------------------------------------------------------------------
def test_dscrb_a_downsamples():
    block = build_dscrb("a", 32, 64)
    out = block(Tensor(np.random.default_rng(0).normal(size=(1, 32, 64, 64))))
    assert out.shape == (1, 64, 32, 32)


def test_dscrb_b_zero_main_path_is_relu_shortcut():
    block = build_dscrb("b", 64, 64, use_batchnorm=False)
    for p in block.parameters():
        p.data[...] = 0
    x = np.random.default_rng(1).normal(size=(1, 64, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(block(Tensor(x)).data, np.maximum(x, 0))


def test_dscrb_b_unequal_channels_gets_projection():
    block = build_dscrb("b", 16, 32)
    assert block.shortcut is not None
    assert block(Tensor(np.zeros((1, 16, 8, 8)))).shape == (1, 32, 8, 8)


def test_dscrb_bad_variant():
    with pytest.raises(ConfigError):
        build_dscrb("c", 8, 8)


@pytest.mark.parametrize("c", [32, 64, 128])
def test_dsc_layer_ratio_near_one_eighth(c):
    block = build_dscrb("b", c, c)
    for unit in (block.conv1, block.conv2):
        dsc = unit.conv.dw_weight.size + unit.conv.pw_weight.size
        assert 1 / 9 <= dsc / (9 * c * c) <= 1 / 7


# -- full model -----------------------------------------------------------------------------
def test_bottleneck_and_output_shape():
    model = build_segnet(SegConfig(variant="dscrb_csag", base_width=32))
    out = model(Tensor(np.random.default_rng(2).uniform(size=(1, 3, 256, 256))))
    assert out.shape == (1, 1, 256, 256)
    assert model.trace["E4"] == (1, 256, 32, 32)
    assert np.all(out.data > 0) and np.all(out.data < 1)


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_every_variant_builds_and_runs(variant):
    model = build_segnet(SegConfig(variant=variant, base_width=8)).eval()
    out = model(Tensor(np.random.default_rng(3).uniform(size=(1, 3, 256, 256))))
    assert out.shape == (1, 1, 256, 256)
    assert np.all((out.data > 0) & (out.data < 1))
    # exactly three stride-2 reductions on the encoder path
    spatial = [model.trace[f"E{i}"][2] for i in range(1, 5)]
    assert spatial == [256, 128, 64, 32]
    # skip-level shapes agree before fusion
    for lvl in (1, 2, 3):
        assert model.trace[f"E{lvl}"] == model.trace[f"U{lvl}"] == model.trace[f"CSF{lvl}"]


def test_unknown_variant():
    with pytest.raises(ConfigError):
        SegConfig(variant="unet")


def test_indivisible_extent_rejected():
    model = build_segnet(SegConfig(base_width=4))
    with pytest.raises(PaddingError):
        model(Tensor(np.zeros((1, 3, 36, 40))))


def test_dscrb_fewer_params_per_replaced_layer():
    plain = build_segnet(SegConfig(variant="dsc_cbam", base_width=32))
    dscrb = build_segnet(SegConfig(variant="dscrb_csag", base_width=32))
    for lvl in ("enc2", "enc3", "enc4"):
        replaced = getattr(plain, lvl).layers[1].conv          # second plain 3×3 conv
        replacement = getattr(dscrb, lvl).layers[0].conv2.conv  # DSC layer in the a-block
        n_plain = replaced.weight.size
        n_dsc = replacement.dw_weight.size + replacement.pw_weight.size
        assert n_dsc < n_plain
    enc = lambda m: sum(c for name, _, c in count_parameters(m)["layers"] if name.startswith("enc"))
    assert enc(dscrb) < enc(plain)


def test_encoder_manifest_independent_of_fusion():
    def enc_rows(variant):
        rows = count_parameters(build_segnet(SegConfig(variant=variant, base_width=8)))["layers"]
        return [r for r in rows if r[0].startswith("enc")], {r[0] for r in rows if ".fusion." not in r[0]}
    base_enc, base_names = enc_rows("dscrb_add")
    for variant in ("dscrb_cbam", "dscrb_cbam_gru", "dscrb_csag"):
        enc, names = enc_rows(variant)
        assert enc == base_enc
        assert names == base_names
    assert enc_rows("dsc_add")[0] == enc_rows("dsc_cbam")[0] == enc_rows("dsc_cbam_gru")[0]
    assert set(PLUMBING_VARIANTS) == {"dsc_add", "dscrb_add"}


def test_manifest_deterministic_and_resummed():
    cfg = SegConfig(variant="dscrb_csag", base_width=32)
    a, b = count_parameters(build_segnet(cfg)), count_parameters(build_segnet(cfg))
    assert a == b
    assert a["total"] == sum(math.prod(shape) for _, shape, _ in a["layers"])
    text = architecture_manifest(build_segnet(cfg))
    assert "config.variant = dscrb_csag" in text
    assert text.strip().endswith(f"total\t{a['total']}")


def test_count_parameters_trivial_cases():
    assert count_parameters(nd.Module())["total"] == 0
    assert count_parameters(nd.Conv2d(64, 64, 3, bias=False))["total"] == 36864


def test_eval_mode_is_deterministic():
    model = build_segnet(SegConfig(base_width=4)).eval()
    x = Tensor(np.random.default_rng(4).uniform(size=(2, 3, 256, 256)))
    a = seg_forward(model, x).data
    b = seg_forward(model, x).data
    assert a.shape == (2, 1, 256, 256)
    np.testing.assert_array_equal(a, b)


def test_first_layer_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    model = build_segnet(SegConfig(base_width=4, seed=3)).to(np.float64)
    x = f64(rng.uniform(size=(1, 3, 32, 32)))
    g = (rng.uniform(size=(1, 1, 32, 32)) < 0.2).astype(np.float64)
    weight = model.enc1.layers[0].conv.weight

    def loss_value():
        return combined_loss(model(x), g).item()

    model.zero_grad()
    combined_loss(model(x), g).backward()
    analytic = weight.grad.copy()
    flat = weight.data.reshape(-1)

    def central(i, h):
        old = flat[i]
        flat[i] = old + h
        lp = loss_value()
        flat[i] = old - h
        lm = loss_value()
        flat[i] = old
        return (lp - lm) / (2 * h)

    # ReLU / max kinks can sit within one step of a weight; a coordinate counts as smooth when
    # two step sizes agree, and only smooth coordinates are compared to the analytic value
    checked = 0
    for i in rng.choice(flat.size, size=16, replace=False):
        coarse, fine = central(i, 1e-5), central(i, 1e-6)
        if abs(coarse - fine) > 1e-6 * max(1.0, abs(fine)):
            continue
        checked += 1
        assert abs(analytic.reshape(-1)[i] - coarse) / max(1e-3, abs(coarse)) < 1e-3
    assert checked >= 8


# -- attention and fusion -----------------------------------------------------------------------
def test_cbam_zero_input_gives_half():
    cbam = CBAM(8, reduction=4)
    for conv in (cbam.mlp_in, cbam.mlp_out, cbam.spatial):
        conv.bias.data[...] = 0
    ch, sp = cbam_attention(cbam, Tensor(np.zeros((2, 8, 5, 5))))
    assert ch.shape == (2, 8, 1, 1) and sp.shape == (2, 1, 5, 5)
    np.testing.assert_array_equal(ch.data, 0.5)
    np.testing.assert_array_equal(sp.data, 0.5)


def test_cbam_reduction_clamps_hidden_size():
    cbam = CBAM(4, reduction=16)
    assert cbam.mlp_in.weight.shape[0] == 1


def test_cbam_matches_numpy_oracle():
    rng = np.random.default_rng(6)
    cbam = CBAM(6, reduction=2, rng=rng).to(np.float64)
    for conv in (cbam.mlp_in, cbam.mlp_out, cbam.spatial):
        conv.bias.data[...] = rng.normal(size=conv.bias.shape)
    f = rng.normal(size=(2, 6, 7, 5))
    ch, sp = cbam(f64(f))
    np.testing.assert_allclose(ch.data, oracles.channel_attention(cbam, f), atol=1e-6)
    np.testing.assert_allclose(sp.data, oracles.spatial_attention(cbam, f), atol=1e-6)


def test_gru_zero_weights_halves_hidden_state():
    cell = ConvGRUCell(3)
    for p in cell.parameters():
        p.data[...] = 0
    h = np.random.default_rng(7).normal(size=(1, 3, 4, 4)).astype(np.float32)
    out = gru_fuse(cell, Tensor(np.ones_like(h)), Tensor(h))
    np.testing.assert_array_equal(out.data, 0.5 * h)


def test_gru_shape_and_mismatch():
    cell = ConvGRUCell(2)
    x = Tensor(np.ones((1, 2, 3, 3)))
    assert cell(x, x).shape == (1, 2, 3, 3)
    with pytest.raises(nd.ShapeError):
        cell(x, Tensor(np.ones((1, 2, 3, 4))))


def test_gru_scalar_hand_evaluation():
    rng = np.random.default_rng(8)
    cell = ConvGRUCell(2, rng=rng).to(np.float64)
    for conv in (cell.w_z, cell.w_r, cell.w_h):
        conv.bias.data[...] = rng.normal(size=2)
    x, h = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 2, 2, 2))
    got = cell(f64(x), f64(h)).data
    W = lambda conv: conv.weight.data[:, :, 0, 0]
    B = lambda conv: conv.bias.data if conv.bias is not None else np.zeros(2)
    s = lambda v: 1 / (1 + math.exp(-v))
    for i in range(2):
        for j in range(2):
            xv, hv = x[0, :, i, j], h[0, :, i, j]
            z = [s(sum(W(cell.w_z)[o, c] * xv[c] + W(cell.u_z)[o, c] * hv[c] for c in range(2)) + B(cell.w_z)[o]) for o in range(2)]
            r = [s(sum(W(cell.w_r)[o, c] * xv[c] + W(cell.u_r)[o, c] * hv[c] for c in range(2)) + B(cell.w_r)[o]) for o in range(2)]
            rh = [r[c] * hv[c] for c in range(2)]
            cand = [math.tanh(sum(W(cell.w_h)[o, c] * xv[c] + W(cell.u_h)[o, c] * rh[c] for c in range(2)) + B(cell.w_h)[o]) for o in range(2)]
            for o in range(2):
                assert got[0, o, i, j] == pytest.approx((1 - z[o]) * hv[o] + z[o] * cand[o], abs=1e-6)


def _random_gate(rng, c=4, spatial_kernel=1):
    gate = CSAG(c, reduction=2, spatial_kernel=spatial_kernel, rng=rng).to(np.float64)
    for p in gate.parameters():
        if p.ndim == 1:
            p.data[...] = 0.1 * rng.normal(size=p.shape)
    return gate


def test_csag_zero_inputs():
    gate = _random_gate(np.random.default_rng(9))
    z = f64(np.zeros((1, 4, 6, 6)))
    np.testing.assert_array_equal(csag_fuse(gate, z, z).data, 0)


def test_csag_strictly_attenuates():
    rng = np.random.default_rng(10)
    gate = _random_gate(rng)
    e, d = rng.normal(size=(2, 4, 6, 6)), rng.normal(size=(2, 4, 6, 6))
    out = gate(f64(e), f64(d)).data
    assert out.shape == e.shape
    assert np.all(np.abs(out) < np.abs(e + d))


def test_csag_matches_compositional_oracle():
    rng = np.random.default_rng(11)
    gate = _random_gate(rng)
    e, d = rng.normal(size=(1, 4, 5, 6)), rng.normal(size=(1, 4, 5, 6))
    np.testing.assert_allclose(gate(f64(e), f64(d)).data, oracles.csag(gate, e, d), atol=1e-6)


def test_csag_is_asymmetric():
    rng = np.random.default_rng(12)
    gate = _random_gate(rng)
    e, d = f64(rng.normal(size=(1, 4, 6, 6))), f64(rng.normal(size=(1, 4, 6, 6)))
    assert not np.allclose(gate(e, d).data, gate(d, e).data)


def test_csag_role_flag_swaps_gru_arguments():
    rng = np.random.default_rng(13)
    gate = _random_gate(rng)
    e, d = f64(rng.normal(size=(1, 4, 6, 6))), f64(rng.normal(size=(1, 4, 6, 6)))
    forward = gate(e, d).data
    gate.encoder_is_input = False
    swapped = gate(d, e).data
    np.testing.assert_allclose(forward, swapped, atol=1e-12)


def test_csag_shape_mismatch():
    gate = CSAG(4)
    with pytest.raises(nd.ShapeError):
        gate(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 4, 2))))


def test_spatial_gru_kernel_configurable():
    rng = np.random.default_rng(14)
    gate = _random_gate(rng, spatial_kernel=3)
    assert gate.gru_spatial.w_z.weight.shape == (1, 1, 3, 3)
    e, d = rng.normal(size=(1, 4, 5, 5)), rng.normal(size=(1, 4, 5, 5))
    assert gate(f64(e), f64(d)).shape == (1, 4, 5, 5)
