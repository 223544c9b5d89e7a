"""Residual-attention block semantics, model wiring, accounting, and
end-to-end gradients."""
import numpy as np
import pytest
from scipy.special import erf

import woundseg.tensor as T
from woundseg import (ConfigError, Model, ModelConfig, ResAttnBlock,
                      ShapeError, Tape, Tensor, default_config, flops_count,
                      param_count, reduced_config, seg_loss,
                      vanilla_unet_config)
from woundseg.model import model_config_from_kv, model_config_to_kv

from conftest import fd_check
from test_ops import conv_reference


def _to_float64(params):
    for p in params:
        p.data = p.data.astype(np.float64)


# --------------------------------------------------------------------------
# ResAttnBlock: straight-line oracle

def _gelu_np(x):
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _bn_eval_np(x, bn):
    st = bn.st
    scale = st.gamma.data / np.sqrt(st.running_var + st.epsilon)
    return x * scale + (st.beta.data - st.running_mean * scale)


def _block_oracle_eval(block: ResAttnBlock, x: np.ndarray) -> np.ndarray:
    """Recompute the block output with raw numpy from its parameters."""
    h = _gelu_np(_bn_eval_np(
        conv_reference(x, block.conv1.w.data, None, block.conv1.spec), block.bn1))
    h = _gelu_np(_bn_eval_np(
        conv_reference(h, block.conv2.w.data, None, block.conv2.spec), block.bn2))
    f_conv = _gelu_np(_bn_eval_np(
        conv_reference(h, block.conv3.w.data, None, block.conv3.spec), block.bn3))
    if block.res_conv is not None:
        r = conv_reference(x, block.res_conv.w.data,
                           block.res_conv.b.data.reshape(-1), block.res_conv.spec)
    else:
        r = x
    n, c, hh, ww = r.shape
    peak = r.max(axis=(2, 3), keepdims=True)
    f_c = 1.0 / (1.0 + np.exp(-peak))
    cm = r.mean(axis=1, keepdims=True)
    e = np.exp(cm - cm.max(axis=(2, 3), keepdims=True))
    f_s = e / e.sum(axis=(2, 3), keepdims=True)
    return (f_conv + float(block.alpha.data.reshape(())) * (r * f_c)
            + float(block.beta.data.reshape(())) * (r * f_s))


@pytest.mark.parametrize("f_in,f_out,groups", [(3, 4, 2), (4, 4, 4), (5, 6, 1)])
def test_resattn_block_matches_oracle(f_in, f_out, groups):
    rng = np.random.default_rng(f_in * 100 + f_out)
    block = ResAttnBlock("b", f_in, f_out, groups, rng)
    _to_float64(block.params())
    # randomize BN buffers so eval mode is a non-trivial affine map
    for bn in block.bn_layers():
        bn.set_buffers(rng.standard_normal((1, f_out, 1, 1)) * 0.3,
                       rng.uniform(0.5, 2.0, (1, f_out, 1, 1)))
        bn.st.running_mean = bn.st.running_mean.astype(np.float64)
        bn.st.running_var = bn.st.running_var.astype(np.float64)
    x = rng.standard_normal((2, f_in, 5, 6))
    got = block(Tensor(x), "eval").data
    want = _block_oracle_eval(block, x)
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_resattn_zero_gates_reduce_to_main_path():
    """With alpha = beta = 0 the block output is exactly the convolutional
    main path."""
    rng = np.random.default_rng(5)
    block = ResAttnBlock("b", 4, 4, 2, rng, attn_init=0.0)
    x = Tensor(rng.standard_normal((1, 4, 6, 6)).astype(np.float32))
    got = block(x, "eval").data
    import woundseg.ops as ops
    f = ops.gelu(block.bn1(block.conv1(x), "eval"))
    f = ops.gelu(block.bn2(block.conv2(f), "eval"))
    want = ops.gelu(block.bn3(block.conv3(f), "eval")).data
    np.testing.assert_array_equal(got, want)


def test_resattn_identity_residual_when_widths_match():
    rng = np.random.default_rng(6)
    same = ResAttnBlock("b", 4, 4, 2, rng)
    assert same.res_conv is None
    proj = ResAttnBlock("b", 3, 4, 2, rng)
    assert proj.res_conv is not None and proj.res_conv.b is not None


def test_resattn_param_count_formula():
    f_in, f_out, g = 3, 8, 4
    block = ResAttnBlock("b", f_in, f_out, g, np.random.default_rng(0))
    total = sum(p.size for p in block.params())
    want = (f_in * f_out                   # conv1 1x1, no bias
            + f_out * (f_out // g) * 9     # grouped 3x3, no bias
            + f_out * f_out                # conv3 1x1, no bias
            + 3 * 2 * f_out                # three BNs: gamma+beta
            + f_in * f_out + f_out         # residual projection with bias
            + 2)                           # alpha, beta
    assert total == want


def test_grouped_middle_conv_reduces_params():
    rng = np.random.default_rng(0)
    f = 16
    dense = ResAttnBlock("a", f, f, 1, rng)
    grouped = ResAttnBlock("b", f, f, 4, rng)
    dense_w = dense.conv2.w.size
    grouped_w = grouped.conv2.w.size
    assert dense_w == 4 * grouped_w  # groups divide the 3x3 weight count


def test_resattn_rejects_bad_groups():
    with pytest.raises(ConfigError):
        ResAttnBlock("b", 3, 4, 3, np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(20))
def test_fd_full_resattn_block(seed):
    """Criterion: the full block passes central finite differences at 64-bit
    through every learnable and the input."""
    rng = np.random.default_rng(11000 + seed)
    block = ResAttnBlock("b", 3, 4, 2, rng)
    _to_float64(block.params())
    tensors = [Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)]
    tensors += list(block.params())
    proj = Tensor(rng.standard_normal((2, 4, 4, 4)))
    mode = "train" if seed % 2 == 0 else "eval"
    if mode == "eval":
        for bn in block.bn_layers():
            bn.set_buffers(rng.standard_normal((1, 4, 1, 1)) * 0.2,
                           rng.uniform(0.5, 2.0, (1, 4, 1, 1)))
            bn.st.running_mean = bn.st.running_mean.astype(np.float64)
            bn.st.running_var = bn.st.running_var.astype(np.float64)

    def build(x, *params):
        return T.sum_all(T.mul(block(x, mode), proj))

    fd_check(build, tensors)


@pytest.mark.parametrize("seed", range(3))
def test_fd_whole_model_through_loss(seed):
    """End-to-end gradient check: tiny model, seg_loss, every parameter."""
    rng = np.random.default_rng(12000 + seed)
    cfg = reduced_config(widths=(4, 8), blocks_per_stage=1)
    model = Model(cfg, seed=seed)
    params = list(model.params())
    _to_float64(params)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    y = Tensor((rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64))

    def build(x, *ps):
        return seg_loss(model(x, "train"), y)

    fd_check(build, [x] + params, rtol=5e-4, max_entries=120)


# --------------------------------------------------------------------------
# Config validation

def test_config_rejects_non_doubling_widths():
    with pytest.raises(ConfigError, match="double"):
        reduced_config(widths=(8, 24))
    with pytest.raises(ConfigError):
        reduced_config(widths=(8,))


def test_config_rejects_wrong_lengths():
    with pytest.raises(ConfigError):
        ModelConfig(encoder_widths=(8, 16), blocks_per_stage=(1, 1, 1))
    with pytest.raises(ConfigError):
        ModelConfig(encoder_widths=(8, 16), decoder_widths=(8, 8))
    with pytest.raises(ConfigError):
        ModelConfig(block_kind="mystery")
    with pytest.raises(ConfigError):
        ModelConfig(skip_mode="multiply")


def test_config_kv_round_trip():
    for cfg in (default_config(), vanilla_unet_config(),
                reduced_config(widths=(8, 16, 32))):
        assert model_config_from_kv(model_config_to_kv(cfg)) == cfg


def test_config_kv_rejects_unknown_keys():
    kv = model_config_to_kv(default_config())
    kv["mystery_knob"] = "1"
    with pytest.raises(ConfigError, match="mystery_knob"):
        model_config_from_kv(kv)


def test_pool_factor():
    assert reduced_config(widths=(8, 16, 32)).pool_factor == 4
    assert default_config().pool_factor == 32
    assert vanilla_unet_config().pool_factor == 16


# --------------------------------------------------------------------------
# Model wiring

def test_model_forward_shape_and_range():
    model = Model(reduced_config(widths=(8, 16, 32)), seed=0)
    x = Tensor(np.random.default_rng(0).random((2, 3, 32, 32), np.float32) * 2 - 1)
    out = model(x, "eval")
    assert out.shape == (2, 1, 32, 32)
    assert np.all((out.data > 0) & (out.data < 1))


def test_model_forward_rejects_bad_inputs():
    model = Model(reduced_config(widths=(8, 16, 32)), seed=0)
    with pytest.raises(ShapeError, match="divisible"):
        model(Tensor(np.zeros((1, 3, 30, 32), np.float32)), "eval")
    with pytest.raises(ShapeError, match="channels"):
        model(Tensor(np.zeros((1, 4, 32, 32), np.float32)), "eval")
    with pytest.raises(ValueError, match="mode"):
        model(Tensor(np.zeros((1, 3, 32, 32), np.float32)), "predict")


def test_model_deterministic_per_seed():
    a = Model(reduced_config(widths=(8, 16, 32)), seed=3)
    b = Model(reduced_config(widths=(8, 16, 32)), seed=3)
    for pa, pb in zip(a.params(), b.params()):
        assert pa.name == pb.name
        np.testing.assert_array_equal(pa.data, pb.data)
    c = Model(reduced_config(widths=(8, 16, 32)), seed=4)
    diffs = sum(0 if np.array_equal(pa.data, pc.data) else 1
                for pa, pc in zip(a.params(), c.params()))
    assert diffs > 0


def test_model_param_names_unique():
    model = Model(default_config(), seed=0)
    names = [p.name for p in model.params()]
    assert len(names) == len(set(names))


def test_model_state_round_trip():
    src = Model(reduced_config(widths=(8, 16, 32)), seed=1)
    dst = Model(reduced_config(widths=(8, 16, 32)), seed=2)
    dst.load_state_arrays(src.state_arrays())
    x = Tensor(np.random.default_rng(5).random((1, 3, 32, 32), np.float32))
    np.testing.assert_array_equal(src(x, "eval").data, dst(x, "eval").data)


def test_model_state_mismatch_reports_names():
    model = Model(reduced_config(widths=(8, 16, 32)), seed=0)
    state = model.state_arrays()
    state.pop("head.w")
    with pytest.raises(ConfigError, match="head.w"):
        model.load_state_arrays(state)
    state = model.state_arrays()
    state["head.w"] = np.zeros((2, 2, 2, 2), np.float32)
    with pytest.raises(ConfigError, match="shape"):
        model.load_state_arrays(state)


def test_vanilla_forward_shape():
    model = Model(vanilla_unet_config(), seed=0)
    x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16), np.float32))
    out = model(x, "eval")
    assert out.shape == (1, 1, 16, 16)


def test_concat_skip_mode_used_by_vanilla():
    cfg = vanilla_unet_config()
    assert cfg.skip_mode == "concat" and cfg.block_kind == "double_conv"


# --------------------------------------------------------------------------
# Accounting

def test_accounting_rows_sum_to_param_count():
    for cfg in (default_config(), vanilla_unet_config(),
                reduced_config(widths=(8, 16, 32))):
        model = Model(cfg, seed=0)
        hw = (cfg.pool_factor, cfg.pool_factor)
        rows = model.accounting(hw)
        assert sum(r[2] for r in rows) == model.param_count()


def test_vanilla_param_count_is_standard():
    """The concatenation-skip U-Net at widths 64..1024 has a fixed,
    hand-checkable parameter count."""
    assert param_count(vanilla_unet_config()) == 31_031_745


def test_default_param_count_fixed():
    assert param_count(default_config()) == 4_902_625


def test_param_ratio_band():
    ratio = param_count(default_config()) / param_count(vanilla_unet_config())
    assert 0.09 <= ratio <= 0.25


def test_flops_match_hand_computation_single_conv():
    """One 3x3 conv stage checked against the closed-form 2*MAC count."""
    cfg = ModelConfig(encoder_widths=(4, 8), blocks_per_stage=1,
                      decoder_widths=(4,), decoder_blocks=(1,),
                      block_kind="double_conv", skip_mode="concat",
                      group_base=1, grouped_upsample=False)
    model = Model(cfg, seed=0)
    rows = {name: fl for name, _, _, fl in model.accounting((8, 8))}
    # enc0.b0.conv1: 3->4 channels, 3x3, 8x8 output, bias, relu
    macs = 4 * 8 * 8 * 3 * 3 * 3
    want = 2 * macs + 4 * 8 * 8 + 4 * 8 * 8  # +bias +relu
    assert rows["enc0.b0.conv1"] == want


def test_flops_scale_quadratically_with_input():
    cfg = reduced_config(widths=(8, 16, 32))
    f1 = flops_count(cfg, (32, 32))
    f2 = flops_count(cfg, (64, 64))
    assert abs(f2 / f1 - 4.0) < 0.01


def test_accounting_rejects_indivisible_input():
    with pytest.raises(ShapeError):
        Model(reduced_config(widths=(8, 16, 32)), seed=0).accounting((30, 32))


# --------------------------------------------------------------------------
# Optimization reaches every parameter

def test_single_step_updates_every_parameter():
    from woundseg import Lamb
    rng = np.random.default_rng(0)
    model = Model(reduced_config(widths=(8, 16, 32)), seed=0)
    opt = Lamb(model.params(), lr=0.01)
    before = {p.name: p.data.copy() for p in model.params()}
    x = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
    y = Tensor((rng.random((2, 1, 32, 32)) > 0.5).astype(np.float32))
    with Tape() as tape:
        loss = seg_loss(model(x, "train"), y)
        tape.backward(loss)
    opt.step()
    unchanged = [p.name for p in model.params()
                 if np.array_equal(before[p.name], p.data)]
    assert unchanged == []
