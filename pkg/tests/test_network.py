import numpy as np
import pytest

from helpers import smooth_image
from mtransfer import ops
from mtransfer.errors import ConfigError, ShapeError
from mtransfer.network import (
    MTNetwork,
    NetworkWidths,
    ScalePlan,
    extract_luminance,
    init_parameters,
    mt_forward,
    subnet_inputs,
)
from mtransfer.tensor import Tensor, backward

TINY = NetworkWidths(divisor=8)


@pytest.fixture(scope="module")
def tiny_net():
    return MTNetwork(TINY, seed=0)


def rgb(*values, size=2):
    return Tensor(np.array(values, dtype=np.float64).reshape(1, 3, 1, 1) * np.ones((1, 3, size, size)), dtype=np.float64)


# -- luminance ----------------------------------------------------------------


def test_luminance_reference_colors():
    assert np.all(extract_luminance(rgb(1, 1, 1)).data == 1.0)
    assert np.all(extract_luminance(rgb(1, 0, 0)).data == 0.299)
    for g in (0.0, 0.25, 0.6, 1.0):
        np.testing.assert_allclose(extract_luminance(rgb(g, g, g)).data, g, rtol=0, atol=1e-15)


def test_luminance_wrong_channels():
    with pytest.raises(ShapeError):
        extract_luminance(Tensor(np.zeros((1, 4, 2, 2))))


def test_chroma_change_leaves_l_block_input_unchanged():
    rng = np.random.default_rng(0)
    u = 2.0**-16
    # multiples of 2**-16 keep every weighted sum an exact integer multiple
    x = rng.integers(20000, 40000, size=(1, 3, 8, 8)) * u
    k = rng.integers(-10, 11, size=(1, 1, 8, 8))
    shifted = x.copy()
    shifted[:, 0:1] += 587 * k * u
    shifted[:, 1:2] -= 299 * k * u
    assert not np.array_equal(x, shifted)
    net = MTNetwork(TINY, seed=1, dtype=np.float64)
    y_a, _, l_a = net.style.branches(Tensor(x))
    y_b, _, l_b = net.style.branches(Tensor(shifted))
    np.testing.assert_array_equal(y_a.data, y_b.data)
    np.testing.assert_array_equal(l_a.data, l_b.data)


# -- widths ---------------------------------------------------------------------


def test_default_widths():
    w = NetworkWidths()
    assert w.rgb == (32, 64, 128) and w.lum == (16, 32, 64) and w.up == (64, 32)
    assert TINY.scaled("rgb") == (4, 8, 16) and TINY.scaled("lum") == (2, 4, 8)


def test_widths_validation():
    with pytest.raises(ConfigError):
        NetworkWidths(rgb=(8, 16, 32), lum=(16, 16, 16))
    with pytest.raises(ConfigError):
        NetworkWidths(divisor=0)


def test_widths_int_round_trip():
    assert NetworkWidths.from_ints(TINY.to_ints()) == TINY


def test_full_model_parameter_count():
    # regression: a ~29 MB float32 model
    assert MTNetwork(NetworkWidths()).num_parameters() == 7_354_377


# -- subnets ----------------------------------------------------------------------


def test_style_subnet_tiny_shape_and_range(tiny_net):
    out = tiny_net.style(Tensor(smooth_image(32)))
    assert out.shape == (1, 3, 32, 32)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_style_subnet_full_width_256():
    net = MTNetwork(NetworkWidths(), seed=0)
    out = net.style(Tensor(smooth_image(256)))
    assert out.shape == (1, 3, 256, 256)


def test_enhance_subnet_64(tiny_net):
    out = tiny_net.enhance(Tensor(smooth_image(64)))
    assert out.shape == (1, 3, 64, 64)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_enhance_reaches_one_eighth(tiny_net):
    _, a, b = tiny_net.enhance.branches(Tensor(smooth_image(64)))
    assert a.shape[2:] == (8, 8) and b.shape[2:] == (8, 8)
    assert tiny_net.enhance.factor == 8 and tiny_net.style.factor == 4


def test_subnet_rejects_bad_sizes(tiny_net):
    with pytest.raises(ShapeError):
        tiny_net.enhance(Tensor(np.zeros((1, 3, 20, 20))))
    with pytest.raises(ShapeError):
        tiny_net.style(Tensor(np.zeros((1, 4, 32, 32))))


def test_refine_zero_init_is_clamped_identity(tiny_net):
    x = np.random.default_rng(2).random((1, 3, 64, 64)) * 1.4 - 0.2
    out = tiny_net.refine(Tensor(x.astype(np.float32)))
    np.testing.assert_array_equal(out.data, np.clip(x.astype(np.float32), 0, 1))


def test_refine_range_with_trained_weights():
    net = MTNetwork(TINY, seed=3)
    net.refine.out.weight.data = np.random.default_rng(3).standard_normal(net.refine.out.weight.shape).astype(np.float32)
    out = net.refine(Tensor(smooth_image(32)))
    assert out.data.min() >= 0 and out.data.max() <= 1
    assert out.shape == (1, 3, 32, 32)


def test_fully_convolutional(tiny_net):
    for sub, base in ((tiny_net.style, 16), (tiny_net.enhance, 16), (tiny_net.refine, 16)):
        assert sub(Tensor(smooth_image(2 * base))).shape[2:] == (2 * base, 2 * base)


# -- init -------------------------------------------------------------------------


def test_init_is_seeded():
    a, b, c = init_parameters(TINY, 5), init_parameters(TINY, 5), init_parameters(TINY, 6)
    for (na, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.parameters(), c.parameters()) if pa.data.any())


def test_norm_params_start_at_identity(tiny_net):
    for name, p in tiny_net.named_parameters():
        if ".gain" in name:
            assert np.all(p.data == 1)
        if ".shift" in name:
            assert np.all(p.data == 0)


def test_parameter_names_are_prefixed(tiny_net):
    names = [n for n, _ in tiny_net.named_parameters()]
    assert len(names) == len(set(names))
    assert {n.split(".")[0] for n in names} == {"style", "enhance", "refine"}
    assert len(tiny_net.subnet_parameters(1)) == sum(n.startswith("style.") for n in names)


def test_state_dict_round_trip():
    a, b = MTNetwork(TINY, seed=0), MTNetwork(TINY, seed=1)
    b.load_state_dict(a.state_dict())
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    bad = a.state_dict()
    bad.pop(next(iter(bad)))
    with pytest.raises(ShapeError):
        b.load_state_dict(bad)


# -- forward ------------------------------------------------------------------------


def test_train_plan_sizes(tiny_net):
    outs = mt_forward(tiny_net, Tensor(smooth_image(64)), ScalePlan.train((32, 64, 64)))
    assert [o.shape[2:] for o in outs] == [(32, 32), (64, 64), (64, 64)]
    for o in outs:
        assert np.isfinite(o.data).all() and o.data.min() >= 0 and o.data.max() <= 1


def test_test_plan_sizes():
    assert ScalePlan.test((256, 512, 512)).sizes == (256, 512, 1024)
    assert ScalePlan.test((32, 64, 64)).sizes == (32, 64, 128)
    assert ScalePlan.test((256, 512, 512), final=1024).sizes == (256, 512, 1024)
    with pytest.raises(ConfigError):
        ScalePlan.test((256, 512, 512), final=1022)
    with pytest.raises(ConfigError):
        ScalePlan.train((256, 512, 1024))


def test_levels_limit_outputs(tiny_net):
    plan = ScalePlan.test((32, 64, 64))
    x = Tensor(smooth_image(128))
    assert [o.shape[2] for o in mt_forward(tiny_net, x, plan, levels=1)] == [32]
    with pytest.raises(ConfigError):
        mt_forward(tiny_net, x, plan, levels=4)


def test_forward_rejects_non_rgb(tiny_net):
    with pytest.raises(ShapeError):
        mt_forward(tiny_net, Tensor(np.zeros((1, 1, 64, 64))), ScalePlan.train((32, 64, 64)))


def test_outputs_depend_only_on_earlier_subnets():
    net = MTNetwork(TINY, seed=4)
    x = Tensor(smooth_image(64))
    plan = ScalePlan.train((32, 64, 64))
    base = mt_forward(net, x, plan)
    for p in net.subnet_parameters(2):
        p.data = p.data + 0.1
    moved = mt_forward(net, x, plan)
    np.testing.assert_array_equal(base[0].data, moved[0].data)
    assert not np.array_equal(base[1].data, moved[1].data)


def test_stage_timings_recorded(tiny_net):
    timings = {}
    mt_forward(tiny_net, Tensor(smooth_image(64)), ScalePlan.train((32, 64, 64)), timings=timings)
    assert set(timings) == {"resize1", "style", "resize2", "enhance", "resize3", "refine"}


def test_subnet_inputs_are_detached_literal_inputs(tiny_net):
    x = Tensor(smooth_image(64))
    plan = ScalePlan.train((32, 64, 64))
    outs = mt_forward(tiny_net, x, plan)
    ins = subnet_inputs(x, outs, plan)
    np.testing.assert_array_equal(ins[0].data, ops.bilinear_resize(x, 32, 32).data)
    np.testing.assert_array_equal(ins[1].data, ops.bilinear_resize(outs[0], 64, 64).data)
    np.testing.assert_array_equal(ins[2].data, outs[1].data)
    assert not any(t.requires_grad for t in ins)


def test_every_subnet_receives_gradient():
    net = MTNetwork(TINY, seed=5)
    net.refine.out.weight.data = 0.01 * np.ones_like(net.refine.out.weight.data)
    outs = mt_forward(net, Tensor(smooth_image(64)), ScalePlan.train((32, 64, 64)))
    terms = [ops.mse(o, Tensor(np.full(o.shape, 0.5, np.float32))) for o in outs]
    loss = ops.add(ops.add(terms[0], terms[1]), terms[2])
    backward(loss)
    for k in (1, 2, 3):
        assert max(np.abs(p.grad_or_zeros()).max() for p in net.subnet_parameters(k)) > 0
