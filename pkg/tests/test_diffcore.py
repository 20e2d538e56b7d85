import numpy as np
import pytest

from disguise import diffcore as dc
from helpers import GRAD_RTOL, check_grad

SEEDS = range(20)


def _project(node, rng):
    """Reduce any node to a scalar with a fixed random weighting."""
    r = rng.standard_normal(node.shape)
    return dc.sum_(dc.mul(node, dc.const(r)))


def _away_from(rng, shape, points, gap=0.02, lo=-1.0, hi=1.0):
    x = rng.uniform(lo, hi, size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap) * 2
    return x


# each case: (input builder, graph builder); graph builder gets the leaf and the rng
UNARY = {
    "tanh": (lambda r: r.normal(size=(16, 16, 3)), lambda x, r: dc.tanh(x)),
    "sigmoid": (lambda r: r.normal(scale=2, size=(16, 16, 3)), lambda x, r: dc.sigmoid(x)),
    "abs": (lambda r: _away_from(r, (16, 16, 3), [0.0]), lambda x, r: dc.abs_(x)),
    "square": (lambda r: r.normal(size=(16, 16, 3)), lambda x, r: dc.square(x)),
    "sqrt_eps": (lambda r: r.uniform(0.01, 2.0, size=(16, 16, 3)), lambda x, r: dc.sqrt_eps(x)),
    "spow": (lambda r: _away_from(r, (16, 16, 3), [0.0], gap=0.05), lambda x, r: dc.spow(x, 0.3)),
    "clamp01": (lambda r: _away_from(r, (16, 16, 3), [0.0, 1.0], lo=-0.5, hi=1.5),
                lambda x, r: dc.clamp01(x)),
    "scalar_mul": (lambda r: r.normal(size=(16, 16, 3)), lambda x, r: dc.scalar_mul(x, -2.5)),
    "add_scalar": (lambda r: r.normal(size=(16, 16, 3)), lambda x, r: dc.add_scalar(x, 0.7)),
    "mean_reduce": (lambda r: r.normal(size=(16, 16, 3)), lambda x, r: dc.mean(dc.square(x))),
    "sum_reduce": (lambda r: r.normal(size=(16, 16, 3)), lambda x, r: dc.sum_(dc.tanh(x))),
    "spatial_mean": (lambda r: r.normal(size=(16, 16, 3)), lambda x, r: dc.spatial_mean(x)),
    "hflip": (lambda r: r.normal(size=(16, 16, 3)), lambda x, r: dc.hflip(x)),
    "nearest_upsample2": (lambda r: r.normal(size=(8, 8, 4)), lambda x, r: dc.upsample2(x)),
    "downsample_avg2": (lambda r: r.normal(size=(16, 16, 3)), lambda x, r: dc.downsample_avg2(x)),
    "gaussian_blur_valid": (lambda r: r.normal(size=(16, 16, 3)),
                            lambda x, r: dc.gaussian_blur(x, dc.gaussian_kernel1d(11, 1.5))),
    "gaussian_blur_same": (lambda r: r.normal(size=(16, 16, 3)),
                           lambda x, r: dc.gaussian_blur(x, dc.gaussian_kernel1d(11, 1.5), "same")),
    "conv2d_s1": (lambda r: r.normal(size=(16, 16, 3)),
                  lambda x, r: dc.conv2d(x, r.normal(size=(3, 3, 3, 4)), r.normal(size=4))),
    "conv2d_s2": (lambda r: r.normal(size=(16, 16, 3)),
                  lambda x, r: dc.conv2d(x, r.normal(size=(3, 3, 3, 4)), r.normal(size=4), stride=2)),
}


def unary_error(kind, seed):
    make_input, op = UNARY[kind]
    rng = np.random.default_rng(seed)
    x = make_input(rng)
    op_rng_state = rng.bit_generator.state

    def build(node):
        r = np.random.default_rng(0)
        r.bit_generator.state = op_rng_state
        out = op(node, r)
        return out if out.value.size == 1 else _project(out, r)

    return check_grad(build, x)


BINARY = {"add": dc.add, "sub": dc.sub, "mul": dc.mul, "div": dc.div}


def binary_error(kind, side, seed):
    op = BINARY[kind]
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(16, 16, 3))
    b = rng.uniform(0.5, 2.0, size=(16, 16, 3)) * rng.choice([-1, 1], size=(16, 16, 3))
    r = rng.standard_normal((16, 16, 3))
    if side == 0:
        return check_grad(lambda n: dc.sum_(dc.mul(op(n, b), r)), a)
    return check_grad(lambda n: dc.sum_(dc.mul(op(a, n), r)), b)


@pytest.mark.parametrize("kind", sorted(UNARY))
def test_unary_gradients_match_finite_differences(kind):
    for seed in SEEDS:
        assert unary_error(kind, seed) <= GRAD_RTOL, (kind, seed)


@pytest.mark.parametrize("kind", sorted(BINARY))
@pytest.mark.parametrize("side", [0, 1])
def test_binary_gradients_match_finite_differences(kind, side):
    for seed in SEEDS:
        assert binary_error(kind, side, seed) <= GRAD_RTOL, (kind, side, seed)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("wrt", ["kernel", "bias"])
def test_conv2d_parameter_gradients(stride, wrt):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 8, 8, 3))
        k = rng.normal(size=(3, 3, 3, 5))
        b = rng.normal(size=5)
        r = rng.standard_normal((2, 8 // stride, 8 // stride, 5))
        if wrt == "kernel":
            build = lambda n: dc.sum_(dc.mul(dc.conv2d(x, n, b, stride), r))  # noqa: E731
            assert check_grad(build, k) <= GRAD_RTOL
        else:
            build = lambda n: dc.sum_(dc.mul(dc.conv2d(x, k, n, stride), r))  # noqa: E731
            assert check_grad(build, b) <= GRAD_RTOL


# ------------------------------------------------------------ forward values


def test_conv2d_hand_computed_sums():
    out = dc.primitive_forward("conv2d", [np.ones((4, 4, 1)), np.ones((3, 3, 1, 1))])
    assert out[1, 1, 0] == 9.0
    assert out[0, 0, 0] == 4.0
    assert out[0, 1, 0] == 6.0


def test_conv2d_stride_two_halves_dims():
    out = dc.conv2d(np.zeros((8, 12, 3)), np.zeros((3, 3, 3, 5)), stride=2)
    assert out.shape == (4, 6, 5)


def test_tanh_of_zero_is_zero():
    assert np.array_equal(dc.primitive_forward("tanh", [np.zeros((2, 2, 1))]), np.zeros((2, 2, 1)))


def test_hflip_is_an_involution_and_reverses_width_only():
    x = np.random.default_rng(0).normal(size=(4, 5, 3))
    once = dc.primitive_forward("hflip", [x])
    assert np.array_equal(once, x[:, ::-1, :])
    assert np.array_equal(dc.primitive_forward("hflip", [once]), x)


def test_upsample_then_average_is_identity():
    x = np.random.default_rng(1).normal(size=(3, 4, 2))
    assert np.allclose(dc.downsample_avg2(dc.upsample2(x)).value, x)


def test_gaussian_kernel_is_normalized_and_symmetric():
    k = dc.gaussian_kernel1d(11, 1.5)
    assert abs(k.sum() - 1.0) < 1e-12
    assert np.allclose(k, k[::-1])


def test_clamp01_range_and_subgradient():
    x = np.array([[[-0.5], [0.0], [0.3]], [[1.0], [1.7], [0.999]]])
    out, g = dc.grad_of(lambda n: dc.sum_(dc.clamp01(n)), x)
    assert np.all((dc.clamp01(x).value >= 0) & (dc.clamp01(x).value <= 1))
    assert np.array_equal(g, np.array([[[0.0], [0.0], [1.0]], [[0.0], [0.0], [1.0]]]))


def test_sqrt_eps_gradient_finite_at_zero():
    _, g = dc.grad_of(lambda n: dc.sum_(dc.sqrt_eps(n)), np.zeros(3))
    assert np.all(np.isfinite(g))


@pytest.mark.parametrize("kind", dc.PRIMITIVE_KINDS)
def test_primitives_are_deterministic(kind):
    rng = np.random.default_rng(5)
    x = rng.uniform(0.1, 0.9, size=(8, 8, 3))
    attrs = {"c": 0.5, "p": 0.7, "kernel": dc.gaussian_kernel1d(3, 1.0)}
    if kind == "conv2d":
        inputs = [x, rng.normal(size=(3, 3, 3, 2))]
    elif kind in ("add", "sub", "mul", "div"):
        inputs = [x, x + 0.5]
    else:
        inputs = [x]
    a = dc.primitive_forward(kind, inputs, attrs)
    b = dc.primitive_forward(kind, inputs, attrs)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(a))


def test_unknown_primitive_rejected():
    with pytest.raises(dc.ContractError):
        dc.primitive_forward("softmax", [np.zeros(3)])


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_dimension_mismatch_names_the_kind(kind):
    with pytest.raises(dc.ShapeError, match=kind):
        dc.primitive_forward(kind, [np.ones((2, 3)), np.ones((3, 2))])


def test_conv2d_channel_mismatch():
    with pytest.raises(dc.ShapeError, match="conv2d"):
        dc.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))


# ------------------------------------------------------------------ backward


def test_mean_gradient_is_one_over_n():
    _, g = dc.grad_of(dc.mean, np.arange(12.0).reshape(2, 2, 3))
    assert np.allclose(g, 1 / 12)


def test_sum_of_squares_gradient():
    _, g = dc.grad_of(lambda n: dc.sum_(dc.square(n)), np.array([1.0, 2.0]))
    assert np.array_equal(g, [2.0, 4.0])


def test_fan_out_gradients_add():
    x = np.random.default_rng(3).normal(size=(4, 4, 2))
    _, g_both = dc.grad_of(lambda n: dc.add(dc.sum_(dc.tanh(n)), dc.sum_(dc.square(n))), x)
    _, g1 = dc.grad_of(lambda n: dc.sum_(dc.tanh(n)), x)
    _, g2 = dc.grad_of(lambda n: dc.sum_(dc.square(n)), x)
    assert np.allclose(g_both, g1 + g2, rtol=0, atol=1e-12)


def test_shared_subexpression_fan_out():
    # y = t * t with t = tanh(x): d/dx = 2 t (1 - t^2)
    x = np.array([0.3, -1.2, 2.0])
    _, g = dc.grad_of(lambda n: dc.sum_(dc.mul(dc.tanh(n), dc.tanh(n))), x)
    t = np.tanh(x)
    assert np.allclose(g, 2 * t * (1 - t * t))


def test_backward_requires_scalar_root():
    with pytest.raises(dc.ContractError):
        dc.backward(dc.tanh(dc.leaf(np.zeros(3))))


def test_unused_leaf_gets_zero_gradient():
    _, g = dc.grad_of(lambda n: dc.sum_(dc.const(np.ones(3))), np.ones(3))
    assert np.array_equal(g, np.zeros(3))


# --------------------------------------------------------- finite differences


def test_fd_of_sum_is_ones():
    x = np.random.default_rng(0).normal(size=(3, 4))
    g = dc.finite_difference_grad(lambda v: float(np.sum(v)), x, h=1e-3)
    assert np.allclose(g, 1.0, atol=1e-9)


def test_fd_of_square():
    g = dc.finite_difference_grad(lambda v: float(np.sum(v**2)), np.array([3.0]), h=1e-3)
    assert abs(g[0] - 6.0) < 1e-6


def test_fd_respects_index_subset():
    g = dc.finite_difference_grad(lambda v: float(np.sum(v)), np.zeros(5), indices=[1, 3])
    assert np.array_equal(g, [0, 1, 0, 1, 0])


def test_fd_rejects_nonpositive_step():
    with pytest.raises(dc.ContractError):
        dc.finite_difference_grad(lambda v: 0.0, np.zeros(2), h=0)


def test_disguise_loss_rejects_images_below_ssim_window():
    # 8x8 cannot hold one 11-tap SSIM window; the full-loss gradient check runs at 16x16
    from disguise import codec, forge

    rng = np.random.default_rng(11)
    w = codec.AutoencoderWeights.glorot(0)
    x_b = rng.uniform(0.1, 0.9, size=(8, 8, 3))
    z_c = codec.encode(w, rng.uniform(size=(8, 8, 3))).value
    params = {k: dc.const(v) for k, v in w.params.items()}
    with pytest.raises(dc.ContractError):
        forge.disguise_objective(params, dc.leaf(x_b), x_b, z_c, forge.DisguiseConfig())
