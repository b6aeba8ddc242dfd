import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from piip import numerics as nx
from piip.errors import ContractError, DimensionError, NumericError
from piip.numerics import GradTape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def bilinear_pixel_oracle(img, out_h, out_w):
    """Per-pixel half-pixel bilinear formula, written out longhand."""
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        ly = sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            lx = sx - x0
            out[:, i, j] = ((1 - ly) * (1 - lx) * img[:, y0, x0] + (1 - ly) * lx * img[:, y0, x1]
                            + ly * (1 - lx) * img[:, y1, x0] + ly * lx * img[:, y1, x1])
    return out


def sample_oracle(value, u, v):
    """Four-neighbour weighted sum at normalised (u, v), border clamped."""
    c, h, w = value.shape
    x = min(max(u * w - 0.5, 0.0), w - 1)
    y = min(max(v * h - 0.5, 0.0), h - 1)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * value[:, y0, x0] + fx * (1 - fy) * value[:, y0, x1]
            + (1 - fx) * fy * value[:, y1, x0] + fx * fy * value[:, y1, x1])


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    out = nx.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_sum():
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


@pytest.mark.parametrize("shape", [(5, 4, 3), (8, 8, 8)])
def test_matmul_matches_triple_loop(shape):
    m, k, n = shape
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    out = nx.matmul(Tensor(a), Tensor(b)).data
    ref = naive_matmul(a, b)
    assert np.max(np.abs(out - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_registers_mnk_macs():
    with nx.counting_macs() as counter:
        nx.matmul(Tensor(np.ones((3, 5))), Tensor(np.ones((5, 7))))
        nx.matmul(Tensor(np.ones((2, 3, 5))), Tensor(np.ones((5, 7))))
    assert counter.total == 3 * 5 * 7 * 3


def test_counter_required_for_active_counter():
    with pytest.raises(ContractError):
        nx.active_counter()


# -- layer_norm / softmax / gelu --------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_closed_form():
    out = nx.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-6)
    expect = np.array([[1.0, -1.0]]) / math.sqrt(1.0 + 1e-6)
    np.testing.assert_allclose(out.data, expect, rtol=1e-15)


def test_layer_norm_zero_gain_gives_bias():
    rng = np.random.default_rng(0)
    bias = rng.normal(size=4)
    out = nx.layer_norm(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(bias))
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (3, 4)))


def test_layer_norm_empty_dim():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-15)
    out = nx.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_matches_direct_formula():
    x = np.random.default_rng(3).normal(size=7)
    ref = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(nx.softmax(Tensor(x)).data, ref, rtol=1e-14)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        nx.softmax(Tensor(np.zeros((3, 0))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = nx.softmax(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(nx.softmax(Tensor(x + c)).data, y, atol=1e-6)


def test_gelu_values():
    assert nx.gelu(Tensor([0.0])).data[0] == 0.0
    g = nx.gelu(Tensor([1.0, 30.0, -30.0])).data
    assert g[0] == pytest.approx(0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0))), rel=1e-15)
    assert g[1] == pytest.approx(30.0)
    assert abs(g[2]) < 1e-12


def test_gelu_monotone_on_grid():
    grid = np.linspace(-0.5, 6.0, 400)
    assert (np.diff(nx.gelu(Tensor(grid)).data) > 0).all()


# -- bilinear resize ---------------------------------------------------------

def test_resize_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 7)))
    assert nx.bilinear_resize(x, 5, 7) is x


def test_resize_constant():
    out = nx.bilinear_resize(Tensor(np.full((3, 4, 6), 2.5)), 9, 5)
    np.testing.assert_allclose(out.data, 2.5, rtol=1e-15)


def test_resize_2x2_to_4x4_frozen():
    img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    expect = np.array([[0.0, 0.25, 0.75, 1.0],
                       [0.5, 0.75, 1.25, 1.5],
                       [1.5, 1.75, 2.25, 2.5],
                       [2.0, 2.25, 2.75, 3.0]])
    np.testing.assert_allclose(bilinear_pixel_oracle(img, 4, 4)[0], expect, rtol=0, atol=1e-15)
    np.testing.assert_allclose(nx.bilinear_resize(Tensor(img), 4, 4).data[0], expect, atol=1e-15)


@pytest.mark.parametrize("size", [(3, 5, 2, 9), (7, 4, 16, 3), (6, 6, 2, 3)])
def test_resize_matches_pixel_oracle(size):
    h, w, oh, ow = size
    img = np.random.default_rng(2).normal(size=(2, h, w))
    np.testing.assert_allclose(nx.bilinear_resize(Tensor(img), oh, ow).data,
                               bilinear_pixel_oracle(img, oh, ow), atol=1e-13)


def test_resize_empty_output():
    with pytest.raises(DimensionError):
        nx.bilinear_resize(Tensor(np.zeros((1, 2, 2))), 0, 3)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 4, 5), elements=st.floats(-10, 10)),
       st.integers(1, 11), st.integers(1, 11))
def test_resize_preserves_bounds(img, oh, ow):
    out = nx.bilinear_resize(Tensor(img), oh, ow).data
    slack = 1e-12 * max(1.0, np.abs(img).max())
    assert out.min() >= img.min() - slack
    assert out.max() <= img.max() + slack


# -- grid sampling -----------------------------------------------------------

def test_grid_sample_pixel_centres_exact():
    rng = np.random.default_rng(4)
    for h, w in [(3, 5), (7, 11), (13, 23), (1, 4)]:
        value = rng.normal(size=(3, h, w))
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pts = np.stack([(jj.ravel() + 0.5) / w, (ii.ravel() + 0.5) / h], -1)
        out = nx.grid_sample_bilinear(Tensor(value), Tensor(pts)).data
        np.testing.assert_array_equal(out, value.reshape(3, -1).T)


def test_grid_sample_midpoint_average():
    value = np.random.default_rng(5).normal(size=(2, 4, 4))
    pts = np.array([[2.0 / 4, 1.5 / 4]])  # between pixel (1,1) and (1,2)
    out = nx.grid_sample_bilinear(Tensor(value), Tensor(pts)).data[0]
    np.testing.assert_allclose(out, 0.5 * (value[:, 1, 1] + value[:, 1, 2]), rtol=1e-14)


def test_grid_sample_matches_oracle_with_clamping():
    rng = np.random.default_rng(6)
    value = rng.normal(size=(3, 5, 6))
    pts = rng.uniform(-0.3, 1.3, size=(40, 2))
    out = nx.grid_sample_bilinear(Tensor(value), Tensor(pts)).data
    ref = np.stack([sample_oracle(value, u, v) for u, v in pts])
    np.testing.assert_allclose(out, ref, atol=1e-13)


def test_grid_sample_batched_and_macs():
    rng = np.random.default_rng(7)
    value = rng.normal(size=(2, 3, 4, 4))
    pts = rng.uniform(0, 1, size=(2, 5, 2))
    with nx.counting_macs() as counter:
        out = nx.grid_sample_bilinear(Tensor(value), Tensor(pts)).data
    assert counter.total == 4 * 2 * 5 * 3
    for b in range(2):
        np.testing.assert_allclose(out[b], np.stack([sample_oracle(value[b], *p) for p in pts[b]]), atol=1e-13)


# -- autodiff ----------------------------------------------------------------

def test_tape_quadratic_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        loss = nx.sum(x * x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad.data, [2.0, 4.0])
    err = nx.grad_check(lambda: nx.sum(x * x), [x])
    assert err < 1e-8


def test_tape_consumed_once():
    x = Tensor([1.0], requires_grad=True)
    with GradTape() as tape:
        loss = nx.sum(x * x)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_grad_accumulates_over_shared_use():
    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        loss = nx.sum(x * x + x * 2.0 + x)
    tape.backward(loss)
    assert x.grad.data[0] == pytest.approx(9.0)


def test_grad_check_rejects_float32():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        nx.grad_check(lambda: nx.sum(x), [x])


def test_grad_check_nonfinite_loss():
    x = Tensor([0.0], requires_grad=True)
    with pytest.raises(NumericError), np.errstate(divide="ignore"):
        nx.grad_check(lambda: nx.sum(nx.log(x)), [x])


def test_grad_check_layer_norm():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    g = Tensor(rng.normal(size=6), requires_grad=True)
    b = Tensor(rng.normal(size=6), requires_grad=True)
    w = rng.normal(size=(4, 6))
    assert nx.grad_check(lambda: nx.sum(nx.layer_norm(x, g, b) * w), [x, g, b]) < 1e-6


PRIMITIVE_CASES = {
    "matmul": (lambda a, b: nx.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(3, 4), (4,)]),
    "softmax": (lambda a: nx.softmax(a, axis=-1), [(3, 5)]),
    "log_softmax": (lambda a: nx.log_softmax(a, axis=0), [(3, 5)]),
    "gelu": (lambda a: nx.gelu(a), [(4, 4)]),
    "exp": (lambda a: nx.exp(a), [(5,)]),
    "transpose": (lambda a: nx.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "getitem": (lambda a: a[:, 1:3] * a[np.array([0, 0, 1])][:, :2].sum(), [(2, 4)]),
    "concat": (lambda a, b: nx.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "mean": (lambda a: nx.mean(a, axis=(0, 2), keepdims=True), [(2, 3, 4)]),
    "group_norm": (lambda a, g, b: nx.group_norm(a, 2, g, b), [(2, 4, 3, 3), (4,), (4,)]),
    "resize_up": (lambda a: nx.bilinear_resize(a, 7, 5), [(2, 3, 4)]),
    "resize_down": (lambda a: nx.bilinear_resize(a, 2, 3), [(2, 5, 7)]),
    "conv2d": (lambda a, w, b: nx.conv2d(a, w, b, padding=1), [(2, 3, 5, 4), (4, 3, 3, 3), (4,)]),
    "cross_entropy": (lambda a: nx.cross_entropy(a, np.array([0, 2, 1])), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    probe = None

    def loss():
        nonlocal probe
        out = fn(*params)
        if probe is None:
            probe = rng.normal(size=out.shape)
        return nx.sum(out * probe)

    loss()
    assert nx.grad_check(loss, params) < 1e-6


def test_grid_sample_gradients_generic_points():
    rng = np.random.default_rng(9)
    value = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
    pts = Tensor(rng.uniform(0.05, 0.95, size=(2, 6, 2)), requires_grad=True)
    probe = rng.normal(size=(2, 6, 3))
    assert nx.grad_check(lambda: nx.sum(nx.grid_sample_bilinear(value, pts) * probe), [value, pts]) < 1e-6


def test_conv2d_matches_naive_loops():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 4))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(4):
                    acc = b[o]
                    for c in range(3):
                        for di in range(3):
                            for dj in range(3):
                                acc += w[o, c, di, dj] * xp[n, c, i + di, j + dj]
                    ref[n, o, i, j] = acc
    out = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    np.testing.assert_allclose(out, ref, atol=1e-12)
