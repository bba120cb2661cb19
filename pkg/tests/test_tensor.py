import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segtad import tensor as F
from segtad.gradcheck import TOLERANCE, check_gradients, op_cases, relative_error
from segtad.nn import Adam, BatchNorm1d, CheckpointError, Conv1d, Linear, Module, Parameter, adam_step, load_checkpoint, save_checkpoint
from segtad.tensor import ShapeError, Tensor


def naive_conv1d(x, w, b, stride, dilation, padding):
    c_in, T = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, T + 2 * padding))
    xp[:, padding : padding + T] = x
    t_out = (T + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for t in range(t_out):
            acc = b[o]
            for c in range(c_in):
                for j in range(k):
                    acc += w[o, c, j] * xp[c, t * stride + j * dilation]
            out[o, t] = acc
    return out


def test_conv_identity_kernel():
    x = np.array([[1.0, -2.0, 3.5]])
    y = F.conv1d(Tensor(x), Tensor([[[1.0]]]), Tensor([0.0]))
    assert np.array_equal(y.data, x)


@pytest.mark.parametrize(
    "T,k,s,d,p,expected",
    [(1000, 3, 2, 1, 1, 500), (50, 3, 1, 30, 30, 50)],
)
def test_conv_output_length(T, k, s, d, p, expected):
    assert F.conv1d_output_length(T, k, s, d, p) == expected
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(1, T)), rng.normal(size=(1, 1, k))
    y = F.conv1d(Tensor(x), Tensor(w), Tensor([0.0]), s, d, p)
    assert y.shape == (1, expected)
    assert naive_conv1d(x, w, [0.0], s, d, p).shape == (1, expected)


def test_conv_matches_naive_reference():
    rng = np.random.default_rng(1)
    for _ in range(30):
        c_in, c_out, k = rng.integers(1, 4, size=3)
        s, d, p = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(0, 4))
        T = int(rng.integers(d * (k - 1) + 1, 20))
        x, w, b = rng.normal(size=(c_in, T)), rng.normal(size=(c_out, c_in, k)), rng.normal(size=c_out)
        got = F.conv1d(Tensor(x), Tensor(w), Tensor(b), s, d, p).data
        np.testing.assert_allclose(got, naive_conv1d(x, w, b, s, d, p), atol=1e-10, rtol=0)


def test_conv_errors_name_dimension():
    x = Tensor(np.zeros((2, 5)))
    with pytest.raises(ShapeError) as err:
        F.conv1d(x, Tensor(np.zeros((1, 3, 3))))
    assert err.value.dim == "C_in"
    with pytest.raises(ShapeError):
        F.conv1d(x, Tensor(np.zeros((1, 2, 3))), dilation=5)


def test_softmax_columns_sum_to_one():
    rng = np.random.default_rng(2)
    P = F.softmax_channels(Tensor(rng.normal(scale=20, size=(5, 40)))).data
    np.testing.assert_allclose(P.sum(axis=0), 1.0, atol=1e-12)


def test_interp_resize_examples():
    y = F.linear_interp_resize(Tensor([[0.0, 1.0]]), 3)
    np.testing.assert_allclose(y.data, [[0.0, 0.5, 1.0]], atol=1e-15)
    const = F.linear_interp_resize(Tensor(np.full((2, 7), 3.25)), 19).data
    np.testing.assert_allclose(const, 3.25, atol=1e-14)
    with pytest.raises(ValueError):
        F.linear_interp_resize(Tensor([[1.0, 2.0]]), 0)


def test_empty_tensors_rejected():
    with pytest.raises(ValueError):
        F.softmax_channels(Tensor(np.zeros((0, 3))))


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    F.backward(F.sum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    x = Tensor([1.0, 2.0], requires_grad=True)
    F.backward(F.sum(x * x))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar_and_zero_fills_unreached():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        F.backward(x * 2.0)
    unused = Parameter(np.ones(3))
    F.backward(F.sum(x), [x, unused])
    assert np.array_equal(unused.grad, np.zeros(3))


def test_backward_visits_shared_nodes_once():
    x = Tensor([3.0], requires_grad=True)
    h = x * x
    loss = F.sum(h + h * h)  # d/dx = 2x + 4x^3
    order = F.topological_order(loss)
    assert len(order) == len({id(n) for n in order})
    F.backward(loss)
    assert x.grad[0] == pytest.approx(6.0 + 108.0)


def test_every_op_passes_gradcheck():
    rng = np.random.default_rng(3)
    worst = {}
    for name, fn, inputs in op_cases(rng, trials=10):
        op = name.split("[")[0]
        worst[op] = max(worst.get(op, 0.0), check_gradients(fn, inputs))
    assert {"conv1d", "batchnorm1d", "softmax_channels", "linear_interp_resize", "matmul"} <= set(worst)
    assert max(worst.values()) < TOLERANCE, worst


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)
    assert relative_error(np.array([2.0]), np.array([2.0])) == 0.0


def test_batchnorm_running_stats_and_eval_mode():
    bn = BatchNorm1d(2)
    x = Tensor(np.array([[1.0, 3.0], [0.0, 4.0]]))
    y = bn(x)
    np.testing.assert_allclose(y.data.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(bn.running_mean, [0.2, 0.2])
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * np.array([2.0, 8.0]))  # unbiased variance
    bn.eval()
    z = bn(x).data
    np.testing.assert_allclose(z, (x.data - bn.running_mean[:, None]) / np.sqrt(bn.running_var[:, None] + 1e-5))


def test_adam_zero_gradient_leaves_params():
    w = Parameter(np.array([1.0, -2.0]))
    adam_step([w], [np.zeros(2)], lr=0.1)
    assert np.array_equal(w.data, [1.0, -2.0])


def test_adam_descends_and_converges():
    w = Parameter(np.array([1.0]))
    adam_step([w], [2.0 * w.data], lr=0.1)
    assert w.data[0] < 1.0

    target = np.array([0.7, -1.3])
    scale = np.array([1.0, 4.0])
    w = Parameter(np.zeros(2))
    opt = Adam([w], lr=0.05)
    for step in range(500):
        opt.zero_grad()
        loss = F.sum(F.square(w - target) * scale)
        F.backward(loss, [w])
        opt.set_lr(0.05 if step < 300 else 0.005)
        opt.step()
    assert np.max(np.abs(w.data - target)) < 1e-3


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        Adam([Parameter(np.zeros(1))], lr=0.0)


class _Tiny(Module):
    def __init__(self, rng):
        self.conv = Conv1d(2, 3, 3, rng, padding=1)
        self.fc = [Linear(3, 2, rng), Linear(2, 1, rng, bias=False)]
        self.bn = BatchNorm1d(3)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    m = _Tiny(rng)
    m.bn.running_mean[:] = rng.normal(size=3)
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert "fc.0.weight" in names and "fc.1.bias" not in names
    save_checkpoint(tmp_path / "m.stad", m.state_dict())
    other = _Tiny(np.random.default_rng(99))
    other.load_state_dict(load_checkpoint(tmp_path / "m.stad"))
    for (n1, a), (n2, b) in zip(m.state_dict().items(), other.state_dict().items()):
        assert n1 == n2
        assert a.tobytes() == b.tobytes()


def test_checkpoint_rejects_corruption(tmp_path):
    m = _Tiny(np.random.default_rng(5))
    path = tmp_path / "m.stad"
    save_checkpoint(path, m.state_dict())
    raw = path.read_bytes()
    (tmp_path / "bad.stad").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.stad").write_bytes(raw[:-3])
    for name in ("bad.stad", "short.stad", "missing.stad"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(tmp_path / "a.stad", {"w": np.arange(6.0).reshape(2, 3)})
    raw = (tmp_path / "a.stad").read_bytes()
    # magic, version 1, count 1, name len 1, "w", rank 2, dims 2 and 3, 6 doubles
    assert raw[:4] == b"STAD"
    assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert raw[12:15] == b"\x01\x00w"
    assert raw[15] == 2
    assert len(raw) == 16 + 8 + 48


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_ops_stay_finite(values):
    x = Tensor(np.array([values]))
    for y in (F.sigmoid(x), F.softmax_channels(F.concat_channels([x, x * 2.0])), F.relu(x), F.l2_normalize_rows(x)):
        assert np.all(np.isfinite(y.data))
