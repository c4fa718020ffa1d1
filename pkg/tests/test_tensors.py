import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from mad import tensors as tt
from mad.errors import ContractError, DimensionError, GeometryError, NumericError, ParameterError
from mad.io import decode_array, encode_array, load_array, save_array
from mad.tensors import Tensor

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def conv_oracle(x, w, b, dilation=1, pad=0):
    """Brute-force sliding-window cross-correlation."""
    cin, t = x.shape
    cout, _, k = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad)))
    t_out = t + 2 * pad - (k - 1) * dilation
    y = np.zeros((cout, t_out))
    for o in range(cout):
        for i in range(t_out):
            acc = b[o]
            for c in range(cin):
                for j in range(k):
                    acc += w[o, c, j] * xp[c, i + j * dilation]
            y[o, i] = acc
    return y


class TestMatmul:
    def test_identity(self):
        out = tt.matmul(np.eye(2), np.array([[3.0, 4], [5, 6]]))
        assert np.array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_arithmetic(self):
        assert tt.matmul(np.array([[1.0, 2]]), np.array([[3.0], [4]])).data.tolist() == [[11.0]]

    def test_grad_is_column_sums(self):
        a = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        b = np.random.default_rng(1).normal(size=(4, 5))
        tt.backward(tt.sum(tt.matmul(a, b)))
        assert np.allclose(a.grad, np.broadcast_to(b.sum(axis=1), (3, 4)), rtol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            tt.matmul(np.ones((2, 3)), np.ones((4, 5)))


class TestConv1d:
    def test_identity_kernel(self):
        out = tt.conv1d(np.array([[1.0, 2, 3]]), np.ones((1, 1, 1)), np.zeros(1))
        assert out.data.tolist() == [[1, 2, 3]]

    def test_difference_kernel_matches_sliding_window(self):
        x = np.array([[1.0, 2, 3, 4]])
        w = np.array([[[1.0, 0, -1]]])
        out = tt.conv1d(x, w, np.zeros(1))
        assert np.array_equal(out.data, conv_oracle(x, w, np.zeros(1), pad=1))
        assert out.data.tolist() == [[-2, -2, -2, 3]]

    def test_dilated_same_keeps_length(self):
        assert tt.conv1d(np.ones((1, 8)), np.ones((1, 1, 3)), dilation=2).shape == (1, 8)

    @pytest.mark.parametrize("dilation", [1, 2, 4])
    @pytest.mark.parametrize("padding", ["same", "none"])
    def test_random_against_oracle(self, dilation, padding):
        rng = np.random.default_rng(dilation)
        x, w, b = rng.normal(size=(3, 17)), rng.normal(size=(2, 3, 3)), rng.normal(size=2)
        pad = dilation if padding == "same" else 0
        got = tt.conv1d(x, w, b, dilation=dilation, padding=padding).data
        assert np.allclose(got, conv_oracle(x, w, b, dilation, pad), atol=1e-12)

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(3)
        x, w = rng.normal(size=(2, 3, 9)), rng.normal(size=(4, 3, 3))
        batched = tt.conv1d(x, w, dilation=2).data
        for i in range(2):
            assert np.allclose(batched[i], tt.conv1d(x[i], w, dilation=2).data, atol=1e-13)

    def test_valid_length(self):
        assert tt.conv1d(np.ones((1, 10)), np.ones((1, 1, 3)), dilation=2, padding="none").shape == (1, 6)

    def test_collapsed_geometry(self):
        with pytest.raises(GeometryError):
            tt.conv1d(np.ones((1, 4)), np.ones((1, 1, 3)), dilation=2, padding="none")

    def test_even_kernel_same_rejected(self):
        with pytest.raises(ContractError):
            tt.conv1d(np.ones((1, 4)), np.ones((1, 1, 2)))


class TestActivations:
    def test_glu_gate_zero(self):
        x = np.concatenate([np.arange(6.0).reshape(3, 2), np.zeros((3, 2))])
        assert np.allclose(tt.glu(x).data, 0.5 * np.arange(6.0).reshape(3, 2))

    def test_glu_small(self):
        assert tt.glu(np.array([[2.0], [0.0]])).data.tolist() == [[1.0]]

    def test_glu_odd_channels(self):
        with pytest.raises(DimensionError):
            tt.glu(np.ones((3, 2)))

    def test_gelu_zero(self):
        assert tt.gelu(np.array([0.0])).item() == 0.0

    @given(arrays(np.float64, 7, elements=finite))
    def test_gelu_odd_part_is_identity(self, x):
        # x*Phi(x) - (-x)*Phi(-x) = x; the sum form only holds at x = 0
        assert np.allclose(tt.gelu(x).data - tt.gelu(-x).data, x, atol=1e-12)

    def test_gelu_one_by_quadrature(self):
        phi, _ = integrate.quad(lambda u: math.exp(-u * u / 2) / math.sqrt(2 * math.pi), -np.inf, 1.0,
                                epsabs=1e-14, epsrel=1e-14)
        assert abs(tt.gelu(np.array([1.0])).item() - phi) < 1e-12


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(tt.softmax(np.zeros(5)).data, 0.2)

    def test_closed_form(self):
        assert np.allclose(tt.softmax(np.array([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)

    @settings(max_examples=50)
    @given(arrays(np.float64, (3, 6), elements=finite), finite)
    def test_shift_invariant_and_normalized(self, x, c):
        s = tt.softmax(x, axis=1).data
        assert np.allclose(s, tt.softmax(x + c, axis=1).data, atol=1e-12)
        assert np.all(s >= 0)
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_large_logits_stable(self):
        assert np.allclose(tt.softmax(np.array([1000.0, 1000.0])).data, 0.5)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        tt.backward(tt.sum(x))
        assert np.array_equal(x.grad, np.ones(4))

    def test_square_gives_2x(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        tt.backward(tt.sum(x * x))
        assert np.array_equal(x.grad, 2 * x.data)

    def test_ignored_leaf_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        tt.backward(tt.sum(x), leaves=[x, y])
        assert np.array_equal(y.grad, np.zeros(2))

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            tt.backward(Tensor(np.ones(3), requires_grad=True) * 2)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        tt.backward(tt.sum(y + y))
        assert x.grad.tolist() == [8.0]

    def test_graph_order_is_execution_order(self):
        x = Tensor(np.ones(2), requires_grad=True)
        loss = tt.sum(tt.exp(x) * 3.0)
        ids = [n._id for n in tt.ComputeGraph(loss).nodes]
        assert ids == sorted(ids) and len(set(ids)) == len(ids)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with tt.no_grad():
            y = tt.exp(x)
        assert not y.requires_grad


def test_non_finite_is_error():
    with pytest.raises(NumericError):
        tt.log(np.array([0.0]))
    with pytest.raises(NumericError):
        tt.exp(np.array([1e4]))


def test_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 3, 20)), rng.normal(size=(4, 3, 3))
    assert tt.conv1d(x, w, dilation=2).data.tobytes() == tt.conv1d(x, w, dilation=2).data.tobytes()


class TestGradCheck:
    def test_quadratic_is_exact(self):
        x = Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
        assert tt.grad_check(lambda: tt.sum(tt.square(x)) * 0.5, [x]) < 1e-8

    @pytest.mark.parametrize("eps", [0.0, -1e-5, 0.1])
    def test_eps_range(self, eps):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ParameterError):
            tt.grad_check(lambda: tt.sum(x), [x], eps=eps)

    def test_detects_wrong_gradient(self):
        x = Tensor(np.array([0.7, 1.3]), requires_grad=True)

        def f():
            y = tt.sum(x * x)
            y._backward = lambda g: (np.zeros_like(x.data),) * len(y._parents)
            return y
        assert tt.grad_check(f, [x]) > 0.5

    def test_random_subset_for_large_params(self):
        x = Tensor(np.random.default_rng(1).normal(size=500), requires_grad=True)
        assert tt.grad_check(lambda: tt.sum(tt.tanh(x)), [x], max_coords=64) < 1e-6


class TestContainer:
    def test_round_trip(self, tmp_path):
        a = np.random.default_rng(0).normal(size=(3, 4, 2))
        save_array(tmp_path / "a.madt", a)
        assert np.array_equal(load_array(tmp_path / "a.madt"), a)

    def test_layout(self):
        buf = encode_array(np.array([[1.0, 2.0, 3.0]]))
        assert buf[:4] == b"MADT"
        assert tuple(buf[4:8]) == (1, 1, 2, 0)
        assert int.from_bytes(buf[8:16], "little") == 1
        assert int.from_bytes(buf[16:24], "little") == 3
        assert np.frombuffer(buf[24:], "<f8").tolist() == [1, 2, 3]

    def test_bad_magic(self):
        with pytest.raises(ContractError):
            decode_array(b"NOPE" + bytes(12))

    def test_truncated_payload(self):
        with pytest.raises(ContractError):
            decode_array(encode_array(np.ones(4))[:-8])
