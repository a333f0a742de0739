import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from crrn import tensor as T
from crrn.attention import AttentionMap, apply_attention, compute_attention, init_attention, release_attention
from crrn.gradcheck import grad_check
from crrn.tensor import Parameter, Tensor

from oracles import conv2d_loops


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def amap(a):
    return AttentionMap(Tensor(a), 0, 0)


def test_zero_kernel_gives_zero_map(rng):
    out = compute_attention(Parameter(np.zeros((1, 3, 5, 5))), Tensor(rng.normal(size=(2, 3, 6, 6))))
    assert out.A.shape == (2, 1, 6, 6)
    assert np.all(out.A.data == 0)


def test_constant_input_constant_interior(rng):
    W = Parameter(rng.normal(size=(1, 2, 3, 3)))
    A = compute_attention(W, Tensor(np.full((1, 2, 6, 6), 0.3))).A.data[0, 0]
    interior = A[1:-1, 1:-1]
    assert np.all(interior == interior[0, 0])
    assert not np.all(A == interior[0, 0])


@pytest.mark.parametrize("seed", range(5))
def test_matches_tanh_of_conv_oracle(seed):
    r = np.random.default_rng(seed)
    W = r.normal(size=(1, 3, 3, 3))
    E = r.normal(size=(1, 3, 5, 5))
    A = compute_attention(Parameter(W), Tensor(E)).A.data
    np.testing.assert_allclose(A, np.tanh(conv2d_loops(E, W, None, 1, 1)), rtol=0, atol=1e-12)


def test_apply_zero_map_is_identity(rng):
    E = rng.normal(size=(1, 4, 3, 3))
    assert np.array_equal(apply_attention(Tensor(E), amap(np.zeros((1, 1, 3, 3)))).data, E)
    assert np.array_equal(release_attention(Tensor(E), amap(np.zeros((1, 1, 3, 3)))).data, E)


def test_apply_on_zero_state_replicates_map(rng):
    A = np.tanh(rng.normal(size=(2, 1, 3, 3)))
    out = apply_attention(Tensor(np.zeros((2, 4, 3, 3))), amap(A)).data
    for j in range(4):
        assert np.array_equal(out[:, j:j + 1], A)


def test_shift_is_identical_across_channels(rng):
    E = rng.normal(size=(1, 5, 4, 4))
    A = np.tanh(rng.normal(size=(1, 1, 4, 4)))
    shift = apply_attention(Tensor(E), amap(A)).data - E
    # the added map itself is the same object for every channel
    rep = T.repeat_channels(Tensor(A), 5).data
    assert all(np.array_equal(rep[:, j], rep[:, 0]) for j in range(5))
    np.testing.assert_allclose(shift, rep, atol=1e-15)


def test_spatial_mismatch(rng):
    with pytest.raises(T.ShapeError):
        apply_attention(Tensor(np.zeros((1, 2, 4, 4))), amap(np.zeros((1, 1, 3, 3))))


def test_round_trip_exact_on_dyadic_values(rng):
    # values on a coarse binary grid add and subtract without rounding
    E = np.round(rng.normal(size=(2, 3, 4, 4)) * 2**10) / 2**10
    A = np.round(np.tanh(rng.normal(size=(2, 1, 4, 4))) * 2**10) / 2**10
    assert np.array_equal(release_attention(apply_attention(Tensor(E), amap(A)), amap(A)).data, E)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-1e6, 1e6)),
       hnp.arrays(np.float64, (1, 1, 3, 3), elements=st.floats(-0.999, 0.999)))
def test_round_trip_within_one_rounding(E, A):
    back = release_attention(apply_attention(Tensor(E), amap(A)), amap(A)).data
    bound = np.spacing(np.abs(E) + np.abs(A))
    assert np.all(np.abs(back - E) <= bound)


def test_map_entries_strictly_inside_unit_interval(rng):
    W = init_attention(rng, 4, 3)
    A = compute_attention(W, Tensor(rng.normal(size=(2, 4, 6, 6)))).A.data
    assert np.all(np.abs(A) < 1)


@pytest.mark.parametrize("seed", range(20))
def test_compute_apply_gradient(seed):
    r = np.random.default_rng(seed)
    W = Parameter(r.normal(scale=0.3, size=(1, 3, 3, 3)), "W_A")
    E = Parameter(r.normal(size=(2, 3, 4, 4)), "E")
    probe = Tensor(r.normal(size=(2, 3, 4, 4)))

    def loss():
        return T.sum_all(T.mul(apply_attention(E, compute_attention(W, E)), probe))

    assert grad_check(loss, [W, E]) < 1e-5
