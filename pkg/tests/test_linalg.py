import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefillsim.errors import DomainError, RankError, ShapeError
from prefillsim.linalg import (
    finite_difference_grad,
    kaiming_uniform,
    random_orthonormal_rows,
    rng_from_seed,
    sign_quotient,
    vector_norms,
)


def naive_matmul(a, b):
    # reference triple loop, deliberately independent of numpy's matmul
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def test_matmul_matches_naive_reference():
    rng = rng_from_seed(7)
    a = rng.normal(size=(64, 64))
    b = rng.normal(size=(64, 64))
    assert np.max(np.abs(a @ b - naive_matmul(a, b))) <= 1e-12


def test_matmul_associativity_within_float64():
    rng = rng_from_seed(11)
    for _ in range(5):
        a = rng.normal(size=(16, 8))
        b = rng.normal(size=(8, 12))
        c = rng.normal(size=(12, 5))
        left = (a @ b) @ c
        right = a @ (b @ c)
        denom = max(np.max(np.abs(left)), 1.0)
        assert np.max(np.abs(left - right)) / denom <= 1e-9


def test_rng_is_reproducible_across_calls():
    x = rng_from_seed(123).normal(size=100)
    y = rng_from_seed(123).normal(size=100)
    assert np.array_equal(x, y)
    z = rng_from_seed(123, stream=1).normal(size=100)
    assert not np.array_equal(x, z)


def test_rng_rejects_negative_seed():
    with pytest.raises(DomainError):
        rng_from_seed(-1)


def test_kaiming_bound_is_sqrt6_over_fan_in():
    # fan-in equals the column count; cols=6 makes the bound exactly 1
    m = kaiming_uniform(1000, 6, seed=3)
    assert np.max(np.abs(m)) <= 1.0
    assert np.max(np.abs(m)) > 0.99  # samples should actually reach the bound
    m2 = kaiming_uniform(10, 24, seed=4)
    assert np.max(np.abs(m2)) <= np.sqrt(6.0 / 24.0)


def test_kaiming_mean_near_zero():
    m = kaiming_uniform(400, 250, seed=5)  # 1e5 samples
    assert abs(m.mean()) < 0.01


def test_kaiming_same_seed_bit_identical():
    assert np.array_equal(kaiming_uniform(8, 8, seed=9), kaiming_uniform(8, 8, seed=9))


@pytest.mark.parametrize("r,d", [(1, 1), (1, 8), (4, 16), (64, 64), (128, 256), (256, 256)])
def test_orthonormal_rows_gram_identity(r, d):
    q = random_orthonormal_rows(r, d, seed=21)
    gram = q @ q.T
    assert np.max(np.abs(gram - np.eye(r))) <= 1e-9


def test_orthonormal_rows_rank_error():
    with pytest.raises(RankError):
        random_orthonormal_rows(5, 4, seed=0)
    with pytest.raises(RankError):
        random_orthonormal_rows(0, 4, seed=0)


def test_orthonormal_rows_deterministic():
    a = random_orthonormal_rows(8, 32, seed=77)
    b = random_orthonormal_rows(8, 32, seed=77)
    assert np.array_equal(a, b)


def test_sign_quotient_basics():
    x = np.array([0.0, 1e-3, -4.0])
    out = sign_quotient(x, 1e-12)
    assert out[0] == 0.0
    assert 0.0 < out[1] < 1.0
    assert -1.0 < out[2] < 0.0
    with pytest.raises(DomainError):
        sign_quotient(x, 0.0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20),
    st.floats(1e-15, 1e-3),
)
def test_sign_quotient_magnitude_below_one(values, eps):
    out = sign_quotient(np.array(values), eps)
    assert np.all(np.abs(out) < 1.0)
    assert np.all(np.sign(out) == np.sign(np.array(values)))


def test_finite_difference_on_known_quadratic():
    # f(x) = sum(x^2) has gradient 2x
    x = rng_from_seed(2).normal(size=(3, 4))
    grad = finite_difference_grad(lambda m: float((m * m).sum()), x)
    assert np.max(np.abs(grad - 2 * x)) <= 1e-6


def test_finite_difference_rejects_bad_step():
    with pytest.raises(DomainError):
        finite_difference_grad(lambda m: 0.0, np.zeros((2, 2)), h=0.0)


def test_vector_norms_hand_values():
    assert vector_norms([3.0, 4.0]) == (7.0, 5.0)
    assert vector_norms(np.zeros(5)) == (0.0, 0.0)
    assert vector_norms(np.ones(4)) == (4.0, 2.0)


def test_vector_norms_accepts_column_shape():
    assert vector_norms(np.array([[3.0], [4.0]])) == (7.0, 5.0)


def test_vector_norms_rejects_matrix():
    with pytest.raises(ShapeError):
        vector_norms(np.ones((2, 3)))
