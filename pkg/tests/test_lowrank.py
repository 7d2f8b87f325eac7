import numpy as np
import pytest
from scipy.sparse.linalg import aslinearoperator

from app.errors import ConvergenceError, InvalidInputError
from app.models import EmbeddingWindow
from app.services.grid import Image2D
from app.services.hankel import dense_hbh, frobenius_norm_sq, make_operator
from app.services.lowrank import (
    dense_svd_oracle,
    energy_fractions,
    triples_for_energy,
    truncated_svd,
)


def _grid(dims):
    return np.arange(dims[0], dtype=np.float64)[:, None], np.arange(dims[1], dtype=np.float64)[None, :]


def _rank_cases():
    n, m = _grid((20, 24))
    yield "separable exponential", 0.97 ** n * 1.02 ** m, 1
    yield "one cosine", np.cos(2 * np.pi * (0.11 * n + 0.23 * m) + 0.5), 2
    yield "two cosines", (
        np.cos(2 * np.pi * (0.11 * n + 0.23 * m) + 0.5) + 0.5 * np.cos(2 * np.pi * (0.31 * n - 0.07 * m))
    ), 4


@pytest.mark.parametrize("name,values,rank", list(_rank_cases()), ids=lambda p: p if isinstance(p, str) else None)
def test_finite_rank_signals(name, values, rank):
    img = Image2D(values=values)
    w = EmbeddingWindow.half(img.dims)
    lanczos = truncated_svd(make_operator(img, w), k=8, seed=0)
    oracle = dense_svd_oracle(dense_hbh(img, w))
    assert len(lanczos) == rank
    assert oracle.numerical_rank() == rank
    assert np.allclose(lanczos.sigmas, oracle.sigmas[:rank], rtol=1e-9)


def test_matches_dense_oracle_on_noise(rng):
    img = Image2D(values=rng.standard_normal((12, 14)))
    w = EmbeddingWindow.create(6, 7, img.dims)
    got = truncated_svd(make_operator(img, w), k=5, seed=3)
    oracle = dense_svd_oracle(dense_hbh(img, w))
    assert len(got) == 5
    assert np.allclose(got.sigmas, oracle.sigmas[:5], rtol=1e-7)
    for i in range(5):
        assert abs(got.u[:, i] @ oracle.u[:, i]) == pytest.approx(1.0, abs=1e-6)
        assert abs(got.v[:, i] @ oracle.v[:, i]) == pytest.approx(1.0, abs=1e-6)


def test_top_ten_on_random_image_match_dense_oracle(rng):
    img = Image2D(values=rng.standard_normal((40, 40)))
    w = EmbeddingWindow.half(img.dims)
    got = truncated_svd(make_operator(img, w), k=10, seed=2)
    oracle = dense_svd_oracle(dense_hbh(img, w))
    assert len(got) == 10
    assert np.max(np.abs(got.sigmas - oracle.sigmas[:10]) / oracle.sigmas[:10]) <= 1e-8


def test_vectors_are_orthonormal(rng):
    img = Image2D(values=rng.standard_normal((16, 16)))
    got = truncated_svd(make_operator(img, EmbeddingWindow.half(img.dims)), k=6, seed=1)
    assert np.allclose(got.u.T @ got.u, np.eye(6), atol=1e-10)
    assert np.allclose(got.v.T @ got.v, np.eye(6), atol=1e-10)


def test_same_seed_same_result(rng):
    img = Image2D(values=rng.standard_normal((10, 12)))
    op = make_operator(img, EmbeddingWindow.half(img.dims))
    first = truncated_svd(op, k=4, seed=7)
    second = truncated_svd(op, k=4, seed=7)
    assert np.array_equal(first.sigmas, second.sigmas)
    assert np.array_equal(first.u, second.u)


def test_works_on_plain_matrices(rng):
    matrix = rng.standard_normal((30, 20))
    got = truncated_svd(aslinearoperator(matrix), k=3)
    assert np.allclose(got.sigmas, np.linalg.svd(matrix, compute_uv=False)[:3], rtol=1e-8)
    assert got.window is None


def test_zero_operator_has_no_triples():
    img = Image2D.zeros((8, 8))
    got = truncated_svd(make_operator(img, EmbeddingWindow.half(img.dims)), k=3)
    assert len(got) == 0
    assert got.u.shape == (16, 0)


def test_k_must_fit_the_matrix(cosine_image):
    op = make_operator(cosine_image, EmbeddingWindow.half(cosine_image.dims))
    with pytest.raises(InvalidInputError):
        truncated_svd(op, k=min(op.shape))
    with pytest.raises(InvalidInputError):
        truncated_svd(op, k=0)


def test_iteration_budget(rng):
    img = Image2D(values=rng.standard_normal((40, 40)))
    op = make_operator(img, EmbeddingWindow.half(img.dims))
    with pytest.raises(ConvergenceError) as info:
        truncated_svd(op, k=5, tol=1e-15, max_iter=0)
    assert 0 <= info.value.converged <= 5


def test_energy_accounting(cosine_image):
    w = EmbeddingWindow.half(cosine_image.dims)
    got = truncated_svd(make_operator(cosine_image, w), k=5)
    fractions = energy_fractions(got, frobenius_norm_sq(cosine_image, w))
    assert fractions[:2].sum() > 0.99999
    assert triples_for_energy(fractions) == 2


def test_triples_for_energy_counts():
    assert triples_for_energy(np.array([0.5, 0.3, 0.1999, 0.0001])) == 3
    assert triples_for_energy(np.array([0.2, 0.2])) == 2
    assert energy_fractions(dense_svd_oracle(np.zeros((2, 2))), 0.0).tolist() == [0.0, 0.0]


def test_oracle_guard():
    with pytest.raises(InvalidInputError):
        dense_svd_oracle(np.zeros((10, 10)), guard=50)
