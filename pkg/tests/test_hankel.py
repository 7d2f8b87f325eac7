import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from app.errors import InvalidInputError
from app.models import EmbeddingWindow
from app.services.grid import Image2D
from app.services.hankel import (
    dense_hbh,
    embed_terms,
    frobenius_norm_sq,
    hankelize,
    make_operator,
    matvec,
    pixel_weights,
    rmatvec,
)
from app.services.lowrank import dense_svd_oracle
from app.services.synth import noise_generator


@st.composite
def image_and_window(draw, max_side=30):
    n_x = draw(st.integers(1, max_side))
    n_y = draw(st.integers(1, max_side))
    assume(n_x * n_y >= 3)
    l_x = draw(st.integers(1, n_x))
    l_y = draw(st.integers(1, n_y))
    assume(1 < l_x * l_y < n_x * n_y)
    seed = draw(st.integers(0, 2 ** 32 - 1))
    img = Image2D(values=noise_generator(seed).standard_normal((n_x, n_y)))
    return img, EmbeddingWindow.create(l_x, l_y, (n_x, n_y)), seed


@settings(max_examples=100, deadline=None)
@given(image_and_window())
def test_fast_products_match_dense_matrix(case):
    img, w, seed = case
    dense = dense_hbh(img, w)
    op = make_operator(img, w)
    rng = noise_generator(seed + 1)
    v = rng.standard_normal(w.shape[1])
    u = rng.standard_normal(w.shape[0])
    assert np.max(np.abs(matvec(op, v) - dense @ v)) <= 1e-10
    assert np.max(np.abs(rmatvec(op, u) - dense.T @ u)) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(image_and_window(max_side=14))
def test_hankelization_of_full_embedding_is_identity(case):
    img, w, _ = case
    full = dense_svd_oracle(dense_hbh(img, w))
    back = hankelize(embed_terms(full.sigmas, full.u, full.v), w)
    scale = max(np.linalg.norm(img.values), 1e-300)
    assert np.linalg.norm(back.values - img.values) / scale <= 1e-12


def test_dense_entry_layout():
    img = Image2D(values=np.arange(20, dtype=np.float64).reshape(4, 5))
    w = EmbeddingWindow.create(2, 3, img.dims)
    dense = dense_hbh(img, w)
    assert dense.shape == (6, 9)
    # row j*L_x + a, column i*K_x + b holds x(a + b, j + i)
    for j in range(3):
        for a in range(2):
            for i in range(3):
                for b in range(3):
                    assert dense[j * 2 + a, i * 3 + b] == img.values[a + b, j + i]


def test_length_and_window_checks(cosine_image):
    w = EmbeddingWindow.half(cosine_image.dims)
    op = make_operator(cosine_image, w)
    with pytest.raises(InvalidInputError):
        matvec(op, np.zeros(op.shape[1] + 1))
    with pytest.raises(InvalidInputError):
        rmatvec(op, np.zeros(op.shape[1]))
    with pytest.raises(InvalidInputError):
        make_operator(Image2D(values=np.ones((5, 5))), w)
    with pytest.raises(InvalidInputError):
        dense_hbh(cosine_image, w, guard=10)


def test_window_constraints():
    with pytest.raises(InvalidInputError):
        EmbeddingWindow.create(1, 1, (4, 4))
    with pytest.raises(InvalidInputError):
        EmbeddingWindow.create(4, 4, (4, 4))
    with pytest.raises(InvalidInputError):
        EmbeddingWindow.create(5, 1, (4, 4))
    w = EmbeddingWindow.half((7, 10))
    assert (w.l_x, w.l_y, w.k_x, w.k_y) == (4, 5, 4, 6)


def test_pixel_weights_count_entries():
    img = Image2D(values=np.ones((6, 7)))
    w = EmbeddingWindow.create(3, 2, img.dims)
    dense = dense_hbh(img, w)
    assert pixel_weights(w).values.sum() == dense.size
    assert frobenius_norm_sq(img, w) == pytest.approx(np.sum(dense ** 2))


def test_frobenius_norm_matches_dense(rng):
    img = Image2D(values=rng.standard_normal((9, 8)))
    w = EmbeddingWindow.create(4, 5, img.dims)
    assert frobenius_norm_sq(img, w) == pytest.approx(np.sum(dense_hbh(img, w) ** 2), rel=1e-12)


def test_hankelize_of_nothing_is_zero():
    w = EmbeddingWindow.half((4, 4))
    assert not np.any(hankelize([], w).values)


def test_hankelize_rejects_mismatched_vectors():
    w = EmbeddingWindow.half((4, 4))
    with pytest.raises(InvalidInputError):
        hankelize([(1.0, np.ones(3), np.ones(9))], w)


def _random_terms(w: EmbeddingWindow, count: int, seed: int):
    rng = noise_generator(seed)
    return [
        (float(rng.uniform(0.5, 2.0)), rng.standard_normal(w.shape[0]), rng.standard_normal(w.shape[1]))
        for _ in range(count)
    ]


def test_hankelize_is_idempotent():
    w = EmbeddingWindow.create(5, 4, (11, 9))
    once = hankelize(_random_terms(w, 3, seed=21), w)
    full = dense_svd_oracle(dense_hbh(once, w))
    twice = hankelize(embed_terms(full.sigmas, full.u, full.v), w)
    assert np.linalg.norm(twice.values - once.values) <= 1e-12 * np.linalg.norm(once.values)


def test_hankelize_is_linear():
    w = EmbeddingWindow.create(4, 6, (10, 12))
    first, second = _random_terms(w, 2, seed=5), _random_terms(w, 3, seed=6)
    joint = hankelize(first + second, w).values
    parts = hankelize(first, w).values + hankelize(second, w).values
    assert np.allclose(joint, parts, rtol=0, atol=1e-12 * np.abs(joint).max())
    scaled = hankelize([(-2.5 * s, u, v) for s, u, v in first], w).values
    assert np.allclose(scaled, -2.5 * hankelize(first, w).values, rtol=1e-12, atol=1e-14)


def test_products_stay_exact_when_repeated(rng):
    img = Image2D(values=rng.standard_normal((13, 10)))
    w = EmbeddingWindow.create(6, 4, img.dims)
    dense = dense_hbh(img, w)
    op = make_operator(img, w)
    for _ in range(3):
        v = rng.standard_normal(w.shape[1])
        u = rng.standard_normal(w.shape[0])
        assert np.allclose(matvec(op, v), dense @ v, rtol=0, atol=1e-10)
        assert np.allclose(rmatvec(op, u), dense.T @ u, rtol=0, atol=1e-10)
