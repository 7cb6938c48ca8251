import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from priorquant import tensor as T
from priorquant.tensor import Tensor, backward
from priorquant.vq import (
    Codebook,
    alignment_loss,
    alignment_terms,
    count_activated,
    quantize,
    reset_dead_codes,
    straight_through,
)


def brute_argmin(vectors, entries):
    out = []
    for v in vectors:
        best, best_d = 0, np.inf
        for k, e in enumerate(entries):
            d = float(np.sum((v.astype(np.float64) - e) ** 2))
            if d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def book_of(entries, dtype=np.float64):
    return Codebook(entries=np.asarray(entries, dtype=dtype))


# --------------------------------------------------------------- quantize


def test_quantize_nearest():
    book = book_of([[0, 0], [1, 1]])
    z_q, idx = quantize(np.array([[[0.1, 0.2]]]), book)
    assert idx[0, 0] == 0
    np.testing.assert_array_equal(z_q[0, 0], [0, 0])


def test_quantize_tie_lowest_index():
    _, idx = quantize(np.array([[[0.5, 0.5]]]), book_of([[0, 0], [1, 1]]))
    assert idx[0, 0] == 0


def test_quantize_matches_brute_force_field():
    rng = np.random.default_rng(0)
    book = book_of(rng.standard_normal((16, 2)))
    z = rng.standard_normal((4, 4, 2))
    _, idx = quantize(z, book)
    np.testing.assert_array_equal(idx.reshape(-1), brute_argmin(z.reshape(-1, 2), book.entries.data))


def test_quantize_1000_vectors_exact():
    rng = np.random.default_rng(1)
    book = Codebook(32, 8, seed=3)
    z = rng.uniform(-1 / 32, 1 / 32, (1000, 8)).astype(np.float32)
    _, idx = quantize(z, book)
    np.testing.assert_array_equal(idx, brute_argmin(z, book.entries.data))


def test_quantize_dimension_mismatch():
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 3)), Codebook(4, 2))


def test_empty_codebook_rejected():
    with pytest.raises(ValueError):
        Codebook(0, 4)


def test_usage_counts():
    book = book_of([[0.0], [1.0], [2.0]])
    quantize(np.array([[0.1], [0.9], [1.1], [5.0]]), book)
    np.testing.assert_array_equal(book.usage, [1, 2, 1])


def test_default_init_range():
    book = Codebook(128, 64, seed=0)
    assert np.abs(book.entries.data).max() <= 1 / 128


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 12), d=st.integers(1, 5), n=st.integers(1, 30))
def test_quantize_minimizes_distance(seed, k, d, n):
    rng = np.random.default_rng(seed)
    book = book_of(rng.standard_normal((k, d)))
    z = rng.standard_normal((n, d))
    z_q, _ = quantize(z, book)
    mine = ((z - z_q) ** 2).sum(axis=1)
    every = ((z[:, None] - book.entries.data[None]) ** 2).sum(axis=2)
    assert (mine[:, None] <= every + 1e-12).all()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 12), n=st.integers(1, 30))
def test_quantize_idempotent(seed, k, n):
    rng = np.random.default_rng(seed)
    book = book_of(rng.standard_normal((k, 3)))
    z_q, idx = quantize(rng.standard_normal((n, 3)), book)
    z_q2, idx2 = quantize(z_q, book)
    np.testing.assert_array_equal(z_q2, z_q)
    # duplicate entries would legitimately map to the lowest copy
    if len(np.unique(book.entries.data, axis=0)) == k:
        np.testing.assert_array_equal(idx2, idx)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), batches=st.lists(st.integers(1, 20), min_size=1, max_size=5))
def test_usage_conservation(seed, batches):
    rng = np.random.default_rng(seed)
    book = Codebook(8, 2, seed=seed)
    for n in batches:
        quantize(rng.standard_normal((n, 2)), book)
    assert book.usage.sum() == sum(batches)


# ---------------------------------------------------------- straight-through


def test_straight_through_forward_value():
    rng = np.random.default_rng(2)
    z_hat = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    z_q = rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(straight_through(z_hat, z_q).data, z_q)


def test_straight_through_identity_gradient():
    rng = np.random.default_rng(3)
    z_hat = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    backward(T.tsum(straight_through(z_hat, rng.standard_normal((3, 4)))))
    np.testing.assert_array_equal(z_hat.grad, np.ones((3, 4)))


def test_straight_through_matches_leaf_substitution():
    """grad(z_hat) through the estimator equals grad of a leaf holding z_q."""
    rng = np.random.default_rng(4)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)))
    z_q = rng.standard_normal((2, 5, 5))

    def downstream(x):
        y = T.relu(T.conv2d(x, w))
        return T.tsum(T.mul(y, y))

    z_hat = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    backward(downstream(straight_through(z_hat, z_q)))
    leaf = Tensor(z_q.copy(), requires_grad=True)
    backward(downstream(leaf))
    np.testing.assert_array_equal(z_hat.grad, leaf.grad)


def test_straight_through_gives_codebook_nothing():
    book = Codebook(4, 3, seed=1, dtype=np.float64)
    z_hat = Tensor(np.random.default_rng(5).standard_normal((2, 3)), requires_grad=True)
    z_q, _ = quantize(z_hat, book)
    backward(T.tsum(straight_through(z_hat, z_q)))
    assert book.entries.grad is None


def test_straight_through_shape_mismatch():
    with pytest.raises(ValueError):
        straight_through(Tensor(np.zeros((2, 2)), requires_grad=True), np.zeros((2, 3)))


# ------------------------------------------------------------- alignment


def test_alignment_zero_when_on_entries():
    book = book_of([[0.0, 1.0], [2.0, 3.0]])
    z_hat = Tensor(np.array([[[2.0, 3.0], [0.0, 1.0]]]), requires_grad=True)
    _, idx = quantize(z_hat, book)
    loss = alignment_loss(z_hat, idx, book)
    assert loss.item() == 0.0
    backward(loss)
    assert not z_hat.grad.any() and not book.entries.grad.any()


def test_alignment_single_code_analytic():
    book = book_of([[0.5, -1.0, 2.0]])
    d = np.array([0.3, -0.2, 0.7])
    z_hat = Tensor((book.entries.data[0] + d)[None], requires_grad=True)
    _, idx = quantize(z_hat, book)
    assert alignment_loss(z_hat, idx, book).item() == pytest.approx(2 * (d**2).sum(), rel=1e-12)


def test_alignment_normalized_by_positions():
    book = book_of([[0.0]])
    z_hat = Tensor(np.full((2, 3, 1), 0.5), requires_grad=True)
    _, idx = quantize(z_hat, book)
    assert alignment_loss(z_hat, idx, book).item() == pytest.approx(2 * 0.25)


@pytest.mark.parametrize("seed", range(5))
def test_alignment_gradient_routing(seed):
    rng = np.random.default_rng(seed)
    book = Codebook(8, 4, seed=seed, dtype=np.float64)
    z_hat = Tensor(rng.standard_normal((3, 3, 4)) * 0.1, requires_grad=True)
    _, idx = quantize(z_hat, book)
    codebook_term, encoder_term = alignment_terms(z_hat, idx, book)

    backward(codebook_term)
    assert z_hat.grad is None or not z_hat.grad.any()
    assert book.entries.grad.any()
    unused = np.setdiff1d(np.arange(8), idx)
    assert not book.entries.grad[unused].any()

    z_hat.zero_grad()
    book.entries.zero_grad()
    backward(encoder_term)
    assert book.entries.grad is None or not book.entries.grad.any()
    assert z_hat.grad.any()


# ---------------------------------------------------------- activation count


def test_count_single_index():
    assert count_activated(np.full((4, 4), 3), K=8) == 1


def test_count_all_distinct():
    assert count_activated(np.arange(16), K=16) == 16


def test_count_set_cardinality():
    assert count_activated(np.array([0, 0, 2, 5, 5, 2])) == 3


def test_count_stream():
    assert count_activated([np.array([0, 1]), np.array([1, 7])], K=8) == 3


def test_count_out_of_range():
    with pytest.raises(ValueError):
        count_activated(np.array([0, 8]), K=8)
    with pytest.raises(ValueError):
        count_activated(np.array([-1]))


# ---------------------------------------------------------------- dead codes


def test_reset_all_used_unchanged():
    book = book_of([[0.0], [1.0]])
    quantize(np.array([[0.0], [1.0]]), book)
    before = book.entries.data.copy()
    assert reset_dead_codes(book, np.array([[9.0]]), threshold=1) == []
    np.testing.assert_array_equal(book.entries.data, before)
    assert book.usage.sum() == 0


def test_reset_one_dead_entry():
    book = book_of([[0.0, 0.0], [1.0, 1.0], [50.0, 50.0]])
    quantize(np.array([[0.1, 0.0], [1.0, 0.9]]), book)
    pool = np.array([[3.0, 4.0], [5.0, 6.0]])
    assert reset_dead_codes(book, pool, threshold=1, rng=np.random.default_rng(0)) == [2]
    new = book.entries.data[2]
    assert any((new == p).all() for p in pool)
    z_q, idx = quantize(new[None], book)
    assert idx[0] == 2 and ((z_q[0] - new) ** 2).sum() == 0.0


def test_codebook_save_load(tmp_path):
    book = Codebook(6, 3, seed=2)
    quantize(np.random.default_rng(0).standard_normal((10, 3)), book)
    book.save(tmp_path)
    back = Codebook.load(tmp_path)
    assert back.entries.data.tobytes() == book.entries.data.tobytes()
    np.testing.assert_array_equal(back.usage, book.usage)


def test_usage_csv(tmp_path):
    book = book_of([[0.0], [1.0]])
    quantize(np.array([[0.9], [1.2]]), book)
    book.export_usage_csv(tmp_path / "u.csv")
    assert (tmp_path / "u.csv").read_text().splitlines() == ["entry_index,count", "0,0", "1,2"]
