"""Layer forwards vs float64 oracles; layer backwards vs finite differences."""

import numpy as np
import pytest

from ssmprune import tensor as tn
from ssmprune import layers as ly
from ssmprune.errors import CapacityError, ShapeError, TokenError

from oracles import (
    finite_diff,
    naive_attention,
    naive_causal_conv,
    naive_cross_entropy,
    naive_gated_mlp,
    naive_rmsnorm,
    rel_err,
)


def rnd(rng, *shape, scale=1.0):
    return (rng.uniform(-2.0, 2.0, size=shape) * scale).astype(np.float32)


def fd_loss(build):
    return lambda: build().scalar()


def check_grads(build, params, tol=1e-3):
    with tn.tape() as g:
        loss = build()
    g.backward(loss)
    fds = finite_diff(fd_loss(build), [p.data for p in params])
    for p, fd in zip(params, fds):
        err = rel_err(p.grad, fd)
        assert err < tol, f"{p.name or 'tensor'}: rel err {err:.2e}"


# -- linear -----------------------------------------------------------------

def test_linear_forward_matches_oracle():
    rng = np.random.default_rng(10)
    x = rnd(rng, 2, 5, 4)
    w = rnd(rng, 6, 4, scale=0.5)
    b = rnd(rng, 6, scale=0.1)
    out = ly.linear(tn.Tensor(x), tn.Tensor(w), tn.Tensor(b)).data
    want = x.astype(np.float64) @ w.astype(np.float64).T + b.astype(np.float64)
    assert rel_err(out, want) < 1e-6


def test_linear_gradients():
    rng = np.random.default_rng(11)
    x = tn.Tensor(rnd(rng, 5, 4), requires_grad=True, name="x")
    w = tn.Tensor(rnd(rng, 3, 4, scale=0.5), requires_grad=True, name="w")
    b = tn.Tensor(rnd(rng, 3, scale=0.1), requires_grad=True, name="b")
    r = tn.Tensor(rnd(rng, 5, 3))
    check_grads(lambda: tn.tsum(tn.mul(ly.linear(x, w, b), r)), [x, w, b])


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        ly.linear(tn.Tensor(np.ones((2, 5))), tn.Tensor(np.ones((3, 4))))


# -- rmsnorm ----------------------------------------------------------------

def test_rmsnorm_forward_matches_oracle():
    rng = np.random.default_rng(12)
    x = rnd(rng, 7, 6)
    s = rnd(rng, 6, scale=0.5)
    out = ly.rmsnorm(tn.Tensor(x), tn.Tensor(s)).data
    assert rel_err(out, naive_rmsnorm(x, s)) < 1e-6


def test_rmsnorm_zero_input_is_finite():
    # eps=1e-5 keeps the all-zeros row out of a divide-by-zero
    out = ly.rmsnorm(tn.Tensor(np.zeros((3, 8))), tn.Tensor(np.ones(8))).data
    assert np.isfinite(out).all()
    assert np.abs(out).max() == 0.0


def test_rmsnorm_gradients():
    rng = np.random.default_rng(13)
    x = tn.Tensor(rnd(rng, 4, 6), requires_grad=True, name="x")
    s = tn.Tensor(rnd(rng, 6, scale=0.5), requires_grad=True, name="scale")
    r = tn.Tensor(rnd(rng, 4, 6))
    check_grads(lambda: tn.tsum(tn.mul(ly.rmsnorm(x, s), r)), [x, s])


# -- causal conv ------------------------------------------------------------

def test_conv_forward_matches_oracle():
    rng = np.random.default_rng(14)
    x = rnd(rng, 1, 9, 5)
    k = rnd(rng, 5, 4, scale=0.5)
    out = ly.causal_conv1d(tn.Tensor(x), tn.Tensor(k)).data[0]
    assert rel_err(out, naive_causal_conv(x[0], k)) < 1e-6


def test_conv_is_causal():
    rng = np.random.default_rng(15)
    x = rnd(rng, 1, 12, 3)
    k = rnd(rng, 3, 4)
    base = ly.causal_conv1d(tn.Tensor(x), tn.Tensor(k)).data.copy()
    x_mut = x.copy()
    x_mut[0, 8:, :] = 9.0  # poke the future
    out = ly.causal_conv1d(tn.Tensor(x_mut), tn.Tensor(k)).data
    np.testing.assert_array_equal(out[0, :8], base[0, :8])
    assert np.abs(out[0, 8:] - base[0, 8:]).max() > 0


def test_conv_gradients():
    rng = np.random.default_rng(16)
    x = tn.Tensor(rnd(rng, 2, 6, 3), requires_grad=True, name="x")
    k = tn.Tensor(rnd(rng, 3, 4, scale=0.5), requires_grad=True, name="kernel")
    r = tn.Tensor(rnd(rng, 2, 6, 3))
    check_grads(lambda: tn.tsum(tn.mul(ly.causal_conv1d(x, k), r)), [x, k])


# -- attention --------------------------------------------------------------

def test_attention_forward_matches_oracle():
    rng = np.random.default_rng(17)
    x = rnd(rng, 1, 6, 8, scale=0.5)
    ws = [rnd(rng, 8, 8, scale=0.4) for _ in range(4)]
    out = ly.attention(tn.Tensor(x), *[tn.Tensor(w) for w in ws], n_heads=2).data[0]
    want = naive_attention(x[0], *ws, n_heads=2)
    assert rel_err(out, want) < 1e-5


def test_attention_is_causal():
    rng = np.random.default_rng(18)
    x = rnd(rng, 1, 10, 8, scale=0.5)
    ws = [tn.Tensor(rnd(rng, 8, 8, scale=0.4)) for _ in range(4)]
    base = ly.attention(tn.Tensor(x), *ws, n_heads=2).data.copy()
    x_mut = x.copy()
    x_mut[0, 7:, :] += 3.0
    out = ly.attention(tn.Tensor(x_mut), *ws, n_heads=2).data
    np.testing.assert_allclose(out[0, :7], base[0, :7], atol=1e-7)


def test_attention_gradients():
    rng = np.random.default_rng(19)
    x = tn.Tensor(rnd(rng, 1, 5, 8, scale=0.5), requires_grad=True, name="x")
    names = ["wq", "wk", "wv", "wo"]
    ws = [tn.Tensor(rnd(rng, 8, 8, scale=0.4), requires_grad=True, name=n) for n in names]
    r = tn.Tensor(rnd(rng, 1, 5, 8))
    check_grads(
        lambda: tn.tsum(tn.mul(ly.attention(x, *ws, n_heads=2), r)), [x] + ws
    )


def test_attention_rejects_bad_head_split():
    x = tn.Tensor(np.ones((1, 4, 6)))
    w = [tn.Tensor(np.eye(6)) for _ in range(4)]
    with pytest.raises(ShapeError):
        ly.attention(x, *w, n_heads=4)


# -- gated mlp --------------------------------------------------------------

def make_mlp(rng, d=6, hidden=10):
    mlp = ly.GatedMlp.build(rng, d, hidden, "mlp")
    return mlp


def test_gated_mlp_forward_matches_oracle():
    rng = np.random.default_rng(20)
    mlp = make_mlp(rng)
    x = rnd(rng, 1, 5, 6)
    out = mlp(tn.Tensor(x)).data[0]
    want = naive_gated_mlp(x[0], mlp.up.weight.data, mlp.gate.weight.data,
                           mlp.down.weight.data)
    assert rel_err(out, want) < 1e-5


def test_gated_mlp_gradients():
    rng = np.random.default_rng(21)
    mlp = make_mlp(rng, d=5, hidden=7)
    x = tn.Tensor(rnd(rng, 1, 4, 5), requires_grad=True, name="x")
    r = tn.Tensor(rnd(rng, 1, 4, 5))
    params = [x, mlp.up.weight, mlp.gate.weight, mlp.down.weight]
    check_grads(lambda: tn.tsum(tn.mul(mlp(x), r)), params)


def test_slice_equals_mask():
    # dropping trailing channels == zeroing their down-projection columns
    rng = np.random.default_rng(22)
    mlp = make_mlp(rng, d=6, hidden=12)
    x = tn.Tensor(rnd(rng, 1, 5, 6))
    g = 4
    masked = ly.GatedMlp(
        ly.Linear(tn.Tensor(mlp.up.weight.data.copy())),
        ly.Linear(tn.Tensor(mlp.gate.weight.data.copy())),
        ly.Linear(tn.Tensor(mlp.down.weight.data.copy())),
    )
    masked.down.weight.data[:, -g:] = 0.0
    want = masked(x).data

    with mlp.trailing_sliced(g):
        got = mlp(x).data
    assert rel_err(got, want) < 1e-6
    assert mlp.hidden == 12  # restored

    mlp.slice_trailing(g)
    assert mlp.hidden == 8
    assert rel_err(mlp(x).data, want) < 1e-6


def test_temporary_slice_restores_bit_identical():
    rng = np.random.default_rng(23)
    mlp = make_mlp(rng)
    before = {n: t.data.tobytes() for n, t in mlp.tensors().items()}
    with mlp.trailing_sliced(3):
        mlp(tn.Tensor(rnd(rng, 1, 4, 6)))
    after = {n: t.data.tobytes() for n, t in mlp.tensors().items()}
    assert before == after


def test_two_small_slices_equal_one_big():
    rng = np.random.default_rng(24)
    a = make_mlp(rng, d=4, hidden=9)
    b = ly.GatedMlp(
        ly.Linear(tn.Tensor(a.up.weight.data.copy())),
        ly.Linear(tn.Tensor(a.gate.weight.data.copy())),
        ly.Linear(tn.Tensor(a.down.weight.data.copy())),
    )
    a.slice_trailing(2)
    a.slice_trailing(2)
    b.slice_trailing(4)
    for (na, ta), (nb, tb) in zip(sorted(a.tensors().items()),
                                  sorted(b.tensors().items())):
        assert ta.data.tobytes() == tb.data.tobytes()


def test_slice_beyond_capacity_raises():
    rng = np.random.default_rng(25)
    mlp = make_mlp(rng, d=4, hidden=8)
    with pytest.raises(CapacityError):
        mlp.slice_trailing(8)  # would leave zero channels
    with pytest.raises(CapacityError):
        mlp.slice_trailing(0)
    mlp.slice_trailing(7)
    assert mlp.hidden == 1


# -- embedding --------------------------------------------------------------

def test_embedding_lookup_and_grad_scatter():
    rng = np.random.default_rng(26)
    emb = ly.Embedding.build(rng, 7, 4, "emb")
    toks = np.array([[0, 3, 3, 6, 1, 3]])
    out = emb(toks)
    np.testing.assert_array_equal(out.data[0, 1], emb.table.data[3])

    r = tn.Tensor(rnd(rng, 1, 6, 4))
    with tn.tape() as g:
        loss = tn.tsum(tn.mul(emb(toks), r))
    g.backward(loss)
    fd = finite_diff(lambda: tn.tsum(tn.mul(emb(toks), r)).scalar(), [emb.table.data])[0]
    assert rel_err(emb.table.grad, fd) < 1e-3
    # rows 2, 4, 5 unused -> zero grad
    assert np.abs(emb.table.grad[[2, 4, 5]]).max() == 0.0


def test_embedding_rejects_out_of_range_token():
    rng = np.random.default_rng(27)
    emb = ly.Embedding.build(rng, 7, 4, "emb")
    with pytest.raises(TokenError) as e:
        emb(np.array([[1, 2, 9]]))
    assert "9" in str(e.value) and "(0, 2)" in str(e.value)


# -- cross entropy ----------------------------------------------------------

def test_cross_entropy_matches_oracle():
    rng = np.random.default_rng(28)
    logits = rnd(rng, 6, 9)
    targets = rng.integers(0, 9, size=6)
    got = ly.cross_entropy(tn.Tensor(logits), targets)
    assert abs(got.scalar() - naive_cross_entropy(logits, targets)) < 1e-9


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = tn.Tensor(np.zeros((4, 96)))
    out = ly.cross_entropy(logits, np.zeros(4, dtype=int))
    assert out.scalar() == pytest.approx(np.log(96.0), rel=1e-12)


def test_cross_entropy_gradients():
    rng = np.random.default_rng(29)
    logits = tn.Tensor(rnd(rng, 5, 7), requires_grad=True, name="logits")
    targets = rng.integers(0, 7, size=5)
    check_grads(lambda: ly.cross_entropy(logits, targets), [logits])


def test_cross_entropy_validates_targets():
    logits = tn.Tensor(np.zeros((3, 5)))
    with pytest.raises(TokenError) as e:
        ly.cross_entropy(logits, np.array([0, 7, 1]))
    assert "(1,)" in str(e.value)
    with pytest.raises(ShapeError):
        ly.cross_entropy(logits, np.zeros(4, dtype=int))


def test_per_token_nll_matches_oracle():
    rng = np.random.default_rng(30)
    logits = rnd(rng, 8, 11)
    targets = rng.integers(0, 11, size=8)
    got = ly.per_token_nll(logits, targets)
    want = [naive_cross_entropy(logits[t:t + 1], targets[t:t + 1]) for t in range(8)]
    assert rel_err(got, want) < 1e-9
