"""Layers used by the blocks: linear, rmsnorm, depthwise causal conv, causal
multi-head attention, gated mlp, embedding, cross-entropy.

Each fused op computes forward in numpy (float64 where sums accumulate) and
registers a single backward closure on the tape, instead of decomposing into
primitive ops. The gated mlp is the exception: it composes linear/silu/mul and
needs no backward of its own.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Dict, Optional

import numpy as np

from . import tensor as tn
from .errors import CapacityError, ShapeError, TokenError
from .tensor import Tensor, f32, record


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (..., k) @ weight (n, k).T -> (..., n); float64 accumulation."""
    k = weight.data.shape[1]
    if x.data.shape[-1] != k:
        raise ShapeError(f"linear: input {x.data.shape} does not match weight {weight.data.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, k).astype(np.float64)
    w64 = weight.data.astype(np.float64)
    y = x2 @ w64.T
    if bias is not None:
        y += bias.data.astype(np.float64)
    out = Tensor(y.reshape(lead + (weight.data.shape[0],)))

    def bwd(g: np.ndarray):
        g2 = g.reshape(-1, weight.data.shape[0]).astype(np.float64)
        gx = f32((g2 @ w64).reshape(x.data.shape)) if x.requires_grad else None
        gw = f32(g2.T @ x2) if weight.requires_grad else None
        if bias is not None:
            gb = f32(g2.sum(axis=0)) if bias.requires_grad else None
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bwd)


def rmsnorm(x: Tensor, scale: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square norm over the last dim, then elementwise scale."""
    d = x.data.shape[-1]
    if scale.data.shape != (d,):
        raise ShapeError(f"rmsnorm: scale {scale.data.shape} does not match feature dim {d}")
    x64 = x.data.astype(np.float64)
    inv = 1.0 / np.sqrt((x64 * x64).mean(axis=-1, keepdims=True) + eps)
    out = Tensor(x64 * inv * scale.data.astype(np.float64))

    def bwd(g: np.ndarray):
        g64 = g.astype(np.float64)
        gs64 = g64 * scale.data.astype(np.float64)
        gx = None
        if x.requires_grad:
            dot = (gs64 * x64).sum(axis=-1, keepdims=True)
            gx = f32(inv * gs64 - (inv ** 3) * x64 * dot / d)
        gsc = None
        if scale.requires_grad:
            gsc = f32((g64 * x64 * inv).reshape(-1, d).sum(axis=0))
        return gx, gsc

    return record(out, (x, scale), bwd)


def causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise causal conv. x (B, T, c), kernel (c, w); left zero padding,
    so position t sees x[t-w+1 .. t] only."""
    if x.data.ndim != 3:
        raise ShapeError(f"causal_conv1d: expected (B, T, c), got {x.data.shape}")
    B, T, c = x.data.shape
    cw, w = kernel.data.shape
    if cw != c:
        raise ShapeError(f"causal_conv1d: kernel {kernel.data.shape} does not match channels {c}")
    xp = np.zeros((B, T + w - 1, c), dtype=np.float32)
    xp[:, w - 1:, :] = x.data
    y = np.zeros((B, T, c), dtype=np.float32)
    for j in range(w):
        y += kernel.data[:, j] * xp[:, j:j + T, :]
    out = Tensor(y)

    def bwd(g: np.ndarray):
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(w):
                gxp[:, j:j + T, :] += kernel.data[:, j] * g
            gx = np.ascontiguousarray(gxp[:, w - 1:, :])
        gk = None
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data, dtype=np.float64)
            for j in range(w):
                gk[:, j] = (g.astype(np.float64) * xp[:, j:j + T, :]).sum(axis=(0, 1))
            gk = f32(gk)
        return gx, gk

    return record(out, (x, kernel), bwd)


def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_heads: int) -> Tensor:
    """Causal multi-head self-attention. x (B, T, d); all weights (d, d)."""
    if x.data.ndim != 3:
        raise ShapeError(f"attention: expected (B, T, d), got {x.data.shape}")
    B, T, d = x.data.shape
    if d % n_heads:
        raise ShapeError(f"attention: d={d} not divisible by n_heads={n_heads}")
    hd = d // n_heads
    x2 = x.data.reshape(-1, d).astype(np.float64)

    def heads(w):
        return (x2 @ w.data.astype(np.float64).T).reshape(B, T, n_heads, hd).transpose(0, 2, 1, 3)

    q, k, v = heads(wq), heads(wk), heads(wv)           # (B, H, T, hd)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)  # (B, H, T, T)
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores[:, :, mask] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(-1, d)  # (B*T, d)
    wo64 = wo.data.astype(np.float64)
    out = Tensor((ctx @ wo64.T).reshape(B, T, d))

    def bwd(g: np.ndarray):
        g2 = g.reshape(-1, d).astype(np.float64)
        gctx = (g2 @ wo64).reshape(B, T, n_heads, hd).transpose(0, 2, 1, 3)
        gp = gctx @ v.transpose(0, 1, 3, 2)
        gv = p.transpose(0, 1, 3, 2) @ gctx
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) / np.sqrt(hd)
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q

        def unheads(h):
            return h.transpose(0, 2, 1, 3).reshape(-1, d)

        gq2, gk2, gv2 = unheads(gq), unheads(gk), unheads(gv)
        gx = None
        if x.requires_grad:
            gx64 = (
                gq2 @ wq.data.astype(np.float64)
                + gk2 @ wk.data.astype(np.float64)
                + gv2 @ wv.data.astype(np.float64)
            )
            gx = f32(gx64.reshape(B, T, d))
        gwq = f32(gq2.T @ x2) if wq.requires_grad else None
        gwk = f32(gk2.T @ x2) if wk.requires_grad else None
        gwv = f32(gv2.T @ x2) if wv.requires_grad else None
        gwo = f32(g2.T @ ctx) if wo.requires_grad else None
        return gx, gwq, gwk, gwv, gwo

    return record(out, (x, wq, wk, wv, wo), bwd)


def embedding(tokens: np.ndarray, table: Tensor) -> Tensor:
    """tokens (B, T) int -> (B, T, d). Validates ids against the table size."""
    vocab = table.data.shape[0]
    tokens = np.asarray(tokens)
    bad = (tokens < 0) | (tokens >= vocab)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise TokenError(
            f"embedding: token id {int(tokens[pos])} at position {pos} outside vocab of {vocab}"
        )
    out = Tensor(table.data[tokens])

    def bwd(g: np.ndarray):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, tokens.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return record(out, (table,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token NLL. logits (B, T, V) or (T, V); targets same leading
    shape, int. Log-softmax and the mean run in float64; the scalar keeps a
    float64 readout in .hi."""
    V = logits.data.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.data.shape}"
        )
    bad = (targets < 0) | (targets >= V)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise TokenError(
            f"cross_entropy: target id {int(targets[pos])} at position {pos} outside vocab of {V}"
        )
    flat = logits.data.reshape(-1, V).astype(np.float64)
    tflat = targets.reshape(-1)
    n = flat.shape[0]
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), tflat]
    total = nll.mean()
    out = Tensor(np.float32(total))
    out.hi = float(total)

    def bwd(g: np.ndarray):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tflat] -= 1.0
        p *= float(g.reshape(())) / n
        return (f32(p.reshape(logits.data.shape)),)

    return record(out, (logits,), bwd)


def per_token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Inference-path NLLs, no tape. logits (..., V) -> (...,), float64."""
    V = logits.shape[-1]
    flat = logits.reshape(-1, V).astype(np.float64)
    tflat = np.asarray(targets).reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(flat.shape[0]), tflat]
    return nll.reshape(np.asarray(targets).shape)


# ---------------------------------------------------------------------------
# layer classes: thin wrappers owning named parameter tensors


class Linear:
    """weight (out, in), optional bias (out)."""

    def __init__(self, weight: Tensor, bias: Optional[Tensor] = None):
        self.weight = weight
        self.bias = bias

    @staticmethod
    def build(rng: np.random.Generator, d_in: int, d_out: int, prefix: str,
              bias: bool = False) -> "Linear":
        w = Tensor(rng.normal(0.0, d_in ** -0.5, (d_out, d_in)),
                   requires_grad=True, name=f"{prefix}.weight")
        b = None
        if bias:
            b = Tensor(np.zeros(d_out), requires_grad=True, name=f"{prefix}.bias")
        return Linear(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def tensors(self) -> Dict[str, Tensor]:
        out = {self.weight.name: self.weight}
        if self.bias is not None:
            out[self.bias.name] = self.bias
        return out


class RmsNorm:
    def __init__(self, scale: Tensor, eps: float = 1e-5):
        self.scale = scale
        self.eps = eps

    @staticmethod
    def build(d: int, prefix: str) -> "RmsNorm":
        return RmsNorm(Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.scale"))

    def __call__(self, x: Tensor) -> Tensor:
        return rmsnorm(x, self.scale, self.eps)

    def tensors(self) -> Dict[str, Tensor]:
        return {self.scale.name: self.scale}


class CausalConv1d:
    """Depthwise, fixed width; kernel (c, w)."""

    def __init__(self, kernel: Tensor):
        self.kernel = kernel

    @staticmethod
    def build(rng: np.random.Generator, channels: int, width: int, prefix: str) -> "CausalConv1d":
        s = width ** -0.5
        k = Tensor(rng.uniform(-s, s, (channels, width)),
                   requires_grad=True, name=f"{prefix}.kernel")
        return CausalConv1d(k)

    @property
    def width(self) -> int:
        return self.kernel.data.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return causal_conv1d(x, self.kernel)

    def tensors(self) -> Dict[str, Tensor]:
        return {self.kernel.name: self.kernel}


class MultiHeadAttention:
    def __init__(self, q: Linear, k: Linear, v: Linear, o: Linear, n_heads: int):
        self.q, self.k, self.v, self.o = q, k, v, o
        self.n_heads = n_heads

    @staticmethod
    def build(rng: np.random.Generator, d: int, n_heads: int, prefix: str) -> "MultiHeadAttention":
        mk = lambda nm: Linear.build(rng, d, d, f"{prefix}.{nm}")
        return MultiHeadAttention(mk("q"), mk("k"), mk("v"), mk("o"), n_heads)

    def __call__(self, x: Tensor) -> Tensor:
        return attention(x, self.q.weight, self.k.weight, self.v.weight,
                         self.o.weight, self.n_heads)

    def tensors(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for lin in (self.q, self.k, self.v, self.o):
            out.update(lin.tensors())
        return out


class GatedMlp:
    """down(silu(gate(x)) * up(x)) with a sliceable hidden dim.

    up/gate are (D, d), down is (d, D). Trailing-channel slicing drops the
    last g rows of up/gate and the last g columns of down, permanently.
    """

    def __init__(self, up: Linear, gate: Linear, down: Linear):
        self.up, self.gate, self.down = up, gate, down

    @staticmethod
    def build(rng: np.random.Generator, d: int, hidden: int, prefix: str) -> "GatedMlp":
        return GatedMlp(
            Linear.build(rng, d, hidden, f"{prefix}.up"),
            Linear.build(rng, d, hidden, f"{prefix}.gate"),
            Linear.build(rng, hidden, d, f"{prefix}.down"),
        )

    @property
    def hidden(self) -> int:
        return self.up.weight.data.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(tn.mul(tn.silu(self.gate(x)), self.up(x)), self.down.weight)

    def slice_trailing(self, g: int) -> None:
        """Permanently drop the last g hidden channels."""
        D = self.hidden
        if g < 1 or g >= D:
            raise CapacityError(f"slice_trailing: cannot drop {g} of {D} channels")
        self.up.weight.data = np.ascontiguousarray(self.up.weight.data[:-g, :])
        self.gate.weight.data = np.ascontiguousarray(self.gate.weight.data[:-g, :])
        self.down.weight.data = np.ascontiguousarray(self.down.weight.data[:, :-g])
        for t in (self.up.weight, self.gate.weight, self.down.weight):
            t.grad = None

    @contextmanager
    def trailing_sliced(self, g: int):
        """Temporarily present the sliced weights; restores the originals
        bit-identically on exit."""
        D = self.hidden
        if g < 1 or g >= D:
            raise CapacityError(f"trailing_sliced: cannot drop {g} of {D} channels")
        keep = (self.up.weight.data, self.gate.weight.data, self.down.weight.data)
        try:
            self.up.weight.data = np.ascontiguousarray(keep[0][:-g, :])
            self.gate.weight.data = np.ascontiguousarray(keep[1][:-g, :])
            self.down.weight.data = np.ascontiguousarray(keep[2][:, :-g])
            yield self
        finally:
            self.up.weight.data, self.gate.weight.data, self.down.weight.data = keep

    def tensors(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for lin in (self.up, self.gate, self.down):
            out.update(lin.tensors())
        return out


class Embedding:
    def __init__(self, table: Tensor):
        self.table = table

    @staticmethod
    def build(rng: np.random.Generator, vocab: int, d: int, prefix: str) -> "Embedding":
        t = Tensor(rng.normal(0.0, 0.02, (vocab, d)), requires_grad=True,
                   name=f"{prefix}.table")
        return Embedding(t)

    def __call__(self, tokens: np.ndarray) -> Tensor:
        return embedding(tokens, self.table)

    def tensors(self) -> Dict[str, Tensor]:
        return {self.table.name: self.table}
