"""Selective scan: input-dependent gating of a diagonal linear recurrence.

Two parameterizations share one scan:
  "s6"  -- diagonal decay, A_log (c, N): every channel/state pair has its own rate.
  "ssd" -- scalar decay, A_log (c,): one rate per channel, broadcast over the
           N state columns. Equivalent to "s6" with rows tied.

State update per token: h = exp(dt*A) * h + (dt*x) outer B, readout
y = h . C + D * x, with dt = softplus(x W_dt + dt_bias), B = x W_B, C = x W_C.
The carried state is float64; stored per-token states round to float32 and the
readout contraction accumulates in float64.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .layers import Linear
from .tensor import Tensor, f32, record, sigmoid_f, softplus_f

VARIANTS = ("s6", "ssd")


class SsmParams:
    """Scan parameters for one block; channels c is the block's inner width."""

    def __init__(self, variant: str, A_log: Tensor, x_to_B: Linear, x_to_C: Linear,
                 x_to_dt: Linear, dt_bias: Tensor, D_skip: Tensor):
        if variant not in VARIANTS:
            raise ValueError(f"unknown ssm variant {variant!r}")
        c = dt_bias.data.shape[0]
        want = (c,) if variant == "ssd" else (c, x_to_B.weight.data.shape[0])
        if A_log.data.shape != want:
            raise ShapeError(f"A_log shape {A_log.data.shape}, expected {want} for {variant}")
        self.variant = variant
        self.A_log = A_log
        self.x_to_B = x_to_B
        self.x_to_C = x_to_C
        self.x_to_dt = x_to_dt
        self.dt_bias = dt_bias
        self.D_skip = D_skip

    @staticmethod
    def build(rng: np.random.Generator, variant: str, channels: int, n_state: int,
              prefix: str) -> "SsmParams":
        if variant == "s6":
            # decay rates 1..N per channel, the usual structured init
            a = np.tile(np.arange(1, n_state + 1, dtype=np.float64), (channels, 1))
        elif variant == "ssd":
            a = rng.uniform(1.0, 16.0, channels)
        else:
            raise ValueError(f"unknown ssm variant {variant!r}")
        A_log = Tensor(np.log(a), requires_grad=True, name=f"{prefix}.A_log")
        # softplus(dt_bias) lands uniformly in [1e-3, 1e-1]
        u = rng.uniform(1e-3, 1e-1, channels)
        dt_bias = Tensor(np.log(np.expm1(u)), requires_grad=True, name=f"{prefix}.dt_bias")
        return SsmParams(
            variant,
            A_log,
            Linear.build(rng, channels, n_state, f"{prefix}.x_to_B"),
            Linear.build(rng, channels, n_state, f"{prefix}.x_to_C"),
            Linear.build(rng, channels, channels, f"{prefix}.x_to_dt"),
            dt_bias,
            Tensor(np.ones(channels), requires_grad=True, name=f"{prefix}.D_skip"),
        )

    @property
    def channels(self) -> int:
        return self.dt_bias.data.shape[0]

    @property
    def n_state(self) -> int:
        return self.x_to_B.weight.data.shape[0]

    def neg_A(self) -> np.ndarray:
        """A = -exp(A_log); (c, N) for s6, (c,) for ssd. Always negative."""
        return -np.exp(self.A_log.data)

    def tensors(self) -> Dict[str, Tensor]:
        out = {self.A_log.name: self.A_log, self.dt_bias.name: self.dt_bias,
               self.D_skip.name: self.D_skip}
        for lin in (self.x_to_B, self.x_to_C, self.x_to_dt):
            out.update(lin.tensors())
        return out


def _project(p: SsmParams, x: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Input-dependent pieces from x (..., c): dtp, dt, B, C as float32."""
    lead = x.shape[:-1]
    x2 = x.reshape(-1, p.channels).astype(np.float64)
    dtp = f32((x2 @ p.x_to_dt.weight.data.astype(np.float64).T
               + p.dt_bias.data.astype(np.float64)).reshape(lead + (p.channels,)))
    dt = softplus_f(dtp)
    Bm = f32((x2 @ p.x_to_B.weight.data.astype(np.float64).T).reshape(lead + (p.n_state,)))
    Cm = f32((x2 @ p.x_to_C.weight.data.astype(np.float64).T).reshape(lead + (p.n_state,)))
    return dtp, dt, Bm, Cm


def _decay(p: SsmParams, dt: np.ndarray) -> np.ndarray:
    """exp(dt * A): (..., c, N) for s6, (..., c, 1) for ssd (broadcasts later)."""
    A = p.neg_A()
    if p.variant == "s6":
        return np.exp(dt[..., None] * A)
    return np.exp(dt * A)[..., None]


def selective_scan(x: Tensor, p: SsmParams) -> Tensor:
    """Run the scan over a batch of sequences. x (B, T, c) -> (B, T, c).

    The returned tensor carries the final float64 state in .aux["state"]
    (B, c, N) so a decode session can pick up where prefill stopped.
    """
    if x.data.ndim != 3 or x.data.shape[-1] != p.channels:
        raise ShapeError(f"selective_scan: input {x.data.shape}, expected (B, T, {p.channels})")
    B_, T, c = x.data.shape
    N = p.n_state
    dtp, dt, Bm, Cm = _project(p, x.data)
    abar = _decay(p, dt)                                   # (B,T,c,N) or (B,T,c,1)
    dtx = dt * x.data                                      # (B,T,c)
    dbx = dtx[..., None] * Bm[:, :, None, :]               # (B,T,c,N) f32
    h = np.zeros((B_, c, N), dtype=np.float64)
    hs = np.empty((B_, T, c, N), dtype=np.float32)
    for t in range(T):
        h = abar[:, t] * h + dbx[:, t]
        hs[:, t] = h
    del dbx
    y = np.einsum("btcn,btn->btc", hs, Cm, dtype=np.float64)
    y += p.D_skip.data.astype(np.float64) * x.data
    out = Tensor(y)
    out.aux = {"state": h}

    def bwd(g: np.ndarray):
        g64 = g.astype(np.float64)
        A = p.neg_A().astype(np.float64)
        dD = (g64 * x.data).sum(axis=(0, 1))
        dCm = np.einsum("btc,btcn->btn", g64, hs)
        dx = g64 * p.D_skip.data.astype(np.float64)
        d_dt = np.zeros((B_, T, c), dtype=np.float64)
        dBm = np.zeros((B_, T, N), dtype=np.float64)
        if p.variant == "s6":
            dA = np.zeros((c, N), dtype=np.float64)
        else:
            dA = np.zeros(c, dtype=np.float64)
        lam = np.zeros((B_, c, N), dtype=np.float64)
        for t in range(T - 1, -1, -1):
            if t < T - 1:
                lam *= abar[:, t + 1]
            lam += g64[:, t, :, None] * Cm[:, t, None, :]
            h_prev = hs[:, t - 1].astype(np.float64) if t > 0 else 0.0
            d_abar = lam * h_prev                          # (B,c,N)
            if p.variant == "s6":
                d_arg = d_abar * abar[:, t]
                d_dt[:, t] = (d_arg * A).sum(axis=-1)
                dA += (d_arg * dt[:, t, :, None]).sum(axis=0)
            else:
                d_red = d_abar.sum(axis=-1) * abar[:, t, :, 0]
                d_dt[:, t] = d_red * A
                dA += (d_red * dt[:, t]).sum(axis=0)
            lam_b = (lam * Bm[:, t, None, :]).sum(axis=-1)  # (B,c)
            d_dt[:, t] += lam_b * x.data[:, t]
            dBm[:, t] = (lam * dtx[:, t, :, None]).sum(axis=1)
            dx[:, t] += lam_b * dt[:, t]
        d_dtp = d_dt * sigmoid_f(dtp).astype(np.float64)
        x2 = x.data.reshape(-1, c).astype(np.float64)
        dW = {}
        for name, gout, lin in (("dt", d_dtp.reshape(-1, c), p.x_to_dt),
                                ("B", dBm.reshape(-1, N), p.x_to_B),
                                ("C", dCm.reshape(-1, N), p.x_to_C)):
            dW[name] = gout.T @ x2 if lin.weight.requires_grad else None
            dx += (gout @ lin.weight.data.astype(np.float64)).reshape(B_, T, c)
        gA_log = None
        if p.A_log.requires_grad:
            gA_log = f32(dA * A)  # d/dA_log of A = -exp(A_log) is A itself
        return (
            f32(dx) if x.requires_grad else None,
            gA_log,
            f32(dW["B"]) if dW["B"] is not None else None,
            f32(dW["C"]) if dW["C"] is not None else None,
            f32(dW["dt"]) if dW["dt"] is not None else None,
            f32(d_dtp.sum(axis=(0, 1))) if p.dt_bias.requires_grad else None,
            f32(dD) if p.D_skip.requires_grad else None,
        )

    return record(out, (x, p.A_log, p.x_to_B.weight, p.x_to_C.weight,
                        p.x_to_dt.weight, p.dt_bias, p.D_skip), bwd)


def init_state(p: SsmParams, batch: int) -> np.ndarray:
    return np.zeros((batch, p.channels, p.n_state), dtype=np.float64)


def scan_step(p: SsmParams, h: np.ndarray, x_t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """One decode step. h (B, c, N) float64 carried state, x_t (B, c) float32.

    Returns (y_t float32 (B, c), new state). Matches the batch scan's rounding:
    stored state reads back through float32, readout accumulates in float64.
    """
    if x_t.ndim != 2 or x_t.shape[1] != p.channels:
        raise ShapeError(f"scan_step: input {x_t.shape}, expected (B, {p.channels})")
    _, dt, Bm, Cm = _project(p, x_t)
    abar = _decay(p, dt)                                   # (B,c,N) or (B,c,1)
    h = abar * h + ((dt * x_t)[:, :, None] * Bm[:, None, :])
    y = np.einsum("bcn,bn->bc", h.astype(np.float32), Cm, dtype=np.float64)
    y += p.D_skip.data.astype(np.float64) * x_t
    return f32(y), h
