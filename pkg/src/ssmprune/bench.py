"""Prefill and decode throughput measurement, dense vs pruned.

Each batch times the full-sequence forward (prefill) and the token-by-token
cached path (decode, prefill excluded) for both models. Medians over the
timed batches give the headline numbers; every raw timing is kept so any
emitted speedup can be recomputed from the same report.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .model import DecodeSession, Model


@dataclass
class BenchConfig:
    """Defaults follow the desk-scale methodology: prompt 512, 16 new
    tokens, batch size 1, medians over 10 timed batches."""

    prompt: int = 512
    new_tokens: int = 16
    batches: int = 10
    warmup: int = 2
    unstable_spread: float = 0.25

    def validate(self) -> None:
        for name in ("prompt", "new_tokens", "batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"bench {name} must be positive")
        if self.warmup < 0:
            raise ConfigError("bench warmup must be nonnegative")
        if self.unstable_spread <= 0:
            raise ConfigError("bench unstable_spread must be positive")


@dataclass
class BenchReport:
    """Raw per-batch seconds plus the medians and ratios derived from them."""

    prompt: int
    new_tokens: int
    batches: int
    raw: Dict[str, List[float]]          # "dense.prefill" etc -> seconds
    medians: Dict[str, float]            # same keys -> median seconds
    throughput: Dict[str, float]         # same keys -> tokens per second
    prefill_speedup: float
    decode_speedup: float
    unstable: bool
    spreads: Dict[str, float]
    plan_summary: Optional[dict] = None
    ppl_before: Optional[float] = None
    ppl_after: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt, "new_tokens": self.new_tokens,
            "batches": self.batches, "raw": self.raw, "medians": self.medians,
            "throughput": self.throughput,
            "prefill_speedup": self.prefill_speedup,
            "decode_speedup": self.decode_speedup,
            "unstable": self.unstable, "spreads": self.spreads,
            "plan_summary": self.plan_summary,
            "ppl_before": self.ppl_before, "ppl_after": self.ppl_after,
        }


_SERIES = ("dense.prefill", "dense.decode", "pruned.prefill", "pruned.decode")


def _time_prefill(model: Model, tokens: np.ndarray) -> float:
    t0 = time.perf_counter()
    model.forward(tokens)
    return time.perf_counter() - t0


def _time_decode(model: Model, tokens: np.ndarray, new_tokens: int) -> float:
    """Seconds for new_tokens cached steps; the prefill is not counted."""
    session = DecodeSession(model, capacity_hint=tokens.shape[1] + new_tokens + 1)
    logits = session.prefill(tokens)
    nxt = logits.argmax(axis=-1)
    t0 = time.perf_counter()
    for _ in range(new_tokens):
        logits = session.step(nxt)
        nxt = logits.argmax(axis=-1)
    return time.perf_counter() - t0


def _spread(series: List[float]) -> float:
    med = statistics.median(series)
    return (max(series) - min(series)) / med if med > 0 else math.inf


def bench(dense: Model, pruned: Model, cfg: BenchConfig, seed: int = 0,
          plan_summary: Optional[dict] = None,
          ppl_before: Optional[float] = None,
          ppl_after: Optional[float] = None) -> BenchReport:
    """Time both models on the same random prompt, batch size 1.

    The pruned model should be physically compacted; a bypass overlay would
    time dead-structure dispatch instead of real savings. Warmup batches run
    first and are discarded. If any timing series has (max - min) / median
    above cfg.unstable_spread the report is flagged unstable but still
    returned in full.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    vocab = dense.desc.vocab
    tokens = rng.integers(0, vocab, size=(1, cfg.prompt))
    raw: Dict[str, List[float]] = {k: [] for k in _SERIES}
    for i in range(cfg.warmup + cfg.batches):
        keep = i >= cfg.warmup
        for name, model in (("dense", dense), ("pruned", pruned)):
            tp = _time_prefill(model, tokens)
            td = _time_decode(model, tokens, cfg.new_tokens)
            if keep:
                raw[f"{name}.prefill"].append(tp)
                raw[f"{name}.decode"].append(td)
    medians = {k: statistics.median(v) for k, v in raw.items()}
    spreads = {k: _spread(v) for k, v in raw.items()}
    work = {"prefill": cfg.prompt, "decode": cfg.new_tokens}
    throughput = {k: work[k.split(".")[1]] / medians[k] for k in _SERIES}
    return BenchReport(
        prompt=cfg.prompt, new_tokens=cfg.new_tokens, batches=cfg.batches,
        raw=raw, medians=medians, throughput=throughput,
        prefill_speedup=medians["dense.prefill"] / medians["pruned.prefill"],
        decode_speedup=medians["dense.decode"] / medians["pruned.decode"],
        unstable=any(s > cfg.unstable_spread for s in spreads.values()),
        spreads=spreads, plan_summary=plan_summary,
        ppl_before=ppl_before, ppl_after=ppl_after,
    )


def write_bench_csv(path: str, report: BenchReport) -> None:
    """Raw rows first (one per timed batch), then the median rows."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "phase", "batch", "seconds", "tokens_per_s"])
        for key in _SERIES:
            model, phase = key.split(".")
            work = report.prompt if phase == "prefill" else report.new_tokens
            for b, sec in enumerate(report.raw[key]):
                w.writerow([model, phase, b, f"{sec:.9f}", f"{work / sec:.3f}"])
        for key in _SERIES:
            model, phase = key.split(".")
            w.writerow([model, phase, "median", f"{report.medians[key]:.9f}",
                        f"{report.throughput[key]:.3f}"])


def read_bench_csv(path: str) -> Tuple[Dict[str, List[float]], Dict[str, float]]:
    """-> (raw seconds per series, median seconds per series)."""
    raw: Dict[str, List[float]] = {k: [] for k in _SERIES}
    medians: Dict[str, float] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = f"{row['model']}.{row['phase']}"
            if row["batch"] == "median":
                medians[key] = float(row["seconds"])
            else:
                raw[key].append(float(row["seconds"]))
    return raw, medians
