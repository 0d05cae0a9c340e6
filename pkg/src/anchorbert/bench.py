"""Microbenchmarks for the complexity claims behind both attention paths.

Times forward passes across sequence lengths and fits log-log slopes: the
exact path should scale ~quadratically in n, the anchored path ~linearly.
Also provides analytic operation counts (in the aggregate complexity units
2n^2 d + n d^2 vs 4mnd + m d^2, projections excluded) for cross-checking.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention as att
from . import feedforward as ffn
from . import tensor as T
from .errors import ConfigError, InputError
from .rng import derive_rng
from .tensor import Tensor

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

MECHANISMS = ("standard_mha", "fast_mha", "ffn_standard", "ffn_factorized")


@dataclass
class BenchResult:
    mechanism: str
    n: int
    d: int
    h: int
    m: int
    d_r: int
    reps: int
    median_ns: float
    slope: float  # shared across the sweep this result came from


def count_flops(mechanism: str, sizes: dict) -> float:
    """Operation count per the closed-form complexity expressions.

    Attention counts cover the mechanism itself (similarity + mixing +
    output projection), not the shared Q/K/V projections, so the two paths
    are compared on the part that differs.
    """
    n = sizes.get("n", 0)
    d = sizes.get("d", 0)
    if n <= 0 or d <= 0:
        raise InputError(f"sizes must be positive, got {sizes}")
    if mechanism == "standard_mha":
        return 2 * n * n * d + n * d * d
    if mechanism == "fast_mha":
        m = sizes.get("m", 0)
        if m <= 0:
            raise InputError(f"fast_mha needs m > 0, got {sizes}")
        return 4 * m * n * d + m * d * d
    if mechanism == "ffn_standard":
        d_f = sizes.get("d_f", 4 * d)
        return 2 * n * d * d_f
    if mechanism == "ffn_factorized":
        d_f = sizes.get("d_f", 4 * d)
        d_r = sizes.get("d_r", 0)
        if d_r <= 0:
            raise InputError(f"ffn_factorized needs d_r > 0, got {sizes}")
        return 2 * n * d_r * (d + d_f)
    raise ConfigError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


def _make_attn_params(d: int, h: int, rng) -> att.AttentionParams:
    dk = d // h
    def w(shape):
        return Tensor(rng.normal(0, 0.02, shape).astype(np.float32))
    return att.AttentionParams(
        wq=[w((d, dk)) for _ in range(h)],
        wk=[w((d, dk)) for _ in range(h)],
        wv=[w((d, dk)) for _ in range(h)],
        wo=w((d, d)),
    )


def _forward_fn(mechanism: str, n: int, d: int, h: int, m: int, d_r: int, seed: int):
    rng = derive_rng(seed, n)
    if mechanism in ("standard_mha", "fast_mha"):
        params = _make_attn_params(d, h, rng)
        if mechanism == "standard_mha":
            def run(rep: int):
                x = Tensor(derive_rng(seed, n, rep).normal(0, 1, (n, d)).astype(np.float32))
                att.multi_head_attention(x, params)
        else:
            def run(rep: int):
                r = derive_rng(seed, n, rep)
                x = Tensor(r.normal(0, 1, (n, d)).astype(np.float32))
                att.fast_multi_head_attention(x, params, m, r)
        return run
    d_f = 4 * d
    if mechanism == "ffn_standard":
        params = ffn.StandardFfn(
            w1=Tensor(rng.normal(0, 0.02, (d, d_f)).astype(np.float32)),
            b1=Tensor(np.zeros(d_f, np.float32)),
            w2=Tensor(rng.normal(0, 0.02, (d_f, d)).astype(np.float32)),
            b2=Tensor(np.zeros(d, np.float32)),
        )
    elif mechanism == "ffn_factorized":
        params = ffn.FactorizedFfn(
            w1a=Tensor(rng.normal(0, 0.02, (d, d_r)).astype(np.float32)),
            w1b=Tensor(rng.normal(0, 0.02, (d_r, d_f)).astype(np.float32)),
            w2a=Tensor(rng.normal(0, 0.02, (d_f, d_r)).astype(np.float32)),
            w2b=Tensor(rng.normal(0, 0.02, (d_r, d)).astype(np.float32)),
            b1=Tensor(np.zeros(d_f, np.float32)),
            b2=Tensor(np.zeros(d, np.float32)),
        )
    else:
        raise ConfigError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")

    def run(rep: int):
        x = Tensor(derive_rng(seed, n, rep).normal(0, 1, (n, d)).astype(np.float32))
        ffn.ffn_forward(x, params)
    return run


def _time_one(run, reps: int, warmup: int = 3) -> float:
    times = []
    with T.no_grad():
        for rep in range(warmup + reps):
            t0 = time.perf_counter_ns()
            run(rep)
            t1 = time.perf_counter_ns()
            if rep >= warmup:
                times.append(t1 - t0)
    return float(np.median(times))


def sweep_seq_len(mechanism: str, n_list, d: int = 128, h: int = 4, m: int = 8,
                  d_r: int = 16, reps: int = 5, seed: int = 0) -> list[BenchResult]:
    """Time forward passes over a sequence-length sweep and fit the log-log slope."""
    n_list = list(n_list)
    if len(n_list) < 4:
        raise InputError(f"need >= 4 sweep points, got {len(n_list)}")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise InputError(f"n_list must be strictly increasing, got {n_list}")
    if n_list[-1] < 8 * n_list[0]:
        raise InputError(f"sweep must span >= 8x, got {n_list[0]}..{n_list[-1]}")
    if reps < 5:
        raise InputError(f"need >= 5 repetitions, got {reps}")
    medians = []
    for n in n_list:
        run = _forward_fn(mechanism, n, d, h, m, d_r, seed)
        if threadpool_limits is not None:
            with threadpool_limits(limits=1):
                medians.append(_time_one(run, reps))
        else:  # pragma: no cover
            medians.append(_time_one(run, reps))
    slope = float(np.polyfit(np.log(n_list), np.log(medians), 1)[0])
    return [BenchResult(mechanism, n, d, h, m, d_r, reps, t, slope)
            for n, t in zip(n_list, medians)]


def write_csv(results: list[BenchResult], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mechanism", "n", "d", "h", "m", "reps", "median_ns", "slope"])
        for r in results:
            w.writerow([r.mechanism, r.n, r.d, r.h, r.m, r.reps,
                        f"{r.median_ns:.0f}", f"{r.slope:.4f}"])
