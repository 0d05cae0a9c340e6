"""Benchmarks: analytic operation counts and sweep harness contracts."""

import csv

import pytest

from anchorbert.bench import BenchResult, count_flops, sweep_seq_len, write_csv
from anchorbert.errors import ConfigError, InputError


# -- count_flops ----------------------------------------------------------

def test_count_flops_standard_vs_fast_reference_scale():
    std = count_flops("standard_mha", {"n": 512, "d": 768})
    fast = count_flops("fast_mha", {"n": 512, "d": 768, "m": 32})
    assert std / fast > 8


def test_count_flops_closed_forms():
    assert count_flops("standard_mha", {"n": 4, "d": 8}) == 2 * 16 * 8 + 4 * 64
    assert count_flops("fast_mha", {"n": 4, "d": 8, "m": 2}) == 4 * 2 * 4 * 8 + 2 * 64
    assert count_flops("ffn_standard", {"n": 4, "d": 8, "d_f": 32}) == 2 * 4 * 8 * 32
    assert count_flops("ffn_factorized", {"n": 4, "d": 8, "d_f": 32, "d_r": 2}) == \
        2 * 4 * 2 * (8 + 32)


def test_count_flops_m_equals_n_exceeds_similarity_path():
    # with m = n the anchored count passes the standard similarity-path count
    n, d = 256, 128
    fast = count_flops("fast_mha", {"n": n, "d": d, "m": n})
    similarity_path = 2 * n * n * d
    assert fast > similarity_path


def test_count_flops_errors():
    with pytest.raises(InputError):
        count_flops("standard_mha", {"n": 0, "d": 128})
    with pytest.raises(InputError):
        count_flops("fast_mha", {"n": 16, "d": 128})   # missing m
    with pytest.raises(InputError):
        count_flops("ffn_factorized", {"n": 16, "d": 128})  # missing d_r
    with pytest.raises(ConfigError):
        count_flops("nope", {"n": 16, "d": 128})


# -- sweep preconditions --------------------------------------------------

def test_sweep_rejects_too_few_points():
    with pytest.raises(InputError):
        sweep_seq_len("ffn_standard", [64])


def test_sweep_rejects_non_increasing():
    with pytest.raises(InputError):
        sweep_seq_len("ffn_standard", [8, 16, 16, 64])


def test_sweep_rejects_narrow_span():
    with pytest.raises(InputError):
        sweep_seq_len("ffn_standard", [8, 16, 32, 48])


def test_sweep_rejects_few_reps():
    with pytest.raises(InputError):
        sweep_seq_len("ffn_standard", [8, 16, 32, 64], reps=3)


def test_sweep_rejects_unknown_mechanism():
    with pytest.raises(ConfigError):
        sweep_seq_len("nope", [8, 16, 32, 64])


# -- small real sweeps ----------------------------------------------------

def test_sweep_runs_and_reports_shared_slope():
    results = sweep_seq_len("ffn_standard", [8, 16, 32, 64], d=32, reps=5)
    assert len(results) == 4
    assert all(r.median_ns > 0 for r in results)
    slopes = {r.slope for r in results}
    assert len(slopes) == 1


def test_factorized_ffn_faster_than_standard():
    # complexity invariant at d >= 128, d_r = d/8, same n
    n_list = [32, 64, 128, 256]
    std = sweep_seq_len("ffn_standard", n_list, d=128, reps=7)
    fac = sweep_seq_len("ffn_factorized", n_list, d=128, d_r=16, reps=7)
    assert sum(f.median_ns < s.median_ns for f, s in zip(fac, std)) >= 3


def test_write_csv(tmp_path):
    results = [BenchResult("ffn_standard", 8, 32, 4, 8, 16, 5, 1234.0, 1.01)]
    out = tmp_path / "bench.csv"
    write_csv(results, out)
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["mechanism", "n", "d", "h", "m", "reps", "median_ns", "slope"]
    assert rows[1][0] == "ffn_standard" and rows[1][1] == "8"
