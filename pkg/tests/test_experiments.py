import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rcmhomog import experiments as ex
from rcmhomog.errors import ConvergenceError, ParameterError, UsageError
from rcmhomog.experiments import (
    CONDUCTANCE,
    DIFFUSION,
    POTENTIAL,
    SPECTRAL,
    SampleStats,
    SweepConfig,
    SweepError,
    bound_check,
    effcond_bound,
    effcond_nonelliptic_bound,
    effcond_tail_bound,
    evaluate_sample,
    run_sweep,
    scaling_fit,
    slope_consistent,
    tail_profile,
    variance_stderr,
    write_outputs,
)
from rcmhomog.lattice import DistributionSpec

CONST = DistributionSpec.constant(1.0)
ELL2 = DistributionSpec.uniform_elliptic(2)
THETA01 = DistributionSpec.two_point(0.5, 0.0, math.e - 1)

finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(st.lists(finite, min_size=0, max_size=40), st.lists(finite, min_size=0, max_size=40))
def test_merge_matches_concatenation(xs, ys):
    a, b = SampleStats.from_values(xs), SampleStats.from_values(ys)
    m = a.merge(b)
    whole = SampleStats.from_values(xs + ys)
    assert m.n == whole.n
    if whole.n:
        scale = max(1.0, max(abs(v) for v in xs + ys))
        assert m.mean == pytest.approx(whole.mean, rel=1e-12, abs=1e-12 * scale)
        assert m.M2 == pytest.approx(whole.M2, rel=1e-9, abs=1e-9 * scale**2)
        assert m.min == whole.min and m.max == whole.max
    assert m.variance >= 0


@given(st.lists(finite, min_size=2, max_size=60))
def test_welford_matches_numpy(xs):
    s = SampleStats.from_values(xs)
    scale = max(1.0, max(abs(v) for v in xs)) ** 2
    assert s.variance == pytest.approx(np.var(xs, ddof=1), rel=1e-9, abs=1e-9 * scale)
    assert s.variance >= 0


def test_sweep_config_validation():
    with pytest.raises(ParameterError):
        SweepConfig("nonsense", 2, (4,), CONST, 5)
    with pytest.raises(ParameterError):
        SweepConfig(CONDUCTANCE, 2, (4, 4), CONST, 5)
    with pytest.raises(ParameterError):
        SweepConfig(CONDUCTANCE, 2, (4,), CONST, 0)
    with pytest.raises(ParameterError):
        SweepConfig(DIFFUSION, 2, (4,), CONST, 5, entry=(0, 2))
    with pytest.raises(ParameterError):
        SweepConfig(POTENTIAL, 2, (4,), CONST, 5)
    with pytest.raises(ParameterError):
        SweepConfig(POTENTIAL, 2, (4,), ELL2, 5, potential_dist=THETA01)
    cfg = SweepConfig(POTENTIAL, 2, [2, 4], CONST, 5, potential_dist=THETA01)
    assert cfg.direction == (1, 0) and cfg.N_list == (2, 4)
    assert SweepConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize(
    "cfg",
    [
        SweepConfig(DIFFUSION, 2, (3, 4), CONST, 4, entry=(0, 1)),
        SweepConfig(CONDUCTANCE, 2, (3, 4), CONST, 4),
        SweepConfig(SPECTRAL, 2, (3, 4), CONST, 4),
        SweepConfig(POTENTIAL, 2, (2, 3), CONST, 4, potential_dist=DistributionSpec.constant(1.0)),
    ],
    ids=lambda c: c.quantity,
)
def test_constant_sweeps_have_zero_variance(cfg):
    res = run_sweep(cfg)
    for N in cfg.N_list:
        assert res.stats[N].variance == pytest.approx(0, abs=1e-24)
        assert res.stats[N].n == cfg.samples


def test_conductance_mean_within_elliptic_bounds():
    res = run_sweep(SweepConfig(CONDUCTANCE, 3, (4,), ELL2, 200, master_seed=3))
    assert 1.0 <= res.stats[4].mean <= 4.0


def test_rerun_and_threads_are_byte_identical(tmp_path):
    cfg = SweepConfig(CONDUCTANCE, 2, (3, 5), ELL2, 12, master_seed=8)
    a = run_sweep(cfg)
    b = run_sweep(cfg, threads=4)
    assert a.csv_text() == b.csv_text()
    pa = write_outputs(a, tmp_path / "a")
    pb = write_outputs(b, tmp_path / "b")
    for x, y in zip(pa, pb):
        assert x.read_bytes() == y.read_bytes()


def test_csv_schema_and_row_reproduction():
    cfg = SweepConfig(SPECTRAL, 2, (3,), ELL2, 5, master_seed=1)
    res = run_sweep(cfg)
    lines = res.csv_text().splitlines()
    assert lines[0] == ",".join(ex.CSV_HEADER)
    assert len(lines) == 6
    row = lines[3].split(",")
    assert int(row[4]) == 2 and row[9] == "" and row[10] == ""
    again = evaluate_sample(cfg, 3, 2)
    assert repr(again.value) == row[6]
    assert again.seed == int(row[5])


def test_timing_column_optional():
    cfg = SweepConfig(CONDUCTANCE, 2, (3,), ELL2, 2, record_timing=True)
    rows = run_sweep(cfg).csv_text().splitlines()[1:]
    assert all(float(r.split(",")[9]) >= 0 for r in rows)


def test_too_many_failures_is_sweep_error(monkeypatch):
    def broken(config, N, seed):
        if seed % 4 == 0:
            raise ConvergenceError("forced", 1.0, 5)
        return 1.0, 0.0, 1

    monkeypatch.setattr(ex, "_compute", broken)
    cfg = SweepConfig(CONDUCTANCE, 2, (3,), ELL2, 80)
    with pytest.raises(SweepError):
        run_sweep(cfg)


def test_one_failure_tolerated(monkeypatch):
    def one_bad(config, N, seed):
        if seed == TARGET[0]:
            raise ConvergenceError("forced", 1.0, 5)
        return float(seed % 7), 0.0, 1

    cfg = SweepConfig(CONDUCTANCE, 2, (3,), ELL2, 40)
    TARGET = [ex.derive_seed(cfg.master_seed, 3, 5)]
    monkeypatch.setattr(ex, "_compute", one_bad)
    res = run_sweep(cfg)
    assert res.failures[3] == 1 and res.stats[3].n == 39
    assert res.rows[5].flag == "solver_failure" and math.isnan(res.rows[5].value)


def test_tail_profile_properties():
    table = tail_profile(np.full(50, 2.5), 8, 0.5)
    assert all(r["count"] == 0 for r in table)
    x = np.random.default_rng(0).standard_normal(500)
    b = effcond_bound(3, 2.0)
    table = tail_profile(x, 8, b.rho, (1, 2, 4, 8), bound=b.tail)
    freqs = [r["freq"] for r in table]
    assert all(q <= p for p, q in zip(freqs, freqs[1:]))
    assert all(r["bound"] == pytest.approx(4 * math.exp(-r["t"] / math.sqrt(2 * 32 * 3 * 8))) for r in table)
    with pytest.raises(UsageError):
        tail_profile([], 8, 0.5)


def test_scaling_fit_exact_power():
    Ns = [4, 8, 16, 32]
    fit = scaling_fit(Ns, [N**-3.0 for N in Ns])
    assert fit["slope"] == pytest.approx(-3.0, abs=1e-10)
    assert fit["r2"] == pytest.approx(1.0)
    assert slope_consistent(fit, 3.0) and not slope_consistent(fit, 4.0)
    fit = scaling_fit(Ns, [N**-2.0 for N in Ns], errors=[0.1 * N**-2.0 for N in Ns])
    assert fit["slope"] == pytest.approx(-2.0, abs=1e-10)


def test_scaling_fit_drops_nonpositive(caplog):
    fit = scaling_fit([2, 4, 8], [0.25, 0.0, 1 / 64])
    assert fit["n_points"] == 2 and fit["slope"] == pytest.approx(-2.0)
    assert "nonpositive" in caplog.text


def test_bound_constants_and_guards():
    b = effcond_bound(3, 2.0)
    assert b.constant == 1536 and b.beta == 1
    assert effcond_nonelliptic_bound(5, 1.0).constant == 640
    with pytest.raises(ParameterError):
        effcond_bound(2, 2.0)
    with pytest.raises(ParameterError):
        effcond_nonelliptic_bound(4, 1.0)
    t = effcond_tail_bound(3, 1.0, 0.6, 1.0)
    assert t.beta == pytest.approx(0.4) and t.constant == 16 * 96 * 2
    assert effcond_tail_bound(3, 1.0, 0.3, 1.0).beta == 0.5
    assert effcond_tail_bound(4, 1.0, 1.5, 1.0).beta == pytest.approx(0.5)


def test_bound_check_constant_environment():
    cfg = SweepConfig(CONDUCTANCE, 3, (2, 3), CONST, 5)
    v = bound_check(run_sweep(cfg), effcond_bound(3, 1.0))
    assert v.passed and all(p["var"] == 0 for p in v.per_N)


def test_summary_contents():
    cfg = SweepConfig(CONDUCTANCE, 3, (2, 3, 4), DistributionSpec.two_point(0.5, 0.5, 2), 20)
    s = run_sweep(cfg).summary()
    assert set(s["per_N"]) == {"2", "3", "4"}
    assert {"n", "mean", "var", "stderr"} <= set(s["per_N"]["2"])
    assert s["fit"]["slope"] < 0
    assert s["bounds"][0]["bound"] == "effcond" and s["bounds"][0]["passed"]
    assert set(s["tails"]["effcond"]) == {"2", "3", "4"}
    json.dumps(s)


def test_variance_stderr_small_samples():
    assert variance_stderr([1.0, 2.0]) == math.inf
    assert variance_stderr(np.ones(10)) == 0.0


def test_rate_only_bound_reports_no_verdict():
    res = run_sweep(SweepConfig(SPECTRAL, 3, (2, 3), ELL2, 4))
    (entry,) = res.summary()["bounds"]
    assert entry["bound"] == "specgap" and entry["passed"] is None
