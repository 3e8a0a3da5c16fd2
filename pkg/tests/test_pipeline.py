import json
from importlib import resources

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traffic_dtl.pipeline import (
    DataError,
    DciAggregate,
    NormParams,
    WindowedDataset,
    bits_per_re,
    denormalize,
    downsample,
    make_dataset,
    normalize,
    pearson_matrix,
    read_site_csv,
    throughput_bits,
    window,
    write_site_csv,
)


def _raw(rows):
    return pd.DataFrame(rows, columns=["timestamp", "rnti", "mcs_down", "mcs_up", "rb_down", "rb_up"])


# -- downsampling -----------------------------------------------------------


def test_distinct_rnti_and_mean_mcs():
    aggs = downsample(_raw([(0, 7, 10, 5, 6, 2), (30, 7, 20, 7, 6, 2)]))
    assert len(aggs) == 1
    a = aggs[0]
    assert a.rnti_count == 1
    assert a.mcs_down == 15 and a.mcs_up == 6
    # 12 RBs over 100 RBs x 120 000 subframes
    assert a.rb_down == pytest.approx(100 * 12 / (100 * 120_000))


def test_empty_bucket_dropped_not_zero_filled():
    aggs = downsample(_raw([(0, 1, 5, 5, 1, 1), (400, 2, 5, 5, 1, 1)]))
    assert [a.timestamp for a in aggs] == [0, 360]


def test_bucket_missing_whole_variable_dropped():
    aggs = downsample(_raw([(0, 1, np.nan, 5, 1, 1), (10, 2, np.nan, 5, 1, 1), (130, 3, 4, 5, 1, 1)]))
    assert [a.timestamp for a in aggs] == [120]


def test_partial_missing_kept():
    aggs = downsample(_raw([(0, 1, np.nan, 5, 1, 1), (10, 2, 8, 5, 1, 1)]))
    assert len(aggs) == 1 and aggs[0].mcs_down == 8 and aggs[0].rnti_count == 2


def test_unordered_timestamps_raise():
    with pytest.raises(DataError, match="not ordered"):
        downsample(_raw([(10, 1, 5, 5, 1, 1), (0, 2, 5, 5, 1, 1)]))


def test_aggregate_invariants():
    with pytest.raises(DataError):
        DciAggregate(0, 1, 32.0, 1.0, 1.0, 1.0)
    with pytest.raises(DataError):
        DciAggregate(0, 1, 3.0, 1.0, 101.0, 1.0)
    with pytest.raises(DataError):
        DciAggregate(0, -1, 3.0, 1.0, 1.0, 1.0)


# -- throughput ----------------------------------------------------------------


def test_tbs_hand_oracle_mcs10_50rb_one_subframe():
    # independent evaluation of the shipped table: 12 subcarriers x 14 symbols
    doc = json.loads(resources.files("traffic_dtl.resources").joinpath("tbs_table.json").read_text())
    e = next(e for e in doc["entries"] if e["mcs"] == 10)
    hand = 50 * 12 * 14 * e["qm"] * e["rate"]
    assert hand == pytest.approx(11088.0)
    got = throughput_bits(10, 50.0, bandwidth_rb=100, subframes=1)
    assert float(got) == pytest.approx(hand, rel=1e-12)


def test_throughput_zero_rb_and_monotone():
    assert float(throughput_bits(20, 0.0)) == 0.0
    mcs = np.linspace(0, 31, 200)
    t = throughput_bits(mcs, 40.0)
    assert np.all(np.diff(t) >= 0)
    rb = np.linspace(0, 100, 50)
    assert np.all(np.diff(throughput_bits(17, rb)) >= 0)


def test_mcs_out_of_range():
    with pytest.raises(DataError):
        bits_per_re(31.5)
    with pytest.raises(DataError):
        bits_per_re(-1)


# -- normalization ----------------------------------------------------------


def test_normalize_examples():
    p = NormParams(["a"], [2.0], [10.0])
    assert normalize(np.array([[6.0], [2.0], [10.0]]), p).ravel().tolist() == [0.0, -1.0, 1.0]
    assert normalize(np.array([[20.0], [-5.0]]), p).ravel().tolist() == [1.0, -1.0]


def test_constant_column_named():
    with pytest.raises(DataError, match="'b'"):
        NormParams.fit(np.array([[1.0, 3.0], [2.0, 3.0]]), ["a", "b"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30), st.integers(0, 10_000))
def test_property_denormalize_inverts(values, seed):
    v = np.array(values).reshape(-1, 1)
    if v.min() == v.max():
        return
    p = NormParams.fit(v, ["x"])
    back = denormalize(normalize(v, p), p)
    assert np.allclose(back, v, atol=1e-12 * max(1.0, np.abs(v).max()))


# -- windowing --------------------------------------------------------------


def _naive_windows(T, p, dn):
    out = []
    n = 0
    while n + p - 1 + dn + 1 < T:
        out.append((list(range(n, n + p)), n + p + dn))
        n += 1
    return out


def test_window_vs_naive_oracle_50_triples():
    rng = np.random.default_rng(11)
    for _ in range(50):
        p = int(rng.integers(1, 21))
        dn = int(rng.integers(0, 15))
        T = int(rng.integers(p + dn + 1, p + dn + 80))
        series = rng.normal(size=(T, 3))
        targets = rng.normal(size=(T, 2))
        ds = window(series, targets, p, dn)
        ref = _naive_windows(T, p, dn)
        assert len(ds) == len(ref) == T - p + 1 - (dn + 1)
        for k, (rows, tgt) in enumerate(ref):
            assert np.array_equal(ds.X[k], series[rows])
            assert np.array_equal(ds.Y[k], targets[tgt])
            assert ds.target_index[k] == tgt


def test_window_examples():
    s = np.arange(100.0)[:, None]
    ds = window(s, s, 10, 0)
    assert len(ds) == 90
    assert ds.X[0, -1, 0] == 9 and ds.Y[0, 0] == 10
    assert len(window(s[:15], s[:15], 10, 4)) == 1
    with pytest.raises(DataError, match="at least"):
        window(s[:14], s[:14], 10, 4)


def test_window_p1_dn0_is_next_row():
    s = np.arange(5.0)[:, None]
    ds = window(s, s, 1, 0)
    assert np.array_equal(ds.X[:, 0, 0] + 1, ds.Y[:, 0])


def test_windows_never_span_dropped_bucket():
    ts = np.arange(30) * 120
    ts = np.delete(ts, 12)  # bucket 12 was removed
    s = np.arange(len(ts), dtype=float)[:, None]
    ds = window(s, s, 5, 1, timestamps=ts)
    for a, t in zip(ds.start_index, ds.target_index):
        assert np.all(np.diff(ts[a : t + 1]) == 120)
    # runs of 12 and 17 regular rows, each yields len - (p + dn) windows
    assert len(ds) == (12 - 6) + (17 - 6)


def test_normalize_window_commute():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 5, size=(40, 2))
    p = NormParams.fit(x, ["a", "b"])
    a = window(normalize(x, p), normalize(x, p), 4, 2)
    b = window(x, x, 4, 2)
    assert np.allclose(a.X, normalize(b.X, p))


def test_dataset_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(30, 5))
    ds = window(x, x, 3, 1, timestamps=np.arange(30) * 120)
    ds.input_norm = NormParams.fit(x, list("abcde"))
    ds.save(tmp_path / "d")
    back = WindowedDataset.load(tmp_path / "d")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.Y_last, ds.Y_last)
    assert back.input_norm == ds.input_norm and back.p == 3 and back.dn == 1


def test_make_dataset_ranges():
    from traffic_dtl.synth import generate_frame, load_profile

    frame = generate_frame(load_profile("EB", days=3), seed=2)
    ds = make_dataset(frame, 10, 0, 2, site="EB")
    assert ds.X.min() >= -1 and ds.X.max() <= 1 and ds.Y.min() >= -1 and ds.Y.max() <= 1
    assert ds.X.shape[1:] == (10, 5) and ds.Y.shape[1] == 5


# -- csv -------------------------------------------------------------------


def test_csv_roundtrip_both_schemas(tmp_path):
    from traffic_dtl.synth import generate_frame, load_profile

    frame = generate_frame(load_profile("PS", days=1), seed=1)
    path = tmp_path / "ps.csv"
    write_site_csv(frame, path)
    back = read_site_csv(path)
    assert len(back) == len(frame)
    assert np.allclose(back["rb_down"], frame["rb_down"], atol=1e-6)
    raw = tmp_path / "raw.csv"
    _raw([(0, 1, 5, 5, 1, 1), (10, 2, 7, 5, 1, 1)]).to_csv(raw, index=False)
    agg = read_site_csv(raw)
    assert agg["rnti_count"].tolist() == [2] and "thr_down" in agg.columns
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_site_csv(bad)


# -- pearson ---------------------------------------------------------------


def _two_pass(x, y):
    mx, my = sum(x) / len(x), sum(y) / len(y)
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    return num / (sum((a - mx) ** 2 for a in x) ** 0.5 * sum((b - my) ** 2 for b in y) ** 0.5)


def test_pearson_vs_two_pass():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1000, 5))
    x[:, 1] += 0.5 * x[:, 0]
    r = pearson_matrix(x)
    for i in range(5):
        for j in range(5):
            assert abs(r[i, j] - _two_pass(list(x[:, i]), list(x[:, j]))) < 1e-10
    assert np.allclose(r, r.T) and np.all(np.diag(r) == 1)


def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson_matrix(np.stack([x, -x], 1))[0, 1] == pytest.approx(-1.0)
    with pytest.raises(DataError, match="constant"):
        pearson_matrix(np.stack([x, np.ones(10)], 1))
