import csv

import pytest
from hypothesis import given
from hypothesis import strategies as st

from traffic_dtl.energy import (
    EnergyError,
    EnergyReport,
    PowerModel,
    account,
    average_reports,
    compare,
    energy_wh,
    savings,
    write_comparison_csv,
)
from traffic_dtl.experiments import energy_table

UNIT = PowerModel(core_power_w=100.0, memory_power_w=0.0, usage=1.0, pue=1.0)


def _report(wh, arch="rnn", wall=1.0):
    return EnergyReport(arch, "EB", 100, 100, 10, wall, UNIT, wh)


def test_one_hour_at_100w():
    assert energy_wh(3600.0, UNIT) == pytest.approx(100.0)
    assert energy_wh(0.0, UNIT) == 0.0


def test_formula_exact():
    pm = PowerModel(125.0, 69.66, 0.5, 1.67)
    assert energy_wh(7200.0, pm) == 2.0 * (125.0 * 0.5 + 69.66) * 1.67


def test_half_time_half_energy():
    base = account({"wall_time": 100.0, "arch": "cnn"}, UNIT)
    half = account({"wall_time": 50.0, "arch": "cnn"}, UNIT, baseline=base)
    assert half.savings_pct == pytest.approx(50.0)


@pytest.mark.parametrize("base,dtl,pct", [(19.8, 1.0, 94.95), (1.0, 0.4, 60.00)])
def test_published_savings_rows(base, dtl, pct):
    assert compare(_report(base), _report(dtl))["saved_pct"] == pct


def test_identical_runs_save_nothing():
    assert compare(_report(3.0), _report(3.0))["saved_pct"] == 0.0


def test_errors():
    with pytest.raises(EnergyError):
        compare(_report(1.0, "rnn"), _report(1.0, "cnn"))
    with pytest.raises(EnergyError):
        account({"run_id": "x"})
    with pytest.raises(EnergyError):
        account({"wall_time": -1.0})
    with pytest.raises(EnergyError):
        savings(1.0, 0.0)
    with pytest.raises(EnergyError):
        average_reports([])


def test_average_and_csv(tmp_path):
    avg = average_reports([_report(1.0, wall=2.0), _report(3.0, wall=4.0)])
    assert avg.energy_wh == 2.0 and avg.wall_time == 3.0
    rows = [compare(_report(19.8), _report(1.0)), compare(_report(1.0, "cnn"), _report(0.4, "cnn"))]
    path = write_comparison_csv(rows, tmp_path / "e.csv")
    table = list(csv.reader(open(path)))
    assert table[0] == ["metric", "standalone_rnn", "dtl_rnn", "standalone_cnn", "dtl_cnn"]
    assert [r[0] for r in table[1:]] == [
        "N. of parameters",
        "N. of training epochs",
        "Training time [s]",
        "Energy drained [Wh]",
        "% of saved energy by DTL",
    ]
    assert table[-1][2] == "94.95" and table[-1][4] == "60.00"


def test_energy_table_from_records():
    recs = [
        dict(mode="standalone", arch="rnn", site="EB", wall_time=10.0, param_count=5, epochs_used=20),
        dict(mode="standalone", arch="rnn", site="EB", wall_time=30.0, param_count=5, epochs_used=20),
        dict(mode="transfer", arch="rnn", site="EB", wall_time=4.0, param_count=5, trainable_param_count=2, epochs_used=5),
        dict(mode="transfer", arch="rnn", site="EB", wall_time=0.0, param_count=5, trainable_param_count=0, epochs_used=0),
        dict(mode="standalone", arch="svr", site="EB", wall_time=1.0),
        dict(mode="teacher", arch="rnn", site="PS", wall_time=99.0),
    ]
    rows = energy_table(recs, UNIT)
    assert len(rows) == 1
    r = rows[0]
    assert r["standalone"]["time_s"] == 20.0 and r["dtl"]["time_s"] == 2.0
    assert r["dtl"]["params"] == 1.0
    assert r["saved_pct"] == 90.0


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0.01, 10))
def test_linear_in_wall_time(a, b, scale):
    pm = PowerModel(usage=0.7, pue=1.3)
    assert energy_wh(a + b, pm) == pytest.approx(energy_wh(a, pm) + energy_wh(b, pm), rel=1e-12, abs=1e-12)
    assert energy_wh(scale * a, pm) == pytest.approx(scale * energy_wh(a, pm), rel=1e-12, abs=1e-12)
