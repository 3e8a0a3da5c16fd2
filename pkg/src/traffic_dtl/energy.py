"""Training energy from wall time and a fixed power model."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class PowerModel:
    """Defaults sized for one 20-core 2.1 GHz Xeon socket (125 W TDP) with
    187 GB of RAM at 0.3725 W/GB and a data-centre PUE of 1.67."""

    core_power_w: float = 125.0
    memory_power_w: float = 69.66
    usage: float = 1.0
    pue: float = 1.67

    def watts(self) -> float:
        return (self.core_power_w * self.usage + self.memory_power_w) * self.pue


@dataclass
class EnergyReport:
    arch: str
    dataset: str
    param_count: int
    trainable_param_count: float
    epochs_used: float
    wall_time: float
    power: PowerModel
    energy_wh: float
    savings_pct: float | None = None
    mode: str = "standalone"

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["power"] = asdict(self.power)
        return d


def energy_wh(wall_time: float, power: PowerModel) -> float:
    return wall_time / 3600.0 * power.watts()


def savings(energy: float, baseline: float) -> float:
    """Percent of the baseline energy saved."""
    if baseline <= 0:
        raise EnergyError(f"baseline energy must be positive, got {baseline}")
    return 100.0 * (1.0 - energy / baseline)


def account(run: dict[str, Any], power: PowerModel | None = None, baseline: EnergyReport | None = None) -> EnergyReport:
    """Energy report for one run-ledger record."""
    power = power or PowerModel()
    wt = run.get("wall_time")
    if wt is None:
        raise EnergyError(f"run {run.get('run_id', '?')} has no wall_time")
    if wt < 0:
        raise EnergyError(f"run {run.get('run_id', '?')} has negative wall_time {wt}")
    e = energy_wh(float(wt), power)
    rep = EnergyReport(
        arch=run.get("arch", ""),
        dataset=run.get("site", ""),
        param_count=int(run.get("param_count", 0)),
        trainable_param_count=float(run.get("trainable_param_count", run.get("param_count", 0))),
        epochs_used=float(run.get("epochs_used", 0)),
        wall_time=float(wt),
        power=power,
        energy_wh=e,
        mode=run.get("mode", "standalone"),
    )
    if baseline is not None:
        rep.savings_pct = savings(e, baseline.energy_wh)
    return rep


def average_reports(reports: Sequence[EnergyReport]) -> EnergyReport:
    """Mean report over runs, e.g. across horizons of the same model."""
    if not reports:
        raise EnergyError("no reports to average")
    first = reports[0]
    n = len(reports)
    return EnergyReport(
        arch=first.arch,
        dataset=first.dataset,
        param_count=first.param_count,
        trainable_param_count=sum(r.trainable_param_count for r in reports) / n,
        epochs_used=sum(r.epochs_used for r in reports) / n,
        wall_time=sum(r.wall_time for r in reports) / n,
        power=first.power,
        energy_wh=sum(r.energy_wh for r in reports) / n,
        mode=first.mode,
    )


def compare(standalone: EnergyReport, dtl: EnergyReport) -> dict[str, Any]:
    """Side-by-side row set (params, epochs, time, Wh, % saved)."""
    if standalone.arch != dtl.arch:
        raise EnergyError(f"cannot compare architectures '{standalone.arch}' and '{dtl.arch}'")
    pct = savings(dtl.energy_wh, standalone.energy_wh)
    return {
        "arch": standalone.arch,
        "dataset": standalone.dataset,
        "standalone": {
            "params": standalone.trainable_param_count,
            "epochs": standalone.epochs_used,
            "time_s": standalone.wall_time,
            "energy_wh": standalone.energy_wh,
        },
        "dtl": {
            "params": dtl.trainable_param_count,
            "epochs": dtl.epochs_used,
            "time_s": dtl.wall_time,
            "energy_wh": dtl.energy_wh,
        },
        "saved_pct": round(pct, 2),
    }


def write_comparison_csv(rows: Iterable[dict[str, Any]], path: str | Path) -> Path:
    """Rows are metrics, columns are (mode, arch) pairs, like a complexity table."""
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["metric"]
    for r in rows:
        header += [f"standalone_{r['arch']}", f"dtl_{r['arch']}"]
    metrics = [
        ("params", "N. of parameters"),
        ("epochs", "N. of training epochs"),
        ("time_s", "Training time [s]"),
        ("energy_wh", "Energy drained [Wh]"),
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for key, label in metrics:
            line = [label]
            for r in rows:
                line += [f"{r['standalone'][key]:.6g}", f"{r['dtl'][key]:.6g}"]
            w.writerow(line)
        line = ["% of saved energy by DTL"]
        for r in rows:
            line += ["-", f"{r['saved_pct']:.2f}"]
        w.writerow(line)
    return path
