"""Experiment configuration and the grid runners behind the command line.

Every runner reads an :class:`ExperimentConfig`, skips tasks whose run id is
already in the ledger, and appends one JSON record per finished task.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import pandas as pd

from . import energy as en
from . import svr as svr_mod
from . import xai
from .models import ModelGraph, build_model, load_model
from .pipeline import WindowedDataset, make_dataset, read_site_csv, write_site_csv
from .synth import SITES, generate_frame, load_profile
from .training import DEFAULT_TRAIN_DAYS, RunLedger, TrainConfig, evaluate, persistence, split, task_seed, train
from .transfer import FreezeMask, all_masks, transfer

logger = logging.getLogger(__name__)

ARCHS = ("rnn", "cnn", "svr")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    sites: list[str] = field(default_factory=lambda: ["PS"])
    p_grid: list[int] = field(default_factory=lambda: [10, 15, 20])
    dn_grid: list[int] = field(default_factory=lambda: [0, 4, 9, 14])
    arch: list[str] = field(default_factory=lambda: ["rnn", "cnn"])
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    seed: int = 1
    out: str = "runs"
    teacher_site: str = "PS"
    teacher: str | None = None
    masks: list[str] | None = None
    epochs: int = 30
    patience: int = 5
    batch_size: int | None = None
    optimizer: str = "adam"
    lr: float = 1e-3
    train_days: dict[str, float] = field(default_factory=dict)
    site_overrides: dict[str, dict[str, Any]] = field(default_factory=dict)
    jobs: int = 1
    svr_C: list[float] = field(default_factory=lambda: list(svr_mod.DEFAULT_C_GRID))
    svr_eps: list[float] = field(default_factory=lambda: list(svr_mod.DEFAULT_EPS_GRID))
    svr_gamma: list[float] | None = None
    svr_tol: float = 1e-3
    svr_max_train: int = 1500
    svr_max_iter: int = 1_000_000
    explain_methods: list[str] = field(default_factory=lambda: ["smoothgrad", "lrp"])
    explain_stride: int = 1
    n_noise: int = 50
    sigma: float = 0.1
    model: str | None = None

    def validate(self) -> "ExperimentConfig":
        def bad(name, msg):
            raise ConfigError(f"field '{name}': {msg}")

        for name in ("sites", "p_grid", "dn_grid", "arch", "seeds"):
            if not getattr(self, name):
                bad(name, "must be a non-empty list")
        for a in self.arch:
            if a not in ARCHS:
                bad("arch", f"unknown architecture '{a}' (expected one of {', '.join(ARCHS)})")
        if any(int(p) < 2 for p in self.p_grid):
            bad("p_grid", "every p must be >= 2")
        if any(int(d) < 0 for d in self.dn_grid):
            bad("dn_grid", "every dn must be >= 0")
        if self.epochs < 0:
            bad("epochs", "must be >= 0")
        if self.jobs < 1:
            bad("jobs", "must be >= 1")
        if self.masks:
            for m in self.masks:
                try:
                    FreezeMask.parse(m)
                except ValueError as exc:
                    bad("masks", str(exc))
        for m in self.explain_methods:
            if m not in ("smoothgrad", "lrp"):
                bad("explain_methods", f"unknown method '{m}'")
        for s in list(self.sites) + [self.teacher_site]:
            if s.upper() not in SITES and not Path(s).exists():
                bad("sites", f"'{s}' is neither a built-in site ({', '.join(SITES)}) nor an existing file")
        out = Path(self.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            bad("out", f"cannot create '{out}': {exc}")
        return self

    def train_config(self) -> TrainConfig:
        days = dict(DEFAULT_TRAIN_DAYS)
        days.update(self.train_days)
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            lr=self.lr,
            patience=self.patience,
            seeds=tuple(self.seeds),
            train_days=days,
        )

    def train_days_for(self, site: str) -> float:
        days = dict(DEFAULT_TRAIN_DAYS)
        days.update(self.train_days)
        key = site_id(site)
        if key not in days:
            # generated CSVs are named like "EB_seed1.csv"
            key = key.split("_")[0].upper()
        if key not in days:
            raise ConfigError(f"field 'train_days': no entry for site '{key}'")
        return float(days[key])


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """JSON config file plus overrides; overrides that are not None win."""
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def site_id(site: str) -> str:
    return site.upper() if site.upper() in SITES and not Path(site).exists() else Path(site).stem


@lru_cache(maxsize=8)
def _frame(site: str, seed: int, overrides: str) -> pd.DataFrame:
    if site.upper() in SITES and not Path(site).exists():
        return generate_frame(load_profile(site, **json.loads(overrides)), seed)
    return read_site_csv(site)


def site_frame(cfg: ExperimentConfig, site: str) -> pd.DataFrame:
    ov = cfg.site_overrides.get(site_id(site), {})
    return _frame(site, cfg.seed, json.dumps(ov, sort_keys=True))


def datasets(cfg: ExperimentConfig, site: str, p: int, dn: int) -> tuple[WindowedDataset, WindowedDataset]:
    days = cfg.train_days_for(site)
    ds = make_dataset(site_frame(cfg, site), p, dn, days, site=site_id(site))
    return split(ds, days)


def generate_site(site: str, seed: int, out_dir: str | Path, **overrides) -> Path:
    frame = generate_frame(load_profile(site, **overrides), seed)
    path = Path(out_dir) / f"{site_id(site)}_seed{seed}.csv"
    write_site_csv(frame, path)
    return path


# ---------------------------------------------------------------------------
# task plumbing
# ---------------------------------------------------------------------------


def run_id(**parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _models_dir(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.out) / "models"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _execute(tasks: list[tuple[Callable, tuple]], jobs: int, ledger: RunLedger) -> list[dict[str, Any]]:
    """Run tasks on a bounded pool; the calling process is the only ledger writer."""
    records = []
    if jobs <= 1 or len(tasks) <= 1:
        for fn, args in tasks:
            rec = fn(*args)
            ledger.append(rec)
            records.append(rec)
        return records
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *args) for fn, args in tasks]
        for fut in futures:
            rec = fut.result()
            ledger.append(rec)
            records.append(rec)
    return records


def _base_record(cfg: ExperimentConfig, mode: str, arch: str, site: str, p: int, dn: int, rep: int, **extra) -> dict:
    tc = cfg.train_config()
    parts = dict(
        mode=mode,
        arch=arch,
        site=site_id(site),
        p=int(p),
        dn=int(dn),
        rep=int(rep),
        seed=cfg.seed,
        config=tc.digest(),
        overrides=cfg.site_overrides.get(site_id(site), {}),
        **extra,
    )
    rid = run_id(**parts)
    return dict(parts, run_id=rid, key=f"p{p}_dn{dn}", task_seed=task_seed(cfg.seed, rid))


# ---------------------------------------------------------------------------
# stand-alone training
# ---------------------------------------------------------------------------


def _train_task(cfg: ExperimentConfig, rec: dict[str, Any]) -> dict[str, Any]:
    tr, va = datasets(cfg, rec["site_path"], rec["p"], rec["dn"])
    model = build_model(rec["arch"], rec["p"], seed=rec["task_seed"])
    res = train(model, tr, cfg.train_config(), va, seed=rec["task_seed"])
    weights = _models_dir(cfg) / f"{rec['run_id']}.dtlw"
    res.model.save(weights)
    return dict(
        rec,
        mse=res.final.mse,
        per_output_mse=res.final.per_output_mse,
        persistence_mse=persistence(va).mse,
        epochs_used=res.epochs_used,
        best_epoch=res.best_epoch,
        wall_time=res.wall_time,
        steps=res.steps,
        param_count=model.param_count(),
        trainable_param_count=model.trainable_param_count(),
        n_train=len(tr),
        n_val=len(va),
        weights=str(weights),
    )


def run_standalone(cfg: ExperimentConfig, sites: Sequence[str] | None = None) -> list[dict[str, Any]]:
    ledger = RunLedger(cfg.out)
    done = ledger.run_ids()
    tasks = []
    for site in sites or cfg.sites:
        for arch in cfg.arch:
            if arch == "svr":
                continue
            for p in cfg.p_grid:
                for dn in cfg.dn_grid:
                    for rep in cfg.seeds:
                        rec = _base_record(cfg, "standalone", arch, site, p, dn, rep)
                        if rec["run_id"] in done:
                            continue
                        rec["site_path"] = site
                        tasks.append((_train_task, (cfg, rec)))
    return _execute(tasks, cfg.jobs, ledger)


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


def teacher_model(cfg: ExperimentConfig, arch: str, p: int, dn: int) -> tuple[ModelGraph, dict[str, Any]]:
    """Load ``cfg.teacher`` or train (once, cached) a teacher on ``cfg.teacher_site``."""
    if cfg.teacher:
        model = load_model(cfg.teacher)
        if model.arch != arch or model.input_shape[0] != p:
            raise ConfigError(
                f"field 'teacher': {cfg.teacher} is {model.arch} with p={model.input_shape[0]}, need {arch} with p={p}"
            )
        model.freeze_all(False)
        return model, {"teacher": str(cfg.teacher)}
    ledger = RunLedger(cfg.out)
    rec = _base_record(cfg, "teacher", arch, cfg.teacher_site, p, dn, 0)
    for r in ledger.records():
        if r["run_id"] == rec["run_id"] and Path(r["weights"]).exists():
            model = load_model(r["weights"])
            model.freeze_all(False)
            return model, r
    rec["site_path"] = cfg.teacher_site
    rec = _train_task(cfg, rec)
    ledger.append(rec)
    model = load_model(rec["weights"])
    model.freeze_all(False)
    return model, rec


def _transfer_task(cfg: ExperimentConfig, rec: dict[str, Any], teacher_path: str) -> dict[str, Any]:
    tr, va = datasets(cfg, rec["site_path"], rec["p"], rec["dn"])
    teacher = load_model(teacher_path)
    teacher.freeze_all(False)
    mask = FreezeMask.parse(rec["mask"])
    res = transfer(teacher, tr, mask, cfg.train_config(), va, seed=rec["task_seed"])
    final = res.final if res.final is not None else evaluate(res.model, va)
    return dict(
        rec,
        mse=final.mse,
        per_output_mse=final.per_output_mse,
        persistence_mse=persistence(va).mse,
        epochs_used=res.epochs_used,
        best_epoch=res.best_epoch,
        wall_time=res.wall_time,
        steps=res.steps,
        param_count=res.model.param_count(),
        trainable_param_count=mask.trainable_param_count(res.model),
        n_train=len(tr),
        n_val=len(va),
    )


def run_transfer(cfg: ExperimentConfig, sites: Sequence[str] | None = None) -> list[dict[str, Any]]:
    """Teacher per (arch, p, dn), then every mask x replicate on each student site."""
    ledger = RunLedger(cfg.out)
    done = ledger.run_ids()
    masks = [FreezeMask.parse(m) for m in cfg.masks] if cfg.masks else all_masks()
    tasks = []
    for arch in cfg.arch:
        if arch == "svr":
            continue
        for p in cfg.p_grid:
            for dn in cfg.dn_grid:
                teacher, trec = teacher_model(cfg, arch, p, dn)
                tpath = trec.get("weights") or trec["teacher"]
                for site in sites or cfg.sites:
                    for mask in masks:
                        for rep in cfg.seeds:
                            rec = _base_record(
                                cfg,
                                "transfer",
                                arch,
                                site,
                                p,
                                dn,
                                rep,
                                mask=mask.label,
                                teacher_id=trec.get("run_id", tpath),
                            )
                            if rec["run_id"] in done:
                                continue
                            rec["site_path"] = site
                            rec["teacher_site"] = trec.get("site", "")
                            tasks.append((_transfer_task, (cfg, rec, tpath)))
    return _execute(tasks, cfg.jobs, ledger)


# ---------------------------------------------------------------------------
# SVR baseline
# ---------------------------------------------------------------------------


def _svr_task(cfg: ExperimentConfig, rec: dict[str, Any]) -> dict[str, Any]:
    tr, va = datasets(cfg, rec["site_path"], rec["p"], rec["dn"])
    stride = max(1, int(np.ceil(len(tr) / cfg.svr_max_train)))
    sub = tr.subset(np.arange(0, len(tr), stride))
    t0 = time.perf_counter()
    model, cells = svr_mod.fit_multi(
        sub.X, sub.Y, va.X, va.Y, cfg.svr_C, cfg.svr_eps, cfg.svr_gamma, cfg.svr_tol, cfg.svr_max_iter
    )
    wall = time.perf_counter() - t0
    pred = model.predict(va.X.reshape(len(va), -1))
    per = ((pred - va.Y) ** 2).mean(axis=0)
    return dict(
        rec,
        mse=float(per.mean()),
        per_output_mse=per.tolist(),
        persistence_mse=persistence(va).mse,
        epochs_used=0,
        wall_time=wall,
        param_count=int(sum(m.support_vectors.size + len(m.dual_coef) + 1 for m in model.models)),
        trainable_param_count=int(sum(len(m.dual_coef) for m in model.models)),
        svr_params=[{"C": c.C, "epsilon": c.epsilon, "gamma": c.gamma} for c in cells],
        n_train=len(sub),
        n_val=len(va),
    )


def run_svr(cfg: ExperimentConfig) -> list[dict[str, Any]]:
    ledger = RunLedger(cfg.out)
    done = ledger.run_ids()
    tasks = []
    for site in cfg.sites:
        for p in cfg.p_grid:
            for dn in cfg.dn_grid:
                rec = _base_record(
                    cfg,
                    "standalone",
                    "svr",
                    site,
                    p,
                    dn,
                    0,
                    svr_grid=[cfg.svr_C, cfg.svr_eps, cfg.svr_gamma, cfg.svr_max_train],
                )
                if rec["run_id"] in done:
                    continue
                rec["site_path"] = site
                tasks.append((_svr_task, (cfg, rec)))
    return _execute(tasks, cfg.jobs, ledger)


# ---------------------------------------------------------------------------
# explanations
# ---------------------------------------------------------------------------


def run_explain(cfg: ExperimentConfig) -> list[Path]:
    """Attribution maps for ``cfg.model`` or for every stand-alone run in the ledger."""
    from .plotting import plot_attribution

    targets: list[tuple[str, str, int, int, str]] = []
    if cfg.model:
        m = load_model(cfg.model)
        for site in cfg.sites:
            for dn in cfg.dn_grid:
                targets.append((cfg.model, site, m.input_shape[0], dn, Path(cfg.model).stem))
    else:
        seen = set()
        for r in RunLedger(cfg.out).records():
            if r.get("mode") != "standalone" or "weights" not in r:
                continue
            if r["arch"] not in cfg.arch or r["p"] not in cfg.p_grid or r["dn"] not in cfg.dn_grid:
                continue
            key = (r["arch"], r["site"], r["p"], r["dn"])
            if key in seen:
                continue
            seen.add(key)
            site = next((s for s in cfg.sites if site_id(s) == r["site"]), r["site"])
            targets.append((r["weights"], site, r["p"], r["dn"], r["run_id"]))
    written = []
    for weights, site, p, dn, mid in targets:
        model = load_model(weights)
        _, va = datasets(cfg, site, p, dn)
        out_dir = Path(cfg.out) / "xai" / f"{model.arch}_{site_id(site)}_p{p}_dn{dn}"
        maps = []
        for method in cfg.explain_methods:
            maps += xai.explain_dataset(
                model,
                va.X,
                method,
                stride=cfg.explain_stride,
                n_noise=cfg.n_noise,
                sigma=cfg.sigma,
                seed=task_seed(cfg.seed, f"xai:{mid}"),
                model_id=mid,
                dataset_id=site_id(site),
            )
        written.append(xai.export_maps(maps, out_dir, va.columns, va.target_columns))
        for m in maps:
            plot_attribution(m, va.columns, va.target_columns, out_dir / f"{m.method}_{va.target_columns[m.output_index]}.png")
    return written


# ---------------------------------------------------------------------------
# energy and reports
# ---------------------------------------------------------------------------


def energy_table(records: Iterable[dict[str, Any]], power: en.PowerModel | None = None) -> list[dict[str, Any]]:
    """Stand-alone vs transfer comparison per (arch, student site), averaged over runs."""
    power = power or en.PowerModel()
    groups: dict[tuple[str, str, str], list[en.EnergyReport]] = {}
    for r in records:
        if r.get("mode") not in ("standalone", "transfer") or r.get("arch") == "svr":
            continue
        groups.setdefault((r["mode"], r["arch"], r["site"]), []).append(en.account(r, power))
    rows = []
    for (mode, arch, site), reps in sorted(groups.items()):
        if mode != "standalone" or ("transfer", arch, site) not in groups:
            continue
        rows.append(en.compare(en.average_reports(reps), en.average_reports(groups[("transfer", arch, site)])))
    return rows


def run_energy(cfg: ExperimentConfig, power: en.PowerModel | None = None) -> Path:
    rows = energy_table(RunLedger(cfg.out).records(), power)
    path = Path(cfg.out) / "energy.csv"
    en.write_comparison_csv(rows, path)
    (Path(cfg.out) / "energy.json").write_text(json.dumps(rows, indent=2))
    return path


REPORT_COLUMNS = ["site", "arch", "mode", "mask", "p", "dn", "mse", "mse_std", "persistence_mse", "n_runs", "best"]


def report_rows(records: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    """Mean MSE per (site, arch, mode, mask, p, dn).

    ``best`` flags the lowest MSE among all rows sharing (site, p, dn), so DL,
    DTL and SVR results compete in one grid cell.
    """
    groups: dict[tuple, list[dict[str, Any]]] = {}
    for r in records:
        if r.get("mode") not in ("standalone", "transfer") or "mse" not in r:
            continue
        key = (r["site"], r["arch"], r["mode"], r.get("mask", ""), r["p"], r["dn"])
        groups.setdefault(key, []).append(r)
    rows = []
    for (site, arch, mode, mask, p, dn), rs in sorted(groups.items()):
        mses = np.array([r["mse"] for r in rs])
        rows.append(
            dict(
                site=site,
                arch=arch,
                mode=mode,
                mask=mask,
                p=p,
                dn=dn,
                mse=float(mses.mean()),
                mse_std=float(mses.std()),
                persistence_mse=float(np.mean([r.get("persistence_mse", np.nan) for r in rs])),
                n_runs=len(rs),
                best=False,
            )
        )
    cells: dict[tuple, dict[str, Any]] = {}
    for row in rows:
        k = (row["site"], row["p"], row["dn"])
        if k not in cells or row["mse"] < cells[k]["mse"]:
            cells[k] = row
    for row in cells.values():
        row["best"] = True
    return rows


def best_transfer(rows: Sequence[dict[str, Any]]) -> dict[tuple, dict[str, Any]]:
    """Best mask per (site, arch, p, dn) from report rows."""
    best: dict[tuple, dict[str, Any]] = {}
    for r in rows:
        if r["mode"] != "transfer":
            continue
        k = (r["site"], r["arch"], r["p"], r["dn"])
        if k not in best or r["mse"] < best[k]["mse"]:
            best[k] = r
    return best


def run_report(cfg: ExperimentConfig) -> Path:
    """Write report.csv, per (site, arch, mode) p-by-dn grids, and figures."""
    from .plotting import plot_mse_grid

    out = Path(cfg.out)
    rows = report_rows(RunLedger(out).records())
    path = out / "report.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    grids_dir = out / "grids"
    # DTL cells show the best mask per cell, as in the paper's DTL tables
    grid_rows = [r for r in rows if r["mode"] == "standalone"] + list(best_transfer(rows).values())
    by_table: dict[tuple[str, str, str], list[dict[str, Any]]] = {}
    for r in grid_rows:
        by_table.setdefault((r["site"], r["arch"], r["mode"]), []).append(r)
    for (site, arch, mode), rs in sorted(by_table.items()):
        ps = sorted({r["p"] for r in rs})
        dns = sorted({r["dn"] for r in rs})
        grid = np.full((len(ps), len(dns)), np.nan)
        for r in rs:
            grid[ps.index(r["p"]), dns.index(r["dn"])] = r["mse"]
        grids_dir.mkdir(parents=True, exist_ok=True)
        stem = f"{site}_{arch}_{mode}"
        with open(grids_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["p"] + [f"dn={d}" for d in dns])
            for i, p in enumerate(ps):
                w.writerow([p] + [f"{v:.6g}" for v in grid[i]])
        plot_mse_grid(grid, ps, dns, f"{site} {arch.upper()} {mode}", grids_dir / f"{stem}.png")
    return path


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "generate_site",
    "run_standalone",
    "run_transfer",
    "run_svr",
    "run_explain",
    "run_energy",
    "run_report",
    "report_rows",
    "energy_table",
]
