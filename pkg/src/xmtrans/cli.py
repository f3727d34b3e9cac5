"""Operator surface: synth / train / eval / ablate / export subcommands driven
by a declarative YAML config, with flag overrides.

Exit codes: 0 success, 1 usage or config error, 2 runtime/numerical failure.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path

import click
import numpy as np
import yaml

from .autodiff import ShapeError, TapeError, UsageError
from .data import (AlignmentError, ColumnSpec, ConfigError, IngestionError,
                   SchemaError, attach_centroids, default_num_regions,
                   kmeans_partition, load_centroids_csv, load_grid_csv,
                   load_holidays, make_windows, synthesize_lagged_pair,
                   write_centroids_csv, write_grid_csv)
from .model import (AblationWiring, ModelConfig, ModelParams, load_checkpoint,
                    save_checkpoint)
from .training import (EvalReport, TrainConfig, TrainingError,
                       build_smr_training_set, build_tmr_datasets,
                       evaluate_horizons, export_results, filter_fine,
                       multi_seed_report, train_single_resolution, train_tmr)

USAGE_ERRORS = (ConfigError, SchemaError, IngestionError, AlignmentError,
                UsageError, click.UsageError, click.BadParameter,
                FileNotFoundError)


@dataclass
class RunConfig:
    """Everything one experiment needs, parsed from a YAML file."""

    tm_path: Path
    sm_path: Path | None
    centroids_path: Path | None
    holidays_path: Path | None
    out_dir: Path
    model: dict
    train: dict
    split: dict          # name -> (start date, end date)
    horizons_hours: list
    fine_only: bool
    tmr: bool
    smr: bool
    k_regions: int | None
    seed: int
    lookback_hours: float
    horizon_hours: float
    tm_fill: str = "zero"
    sm_fill: str = "zero"

    @classmethod
    def load(cls, path, overrides=None):
        raw = yaml.safe_load(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        overrides = overrides or {}
        problems = []

        paths = raw.get("paths", {})
        base = Path(path).parent

        def resolve(key, required):
            p = paths.get(key)
            if p is None:
                if required:
                    problems.append(f"paths.{key} is required")
                return None
            p = Path(p)
            return p if p.is_absolute() else base / p

        tm_path = resolve("tm", required=True)
        sm_path = resolve("sm", required=False)
        centroids_path = resolve("centroids", required=False)
        holidays_path = resolve("holidays", required=False)
        out_dir = paths.get("out", "runs")
        out_dir = Path(out_dir) if Path(out_dir).is_absolute() else base / out_dir

        model = dict(raw.get("model", {}))
        model.update({k: v for k, v in overrides.items()
                      if k in ("wiring", "d", "heads", "layers")})
        train = dict(raw.get("train", {}))
        ev = raw.get("eval", {})

        split = {}
        for name in ("train", "valid", "test"):
            rng = raw.get("split", {}).get(name)
            if not rng or len(rng) != 2:
                problems.append(f"split.{name} must be [start, end] dates")
                continue
            try:
                split[name] = (_parse_date(rng[0]), _parse_date(rng[1]))
            except ValueError as e:
                problems.append(f"split.{name}: {e}")
        if len(split) == 3:
            order = [split["train"], split["valid"], split["test"]]
            for (a, b), nm in zip(order, ("train", "valid", "test")):
                if a > b:
                    problems.append(f"split.{nm} start is after its end")
            if not (order[0][1] < order[1][0] and order[1][1] < order[2][0]):
                problems.append("split ranges must be disjoint and ordered "
                                "train < valid < test")

        for p, name in ((tm_path, "tm"), (sm_path, "sm"),
                        (centroids_path, "centroids"), (holidays_path, "holidays")):
            if p is not None and not p.exists():
                problems.append(f"paths.{name}: file not found: {p}")

        wiring = str(model.get("wiring", "e4")).lower()
        try:
            wiring = AblationWiring(wiring)
        except ValueError:
            problems.append(f"model.wiring must be one of e1..e4, got {wiring!r}")
            wiring = AblationWiring.E4
        model["wiring"] = wiring
        if wiring.uses_support and sm_path is None:
            problems.append(f"wiring {wiring.value} requires the support "
                            "modality: set paths.sm")

        if problems:
            raise ConfigError("invalid run config:\n  - " + "\n  - ".join(problems))

        seed = int(raw.get("seed", 0))
        env_seed = os.environ.get("XMTRANS_SEED")
        if env_seed is not None:
            seed = int(env_seed)

        return cls(
            tm_path=tm_path, sm_path=sm_path, centroids_path=centroids_path,
            holidays_path=holidays_path, out_dir=out_dir, model=model,
            train=train, split=split,
            horizons_hours=list(ev.get("horizons_hours", [3, 6, 12])),
            fine_only=bool(ev.get("fine_only", True)),
            tmr=bool(train.get("tmr", False)), smr=bool(train.get("smr", False)),
            k_regions=train.get("k_regions"),
            seed=seed,
            lookback_hours=float(model.get("lookback_hours", 24)),
            horizon_hours=float(model.get("horizon_hours", 12)),
            tm_fill=raw.get("paths", {}).get("tm_fill", "zero"),
            sm_fill=raw.get("paths", {}).get("sm_fill", "zero"),
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=int(t.get("epochs", 20)),
            batch_size=int(t.get("batch_size", 64)),
            patience=int(t.get("patience", 3)),
            lr=float(t.get("lr", 1e-4)),
            consistency_weight=float(t.get("consistency_weight", 1.0)),
            resolutions=tuple(t.get("resolutions", (15, 60, 360))),
            agg_mode=t.get("agg_mode", "mean"),
            seeds=tuple(t.get("seeds", (0, 1, 2))),
        )

    def model_config(self, r: int, seed: int) -> ModelConfig:
        lookback_min = int(self.lookback_hours * 60)
        horizon_min = int(self.horizon_hours * 60)
        if lookback_min % r or horizon_min % r:
            raise ConfigError(f"lookback/horizon must be whole multiples of "
                              f"resolution {r} minutes")
        m = self.model
        return ModelConfig(
            input_len=lookback_min // r,
            horizon=horizon_min // r,
            interval_minutes=r,
            d=int(m.get("d", 512)),
            heads=int(m.get("heads", 8)),
            layers=int(m.get("layers", 2)),
            wiring=m["wiring"],
            use_te_self_attention=bool(m.get("use_te_self_attention", True)),
            conv_kernel=int(m.get("conv_kernel", 3)),
            conv_padding=m.get("conv_padding", "causal"),
            readout=m.get("readout", "last"),
            seed=seed,
        )


def _parse_date(s):
    if isinstance(s, datetime):
        return s
    if isinstance(s, date):
        return datetime(s.year, s.month, s.day)
    return datetime.fromisoformat(str(s))


def _in_range(ts, rng):
    start, end = rng
    # end date is inclusive through its final day
    return start <= ts < end.replace(hour=23, minute=59, second=59)


def _load_grids(cfg: RunConfig):
    tm = load_grid_csv(cfg.tm_path, ColumnSpec(fill=cfg.tm_fill), "tm")
    if cfg.sm_path is not None:
        sm = load_grid_csv(cfg.sm_path, ColumnSpec(fill=cfg.sm_fill), "sm")
    else:
        sm = tm  # support stream unused for wirings e1/e2
    if cfg.centroids_path is not None:
        cents = load_centroids_csv(cfg.centroids_path)
        tm = attach_centroids(tm, cents)
        if sm is not tm:
            sm = attach_centroids(sm, cents)
    holidays = load_holidays(cfg.holidays_path) if cfg.holidays_path else set()
    return tm, sm, holidays


def _date_split_fn(cfg: RunConfig):
    def split(samples):
        train_idx = [i for i, s in enumerate(samples)
                     if _in_range(s.start, cfg.split["train"])]
        val = [s for s in samples if _in_range(s.start, cfg.split["valid"])]
        if not train_idx:
            raise ConfigError("no windows fall inside split.train")
        if not val:
            raise ConfigError("no windows fall inside split.valid")
        return [samples[i] for i in train_idx], val, np.array(train_idx)
    return split


def run_training(cfg: RunConfig, run_dir: Path):
    """Full pipeline for every seed; returns the EvalReport."""
    tm, sm, holidays = _load_grids(cfg)
    tc = cfg.train_config()
    rs = tc.resolutions
    if tm.interval_minutes != rs[0]:
        raise ConfigError(f"data interval {tm.interval_minutes} must equal the "
                          f"finest resolution {rs[0]}")
    split_fn = _date_split_fn(cfg)

    regions = None
    if cfg.smr:
        if tm.centroids is None:
            raise ConfigError("smr requires paths.centroids")
        k = cfg.k_regions or default_num_regions(tm.num_locations)
        regions = kmeans_partition(tm.centroids, k, seed=cfg.seed,
                                   location_ids=tm.location_ids)

    reports = []
    curves = {}
    for seed in tc.seeds:
        seed_dir = run_dir if len(tc.seeds) == 1 else run_dir / f"seed_{seed}"
        if cfg.tmr:
            datasets = build_tmr_datasets(tm, sm, int(cfg.lookback_hours * 60),
                                          int(cfg.horizon_hours * 60), tc,
                                          holidays)
            configs = {r: cfg.model_config(r, seed) for r in rs}
            augment = None
            if cfg.smr:
                augment = {}
                for r in rs:
                    mc = configs[r]
                    coarse = build_smr_training_set(
                        [], regions, *_grids_at(tm, sm, r, tc),
                        mc.input_len, mc.horizon, holidays, tc.agg_mode,
                        stride=rs[-1] // r)
                    augment[r] = [s for s in coarse
                                  if _in_range(s.start, cfg.split["train"])]
            results = train_tmr(datasets, configs, tc, split_fn=split_fn,
                                augment=augment)
            for r, res in results.items():
                save_checkpoint(res.params, configs[r],
                                seed_dir / f"stage_{r}" / "best.ckpt")
                curves[f"seed{seed}_stage{r}"] = {"train": res.train_curve,
                                                  "val": res.val_curve}
            final_params, final_config = results[rs[0]].params, configs[rs[0]]
        else:
            r = rs[0]
            mc = cfg.model_config(r, seed)
            samples = make_windows(tm, sm, mc.input_len, mc.horizon, holidays)
            train_s, val_s, _ = split_fn(samples)
            if cfg.smr:
                coarse = build_smr_training_set([], regions, tm, sm,
                                                mc.input_len, mc.horizon,
                                                holidays, tc.agg_mode)
                train_s = train_s + [s for s in coarse
                                     if _in_range(s.start, cfg.split["train"])]
            params = ModelParams(mc)
            res = train_single_resolution(train_s, val_s, params, mc, tc)
            save_checkpoint(res.params, mc, seed_dir / f"stage_{r}" / "best.ckpt")
            curves[f"seed{seed}_stage{r}"] = {"train": res.train_curve,
                                              "val": res.val_curve}
            final_params, final_config = res.params, mc

        test = _test_windows(cfg, tm, sm, holidays, final_config)
        reports.append(evaluate_horizons(final_params, final_config, test,
                                         cfg.horizons_hours,
                                         fine_only=cfg.fine_only))
    report = multi_seed_report(reports, cfg.horizons_hours)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(json.dumps(report.to_dict()))
    (run_dir / "loss_curves.json").write_text(json.dumps(curves))
    return report


def _grids_at(tm, sm, r, tc):
    from .data import aggregate_time
    if r == tm.interval_minutes:
        return tm, sm
    return (aggregate_time(tm, r, tc.agg_mode), aggregate_time(sm, r, tc.agg_mode))


def _test_windows(cfg: RunConfig, tm, sm, holidays, mc: ModelConfig):
    samples = make_windows(tm, sm, mc.input_len, mc.horizon, holidays)
    test = [s for s in samples if _in_range(s.start, cfg.split["test"])]
    if not test:
        raise ConfigError("no windows fall inside split.test")
    return test


# ---------------------------------------------------------------------------
# click commands


@click.group()
def cli():
    """Cross-modality fusion forecaster."""


@cli.command("synth")
@click.option("--n", default=8, show_default=True, help="locations")
@click.option("--t", default=2000, show_default=True, help="time steps")
@click.option("--r", default=15, show_default=True, help="interval minutes")
@click.option("--lag", default=4, show_default=True, help="support-lead lag (steps)")
@click.option("--coupling", default=0.9, show_default=True)
@click.option("--noise-sd", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=".", show_default=True, type=click.Path())
def cmd_synth(n, t, r, lag, coupling, noise_sd, seed, out):
    """Write a lag-coupled synthetic pair: tm.csv, sm.csv, centroids.csv."""
    tm, sm = synthesize_lagged_pair(n, t, r, lag, coupling, noise_sd, seed)
    out = Path(out)
    write_grid_csv(tm, out / "tm.csv")
    write_grid_csv(sm, out / "sm.csv")
    write_centroids_csv(tm, out / "centroids.csv")
    click.echo(f"wrote tm.csv, sm.csv, centroids.csv under {out}")


@cli.command("train")
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--wiring", type=click.Choice(["e1", "e2", "e3", "e4"]),
              default=None, help="override the attention wiring")
@click.option("--run-id", default=None, help="run directory name")
def cmd_train(config_path, wiring, run_id):
    """Train per the config; writes checkpoints, loss curves, and a report."""
    overrides = {"wiring": wiring} if wiring else {}
    cfg = RunConfig.load(config_path, overrides)
    run_id = run_id or time.strftime("%Y%m%d-%H%M%S") + f"-{os.getpid()}"
    run_dir = cfg.out_dir / run_id
    report = run_training(cfg, run_dir)
    click.echo(f"run directory: {run_dir}")
    for h, cells in report.format_cells().items():
        click.echo(f"  {h}h: MAE {cells['mae']}  RMSE {cells['rmse']}")


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--horizons", default="3,6,12", show_default=True)
@click.option("--fine-only/--no-fine-only", default=True, show_default=True)
@click.option("--out", default=None, type=click.Path())
def cmd_eval(checkpoint, config_path, horizons, fine_only, out):
    """Evaluate a checkpoint on the config's test range; export predictions."""
    cfg = RunConfig.load(config_path)
    params, mc = load_checkpoint(checkpoint)
    tm, sm, holidays = _load_grids(cfg)
    if mc.interval_minutes != tm.interval_minutes:
        raise ConfigError(f"checkpoint resolution {mc.interval_minutes} does "
                          f"not match data interval {tm.interval_minutes}")
    test = _test_windows(cfg, tm, sm, holidays, mc)
    horizons_hours = [int(h) for h in str(horizons).split(",") if h]
    rep = evaluate_horizons(params, mc, test, horizons_hours, fine_only=fine_only)
    report = multi_seed_report([rep], horizons_hours)
    out_dir = Path(out) if out else Path(checkpoint).parent / "eval"
    export_results(params, mc, filter_fine(test) if fine_only else test,
                   out_dir, report=report, max_samples=32)
    click.echo(json.dumps(report.to_dict(), indent=2))


@cli.command("ablate")
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--run-id", default=None)
def cmd_ablate(config_path, run_id):
    """Run wirings e1..e4 and emit a comparison table."""
    run_id = run_id or time.strftime("%Y%m%d-%H%M%S") + f"-{os.getpid()}-ablate"
    table = {}
    base = None
    for wiring in ("e1", "e2", "e3", "e4"):
        cfg = RunConfig.load(config_path, {"wiring": wiring})
        if wiring in ("e3", "e4") and cfg.sm_path is None:
            raise ConfigError(f"wiring {wiring} requires paths.sm")
        base = cfg.out_dir / run_id
        report = run_training(cfg, base / wiring)
        table[wiring] = report.to_dict()
    out = base / "ablation.json"
    out.write_text(json.dumps(table, indent=2))
    click.echo(f"ablation table: {out}")


@cli.command("export")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--max-samples", default=32, show_default=True)
def cmd_export(checkpoint, config_path, out, max_samples):
    """Export prediction and attention JSON for the config's test range."""
    cfg = RunConfig.load(config_path)
    params, mc = load_checkpoint(checkpoint)
    tm, sm, holidays = _load_grids(cfg)
    test = _test_windows(cfg, tm, sm, holidays, mc)
    paths = export_results(params, mc, test, out, max_samples=max_samples)
    click.echo("wrote " + ", ".join(str(p) for p in paths.values()))


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except USAGE_ERRORS as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        return 1
    except (TrainingError, ShapeError, TapeError, Exception) as e:
        click.echo(f"runtime failure: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
