"""Training loops (single-resolution, temporal multi-resolution recursion,
spatial multi-resolution augmentation), horizon evaluation, and JSON export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (AlignmentError, ConfigError, RegionMap, SeriesGrid,
                   aggregate_space, aggregate_time, make_windows)
from .model import (ModelConfig, ModelParams, batch_arrays, forward_batch,
                    model_forward)


class TrainingError(RuntimeError):
    """Numerical failure during optimization."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    patience: int = 3
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    consistency_weight: float = 1.0   # weight of the cross-resolution term
    resolutions: tuple = (15, 60, 360)
    agg_mode: str = "mean"
    seeds: tuple = (0, 1, 2)
    shuffle: bool = True

    def __post_init__(self):
        r1, r2, r3 = self.resolutions
        if not (r1 < r2 < r3):
            raise ConfigError(f"resolutions must increase, got {self.resolutions}")
        if r2 % r1 != 0 or r3 % r2 != 0:
            raise ConfigError(f"each resolution must divide the next, "
                              f"got {self.resolutions}")
        if self.agg_mode not in ("mean", "sum"):
            raise ConfigError(f"agg_mode must be mean|sum, got {self.agg_mode!r}")


@dataclass
class EvalReport:
    """Per-horizon MAE/RMSE, per seed and aggregated."""

    horizons_hours: list
    per_seed: list          # one {horizon: {"mae":, "rmse":}} per seed
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.mean:
            self._aggregate()
        self._check()

    def _aggregate(self):
        for h in self.horizons_hours:
            maes = [r[h]["mae"] for r in self.per_seed]
            rmses = [r[h]["rmse"] for r in self.per_seed]
            self.mean[h] = {"mae": float(np.mean(maes)),
                            "rmse": float(np.mean(rmses))}
            self.std[h] = {"mae": float(np.std(maes)),
                           "rmse": float(np.std(rmses))}

    def _check(self):
        for r in self.per_seed:
            for h, cell in r.items():
                if not (cell["rmse"] >= cell["mae"] >= 0.0):
                    raise TrainingError(f"horizon {h}: RMSE {cell['rmse']} < "
                                        f"MAE {cell['mae']}")

    def to_dict(self):
        return {"horizons_hours": self.horizons_hours,
                "per_seed": [{str(h): v for h, v in r.items()}
                             for r in self.per_seed],
                "mean": {str(h): v for h, v in self.mean.items()},
                "std": {str(h): v for h, v in self.std.items()}}

    def format_cells(self):
        """Table-style 'average (std)' strings per horizon and metric."""
        out = {}
        for h in self.horizons_hours:
            out[h] = {m: f"{self.mean[h][m]:.2f} ({self.std[h][m]:.2f})"
                      for m in ("mae", "rmse")}
        return out


# ---------------------------------------------------------------------------
# aggregation of predictions


def aggregate_predictions(pred: np.ndarray, r: int, target_r: int,
                          mode: str = "mean") -> np.ndarray:
    """Blockwise coarsen a forecast on the last axis from r to target_r minutes."""
    if mode not in ("mean", "sum"):
        raise ConfigError(f"mode must be mean|sum, got {mode!r}")
    if target_r % r != 0:
        raise ConfigError(f"target resolution {target_r} not a multiple of {r}")
    ratio = target_r // r
    if ratio == 1:
        return np.asarray(pred, dtype=np.float64).copy()
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[-1] % ratio != 0:
        raise ConfigError(f"forecast length {pred.shape[-1]} not divisible by "
                          f"ratio {ratio}")
    blocks = pred.reshape(pred.shape[:-1] + (pred.shape[-1] // ratio, ratio))
    return blocks.mean(axis=-1) if mode == "mean" else blocks.sum(axis=-1)


def aggregate_predictions_tensor(pred: Tensor, ratio: int, mode: str) -> Tensor:
    """Differentiable counterpart used inside consistency losses."""
    if ratio == 1:
        return pred
    b, l = pred.shape
    if l % ratio != 0:
        raise ConfigError(f"forecast length {l} not divisible by ratio {ratio}")
    blocks = ad.reshape(pred, (b, l // ratio, ratio))
    return (ad.mean_axis(blocks, axis=2) if mode == "mean"
            else ad.sum_axis(blocks, axis=2))


def consistency_loss(pred: Tensor, frozen_coarse: np.ndarray, ratio: int,
                     mode: str) -> Tensor:
    """MSE between the coarsened fine forecast and a detached coarse forecast."""
    agg = aggregate_predictions_tensor(pred, ratio, mode)
    return ad.mse_loss(agg, Tensor(frozen_coarse))


# ---------------------------------------------------------------------------
# single-resolution training


@dataclass
class TrainResult:
    params: ModelParams
    train_curve: list
    val_curve: list
    best_epoch: int


def train_single_resolution(train_samples: list, val_samples: list,
                            params: ModelParams, model_config: ModelConfig,
                            train_config: TrainConfig,
                            extra_loss=None) -> TrainResult:
    """Mini-batch Adam on MSE, optionally plus a weighted extra term.

    extra_loss(pred_tensor, sample_indices) must return a scalar Tensor; it is
    added with weight consistency_weight. Early stopping on validation MSE
    with the configured patience; the best-validation parameters are returned.
    """
    if not train_samples:
        raise ConfigError("training sample set is empty")
    if not val_samples:
        raise ConfigError("validation sample set is empty")

    tm, sm, cal, target = batch_arrays(train_samples, model_config)
    if not model_config.wiring.uses_support:
        sm = None
    n = tm.shape[0]
    rng = np.random.default_rng(model_config.seed)
    opt = ad.Adam(params.tensors(), lr=train_config.lr, beta1=train_config.beta1,
                  beta2=train_config.beta2, eps=train_config.eps)
    lam = train_config.consistency_weight
    use_extra = extra_loss is not None and lam != 0.0

    best_val = math.inf
    best_values = params.copy_values()
    best_epoch = -1
    train_curve, val_curve = [], []
    bad_epochs = 0
    step = 0
    for epoch in range(train_config.epochs):
        order = rng.permutation(n) if train_config.shuffle else np.arange(n)
        epoch_loss, nb = 0.0, 0
        for b0 in range(0, n, train_config.batch_size):
            idx = order[b0:b0 + train_config.batch_size]
            cal_b = {k: v[idx] for k, v in cal.items()}
            with ad.Tape() as tape:
                res = forward_batch(params, model_config, tm[idx],
                                    None if sm is None else sm[idx], cal_b)
                loss = ad.mse_loss(res.pred, Tensor(target[idx]))
                if use_extra:
                    loss = ad.add(loss, ad.scale(extra_loss(res.pred, idx), lam))
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch "
                                        f"{epoch}, batch {b0 // train_config.batch_size}, "
                                        f"step {step}")
                ad.backward(loss, tape)
            opt.step()
            epoch_loss += value
            nb += 1
            step += 1
        train_curve.append(epoch_loss / nb)

        val_mse = evaluate_mse(params, model_config, val_samples)
        val_curve.append(val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best_values = params.copy_values()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > train_config.patience:
                break

    params.load_values(best_values)
    return TrainResult(params=params, train_curve=train_curve,
                       val_curve=val_curve, best_epoch=best_epoch)


def predict_batch(params: ModelParams, config: ModelConfig,
                  samples: list, batch_size: int = 256) -> np.ndarray:
    """Forecasts [num_samples, L] without recording a tape."""
    tm, sm, cal, _ = batch_arrays(samples, config)
    if not config.wiring.uses_support:
        sm = None
    preds = []
    for b0 in range(0, tm.shape[0], batch_size):
        sl = slice(b0, b0 + batch_size)
        cal_b = {k: v[sl] for k, v in cal.items()}
        res = forward_batch(params, config, tm[sl],
                            None if sm is None else sm[sl], cal_b)
        preds.append(res.pred.data)
    return np.concatenate(preds, axis=0)


def evaluate_mse(params: ModelParams, config: ModelConfig, samples: list) -> float:
    preds = predict_batch(params, config, samples)
    target = np.stack([s.target for s in samples])
    return float(((preds - target) ** 2).mean())


# ---------------------------------------------------------------------------
# temporal multi-resolution recursion


def build_tmr_datasets(tm: SeriesGrid, sm: SeriesGrid, lookback_minutes: int,
                       horizon_minutes: int, train_config: TrainConfig,
                       holidays=frozenset()) -> dict:
    """Index-aligned window sets per resolution.

    Windows at every resolution share wall-clock start times (multiples of the
    coarsest resolution), the same lookback span, and the same horizon span,
    so window i at one resolution covers exactly window i at another.
    """
    rs = train_config.resolutions
    if tm.interval_minutes != rs[0]:
        raise ConfigError(f"source grids must be at the finest resolution "
                          f"{rs[0]}, got {tm.interval_minutes}")
    datasets = {}
    counts = {}
    for r in rs:
        tm_r = aggregate_time(tm, r, train_config.agg_mode) if r != rs[0] else tm
        sm_r = aggregate_time(sm, r, train_config.agg_mode) if r != rs[0] else sm
        input_len = lookback_minutes // r
        horizon = horizon_minutes // r
        if lookback_minutes % r or horizon_minutes % r:
            raise ConfigError(f"lookback/horizon must be whole multiples of "
                              f"every resolution; offending r={r}")
        stride = rs[-1] // r
        samples = make_windows(tm_r, sm_r, input_len, horizon, holidays,
                               stride=stride)
        datasets[r] = samples
        counts[r] = len(samples)
    m = min(counts.values())
    for r in rs:
        # per-location window counts can differ by one block at the tail
        per_loc = counts[r] // tm.num_locations
        keep = m // tm.num_locations
        if per_loc != keep:
            pruned = []
            for i in range(tm.num_locations):
                pruned.extend(datasets[r][i * per_loc:i * per_loc + keep])
            datasets[r] = pruned
    return datasets


def check_tmr_alignment(fine: list, coarse: list):
    if len(fine) != len(coarse):
        raise AlignmentError(f"resolution window counts differ: {len(fine)} vs "
                             f"{len(coarse)}")
    for f, c in zip(fine, coarse):
        if f.start != c.start or f.location_id != c.location_id:
            raise AlignmentError(f"misaligned windows at {f.start.isoformat()} "
                                 f"({f.location_id}) vs {c.start.isoformat()} "
                                 f"({c.location_id})")


def split_train_val(samples: list, val_fraction: float = 0.2):
    """Chronological split; the trailing fraction of window start times becomes
    validation. Returns (train, val, train_indices into samples)."""
    starts = sorted({s.start for s in samples})
    if len(starts) > 1:
        t_cut = starts[min(len(starts) - 1,
                           max(1, int(round(len(starts) * (1.0 - val_fraction)))))]
        train_idx = [i for i, s in enumerate(samples) if s.start < t_cut]
        val = [s for s in samples if s.start >= t_cut]
        if train_idx and val:
            return [samples[i] for i in train_idx], val, np.array(train_idx)
    cut = max(1, len(samples) - 1)
    return samples[:cut], samples[cut:], np.arange(cut)


def train_tmr(datasets: dict, model_configs: dict, train_config: TrainConfig,
              split_fn=None, augment: dict | None = None) -> dict:
    """Coarse-to-fine staged training with aggregation-consistency losses.

    Stage 1 trains the coarsest model with plain MSE. Each later stage trains
    the next-finer model with MSE plus consistency_weight times the MSE between
    its coarsened forecast and the frozen previous model's forecast on the
    aligned window (treated as a constant). Returns {resolution: TrainResult};
    the finest model is the deliverable.

    split_fn(samples) -> (train, val, train_indices); defaults to a 20%
    chronological tail. augment maps resolution -> extra training samples
    (e.g. spatially coarse windows) appended without a consistency term.
    """
    split_fn = split_fn or split_train_val
    rs = sorted(train_config.resolutions, reverse=True)  # coarse -> fine
    results = {}
    frozen_preds = None
    prev_r = None
    for r in rs:
        samples = datasets[r]
        if prev_r is not None:
            check_tmr_alignment(samples, datasets[prev_r])
        train_s, val_s, train_idx = split_fn(samples)
        n_aligned = len(train_s)
        if augment and augment.get(r):
            train_s = list(train_s) + list(augment[r])
        params = ModelParams(model_configs[r])
        extra = None
        if prev_r is not None and train_config.consistency_weight != 0.0:
            ratio = prev_r // r
            coarse = frozen_preds[train_idx]
            mode = train_config.agg_mode

            def extra(pred, idx, coarse=coarse, ratio=ratio, mode=mode,
                      n_aligned=n_aligned):
                mask = idx < n_aligned
                if not mask.any():
                    return Tensor(np.array(0.0))
                sub = ad.take_rows(pred, np.nonzero(mask)[0])
                return consistency_loss(sub, coarse[idx[mask]], ratio, mode)

        results[r] = train_single_resolution(train_s, val_s, params,
                                             model_configs[r], train_config,
                                             extra_loss=extra)
        # frozen forecasts of this stage on its aligned windows, indexed like
        # the next stage's window list
        frozen_preds = predict_batch(results[r].params, model_configs[r], samples)
        prev_r = r
    return results


# ---------------------------------------------------------------------------
# spatial multi-resolution


def build_smr_training_set(fine_samples: list, regions: RegionMap,
                           tm: SeriesGrid, sm: SeriesGrid, input_len: int,
                           horizon: int, holidays=frozenset(),
                           mode: str = "mean", stride: int = 1) -> list:
    """Union of fine samples and windows from the region-aggregated grids."""
    tm_c = aggregate_space(tm, regions, mode)
    sm_c = aggregate_space(sm, regions, mode)
    coarse = make_windows(tm_c, sm_c, input_len, horizon, holidays,
                          stride=stride, is_coarse=True)
    return list(fine_samples) + coarse


def filter_fine(samples: list) -> list:
    return [s for s in samples if not s.is_coarse]


# ---------------------------------------------------------------------------
# evaluation


def evaluate_horizons(params: ModelParams, config: ModelConfig, samples: list,
                      horizons_hours=(3, 6, 12), fine_only: bool = True) -> dict:
    """MAE/RMSE over the first h hours of each forecast, pooled over samples
    and locations (squared errors pooled globally, one root at the end)."""
    if fine_only:
        samples = filter_fine(samples)
    if not samples:
        raise ConfigError("no samples to evaluate")
    preds = predict_batch(params, config, samples)
    target = np.stack([s.target for s in samples])
    report = {}
    for h in horizons_hours:
        steps = h * 60 // config.interval_minutes
        if h * 60 % config.interval_minutes:
            raise ConfigError(f"horizon {h}h is not a whole number of "
                              f"{config.interval_minutes}-minute steps")
        if steps > config.horizon:
            raise ConfigError(f"horizon {h}h ({steps} steps) exceeds forecast "
                              f"length {config.horizon}")
        err = preds[:, :steps] - target[:, :steps]
        report[h] = {"mae": float(np.abs(err).mean()),
                     "rmse": float(np.sqrt((err ** 2).mean()))}
    return report


def multi_seed_report(reports: list, horizons_hours) -> EvalReport:
    return EvalReport(horizons_hours=list(horizons_hours), per_seed=reports)


# ---------------------------------------------------------------------------
# export


def export_results(params: ModelParams, config: ModelConfig, samples: list,
                   out_dir, report: EvalReport | None = None,
                   max_samples: int | None = None) -> dict:
    """Write predictions.json, attention.json, and report.json.

    Floats go through json's repr serialization, which round-trips float64
    exactly. The attention entry per sample is the head-averaged map of the
    last fusion layer's temporal-attention module (self-attention for E1).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chosen = samples[:max_samples] if max_samples else samples

    predictions = []
    attention = []
    for s in chosen:
        bundle = model_forward(s, params, config)
        predictions.append({
            "location_id": bundle.location_id,
            "start": bundle.start.isoformat(),
            "resolution_minutes": bundle.resolution_minutes,
            "input": bundle.tm_input.tolist(),
            "forecast": bundle.forecast.tolist(),
            "truth": None if bundle.target is None else bundle.target.tolist(),
        })
        if bundle.temporal_attention:
            last = bundle.temporal_attention[-1]
            module = "temporal"
        else:
            last = bundle.self_attention[-1]
            module = "self"
        attention.append({
            "location_id": bundle.location_id,
            "start": bundle.start.isoformat(),
            "resolution_minutes": bundle.resolution_minutes,
            "module": module,
            "map": last.mean(axis=0).tolist(),   # head-averaged [T, T]
        })

    paths = {
        "predictions": out_dir / "predictions.json",
        "attention": out_dir / "attention.json",
    }
    paths["predictions"].write_text(json.dumps(predictions))
    paths["attention"].write_text(json.dumps(attention))
    if report is not None:
        paths["report"] = out_dir / "report.json"
        paths["report"].write_text(json.dumps(report.to_dict()))
    return paths
