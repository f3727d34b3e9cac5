"""xMTrans: cross-modality fusion transformer for two-modality long-term
time-series forecasting, with temporal and spatial multi-resolution training."""

from .autodiff import Adam, AdamState, Tape, Tensor, adam_init, adam_step, backward
from .data import (CalendarRow, ColumnSpec, RegionMap, SeriesGrid, WindowSample,
                   aggregate_space, aggregate_time, extract_calendar_features,
                   kmeans_partition, load_grid_csv, make_windows,
                   synthesize_lagged_pair, upsample_hold)
from .model import (AblationWiring, ModelConfig, ModelParams, PredictionBundle,
                    forward_batch, load_checkpoint, model_forward,
                    save_checkpoint)
from .training import (EvalReport, TrainConfig, aggregate_predictions,
                       build_smr_training_set, evaluate_horizons,
                       export_results, train_single_resolution, train_tmr)

__version__ = "0.1.0"
