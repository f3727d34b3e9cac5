"""The cross-modality fusion forecaster.

Pipeline per sample: instance normalization of the target series (invertible),
token + positional embedding of both modalities, attention-based calendar
embedding, a stack of fusion layers (causal self-attention over the target
stream plus a causal attention whose queries/keys/values depend on the wiring
variant, then layer norm and a 1-d convolution with residual), and a linear
readout to the forecast horizon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ConfigError, WindowSample

REVIN_EPS = 1e-5


class AblationWiring(str, Enum):
    """Query/key/value sources of the second attention in each fusion layer.

    E1: self-attention only (second attention disabled).
    E2: second attention with Q, K, V all from the target stream.
    E3: Q, K from the target stream, V from the support stream.
    E4: Q, K from the calendar embedding, V from the support stream (full model).
    """

    E1 = "e1"
    E2 = "e2"
    E3 = "e3"
    E4 = "e4"

    @property
    def uses_support(self) -> bool:
        return self in (AblationWiring.E3, AblationWiring.E4)

    @property
    def has_second_attention(self) -> bool:
        return self is not AblationWiring.E1


@dataclass
class ModelConfig:
    input_len: int
    horizon: int
    interval_minutes: int
    d: int = 512
    heads: int = 8
    layers: int = 2
    wiring: AblationWiring = AblationWiring.E4
    use_te_self_attention: bool = True
    conv_kernel: int = 3
    conv_padding: str = "causal"   # causal keeps the stack leak-free
    readout: str = "last"          # last | flatten
    seed: int = 0

    def __post_init__(self):
        self.wiring = AblationWiring(self.wiring)
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.layers < 1 or self.input_len < 1 or self.horizon < 1:
            raise ConfigError("layers, input_len, and horizon must be >= 1")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv kernel must be odd, got {self.conv_kernel}")
        if self.conv_padding not in ("causal", "circular"):
            raise ConfigError(f"conv_padding must be causal|circular, "
                              f"got {self.conv_padding!r}")
        if self.readout not in ("last", "flatten"):
            raise ConfigError(f"readout must be last|flatten, got {self.readout!r}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def calendar_features(self):
        """(name, vocab) pairs; the minute token exists only when R < 60."""
        feats = [("month", 12), ("day", 31), ("hour", 24)]
        if self.interval_minutes < 60:
            feats.append(("minute", 60 // self.interval_minutes))
        feats += [("weekday", 7), ("holiday", 2)]
        return feats

    def to_dict(self):
        d = asdict(self)
        d["wiring"] = self.wiring.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ModelParams:
    """All learnable tensors, keyed by name, in a fixed creation order.

    Initialization is uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), deterministic
    under the config seed. Biases and norm offsets start at zero, gains at one.
    """

    def __init__(self, config: ModelConfig, values: dict | None = None):
        self.config = config
        self._p: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)

        def mat(name, shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            self._p[name] = Tensor(rng.uniform(-bound, bound, size=shape),
                                   requires_grad=True)

        def zeros(name, shape):
            self._p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            self._p[name] = Tensor(np.ones(shape), requires_grad=True)

        d, k = config.d, config.conv_kernel
        ones("revin_gamma", (1,))
        zeros("revin_beta", (1,))
        for stream in ("tm", "sm"):
            mat(f"{stream}_token_kernel", (k, 1, d), k)
            zeros(f"{stream}_token_bias", (d,))
        for name, vocab in config.calendar_features():
            mat(f"cal_{name}", (vocab, d), d)
        for proj in ("q", "k", "v", "o"):
            mat(f"te_w{proj}", (d, d), d)
            zeros(f"te_b{proj}", (d,))
        for c in range(config.layers):
            for module in ("self", "temp"):
                for proj in ("q", "k", "v", "o"):
                    mat(f"layer{c}_{module}_w{proj}", (d, d), d)
                    zeros(f"layer{c}_{module}_b{proj}", (d,))
            ones(f"layer{c}_ln_gamma", (d,))
            zeros(f"layer{c}_ln_beta", (d,))
            mat(f"layer{c}_conv_kernel", (k, d, d), k * d)
            zeros(f"layer{c}_conv_bias", (d,))
        readout_in = d if config.readout == "last" else config.input_len * d
        mat("readout_w", (readout_in, config.horizon), readout_in)
        zeros("readout_b", (config.horizon,))

        if values is not None:
            self.load_values(values)

    def __getitem__(self, name) -> Tensor:
        return self._p[name]

    def names(self):
        return list(self._p.keys())

    def items(self):
        return self._p.items()

    def tensors(self):
        return list(self._p.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self._p.values())

    def copy_values(self) -> dict:
        return {name: t.data.copy() for name, t in self._p.items()}

    def load_values(self, values: dict):
        unknown = set(values) - set(self._p)
        missing = set(self._p) - set(values)
        if unknown or missing:
            raise ConfigError(f"parameter set mismatch: unknown={sorted(unknown)}, "
                              f"missing={sorted(missing)}")
        for name, arr in values.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._p[name].shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} does not "
                                  f"match config shape {self._p[name].shape}")
            self._p[name].data = arr.copy()
            self._p[name].grad = None

    def zero_grad(self):
        for t in self._p.values():
            t.grad = None


@dataclass
class RevInState:
    """Per-window statistics recorded by normalization, needed to invert it."""

    mean: Tensor   # [B, 1]
    std: Tensor    # [B, 1]


@dataclass
class PredictionBundle:
    """Denormalized forecast plus the attention maps of one forward pass."""

    location_id: str
    start: object
    resolution_minutes: int
    tm_input: np.ndarray
    forecast: np.ndarray
    target: np.ndarray | None
    self_attention: list       # per layer: [heads, T, T]
    temporal_attention: list   # per layer: [heads, T, T]; empty for E1


# ---------------------------------------------------------------------------
# building blocks


def positional_encoding(t: int, d: int) -> np.ndarray:
    """Sinusoidal table: sin on even latent indices, cos on odd."""
    pos = np.arange(t)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def revin_normalize(window: Tensor, gamma: Tensor, beta: Tensor,
                    eps: float = REVIN_EPS):
    """Instance-normalize each row of window [B, T]; returns state for inversion."""
    mu = ad.mean_axis(window, axis=-1, keepdims=True)
    xc = ad.sub(window, mu)
    var = ad.mean_axis(ad.mul(xc, xc), axis=-1, keepdims=True)
    std = ad.sqrt(ad.add(var, Tensor(np.array(eps))))
    xn = ad.div(xc, std)
    out = ad.add(ad.mul(xn, gamma), beta)
    return out, RevInState(mean=mu, std=std)


def revin_denormalize(pred: Tensor, state: RevInState, gamma: Tensor,
                      beta: Tensor, eps: float = REVIN_EPS) -> Tensor:
    """Invert the affine, rescale by the recorded std, shift by the mean."""
    if state is None:
        raise ad.UsageError("revin_denormalize needs the state from normalization")
    xn = ad.div(ad.sub(pred, beta), gamma)
    return ad.add(ad.mul(xn, state.std), state.mean)


def instance_standardize(window: Tensor, eps: float = REVIN_EPS) -> Tensor:
    """Per-window standardization without affine or inverse (support stream)."""
    mu = ad.mean_axis(window, axis=-1, keepdims=True)
    xc = ad.sub(window, mu)
    var = ad.mean_axis(ad.mul(xc, xc), axis=-1, keepdims=True)
    std = ad.sqrt(ad.add(var, Tensor(np.array(eps))))
    return ad.div(xc, std)


def token_embed_with_position(series: Tensor, kernel: Tensor, bias: Tensor,
                              config: ModelConfig) -> Tensor:
    """[B, T] -> [B, T, d]: 1-channel conv to d channels plus sinusoidal PE."""
    b, t = series.shape
    x = ad.reshape(series, (b, t, 1))
    x = ad.conv1d_time(x, kernel, bias, padding=config.conv_padding)
    pe = Tensor(positional_encoding(t, config.d))
    return ad.add(x, pe)


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor,
                         params: ModelParams, prefix: str, heads: int,
                         causal: bool):
    """Projected multi-head attention over the second-to-last axis.

    Inputs are [..., T, d]; returns (output [..., T, d], maps [..., h, T, T]).
    """
    d = q_in.shape[-1]
    dk = d // heads
    q = ad.linear_affine(q_in, params[f"{prefix}_wq"], params[f"{prefix}_bq"])
    k = ad.linear_affine(k_in, params[f"{prefix}_wk"], params[f"{prefix}_bk"])
    v = ad.linear_affine(v_in, params[f"{prefix}_wv"], params[f"{prefix}_bv"])

    lead = q_in.shape[:-2]
    t = q_in.shape[-2]
    nd = len(lead) + 3

    def split(x, tx):
        x = ad.reshape(x, lead + (tx, heads, dk))
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return ad.transpose(x, perm)  # [..., h, T, dk]

    qh, kh, vh = split(q, t), split(k, k_in.shape[-2]), split(v, v_in.shape[-2])
    kt = ad.transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = ad.scale(ad.matmul(qh, kt), 1.0 / np.sqrt(dk))
    if causal:
        scores = ad.masked_fill_causal(scores)
    maps = ad.softmax_lastdim(scores)
    out = ad.matmul(maps, vh)  # [..., h, T, dk]
    perm_back = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    out = ad.transpose(out, perm_back)
    out = ad.reshape(out, lead + (t, d))
    out = ad.linear_affine(out, params[f"{prefix}_wo"], params[f"{prefix}_bo"])
    return out, maps


def temporal_feature_embedding(cal: dict, params: ModelParams,
                               config: ModelConfig) -> Tensor:
    """Calendar index arrays [B, T] per feature -> [B, T, d].

    Each feature becomes a d-dim token; one unmasked multi-head self-attention
    layer mixes the feature tokens, whose outputs are summed per timestep.
    With use_te_self_attention=False, the raw embeddings are summed instead.
    """
    tokens = []
    for name, vocab in config.calendar_features():
        if name not in cal:
            raise ConfigError(f"calendar arrays missing feature {name!r}")
        tokens.append(ad.embedding_gather(params[f"cal_{name}"], cal[name],
                                          feature=name))
    lt = ad.stack(tokens, axis=2)  # [B, T, F, d]
    if config.use_te_self_attention:
        mixed, _ = multi_head_attention(lt, lt, lt, params, "te",
                                        config.heads, causal=False)
    else:
        mixed = lt
    return ad.sum_axis(mixed, axis=2)


def masked_self_attention(e_in: Tensor, params: ModelParams, layer: int,
                          config: ModelConfig):
    """Causal multi-head self-attention over the target stream, plus residual."""
    out, maps = multi_head_attention(e_in, e_in, e_in, params,
                                     f"layer{layer}_self", config.heads,
                                     causal=True)
    return ad.add(out, e_in), maps


def masked_temporal_attention(e_t: Tensor, e_tm: Tensor, e_sm: Tensor | None,
                              params: ModelParams, layer: int,
                              config: ModelConfig):
    """Second causal attention; source streams depend on the wiring variant."""
    wiring = config.wiring
    if wiring is AblationWiring.E1:
        raise ad.UsageError("E1 wiring has no second attention")
    if wiring is AblationWiring.E2:
        q_in = k_in = v_in = e_tm
    elif wiring is AblationWiring.E3:
        q_in, k_in, v_in = e_tm, e_tm, e_sm
    else:
        q_in, k_in, v_in = e_t, e_t, e_sm
    if v_in is None:
        raise ConfigError(f"wiring {wiring.value} needs the support modality")
    return multi_head_attention(q_in, k_in, v_in, params,
                                f"layer{layer}_temp", config.heads, causal=True)


def fusion_layer_forward(e_tm: Tensor, e_sm: Tensor | None, e_t: Tensor,
                         params: ModelParams, layer: int, config: ModelConfig):
    """One fusion layer; returns (next target stream, self maps, temporal maps)."""
    self_out, self_maps = masked_self_attention(e_tm, params, layer, config)
    temp_maps = None
    if config.wiring.has_second_attention:
        temp_out, temp_maps = masked_temporal_attention(e_t, e_tm, e_sm, params,
                                                        layer, config)
        combined = ad.add(self_out, temp_out)
    else:
        combined = self_out
    x = ad.layer_norm(combined, params[f"layer{layer}_ln_gamma"],
                      params[f"layer{layer}_ln_beta"])
    x = ad.add(x, ad.conv1d_time(x, params[f"layer{layer}_conv_kernel"],
                                 params[f"layer{layer}_conv_bias"],
                                 padding=config.conv_padding))
    return x, self_maps, temp_maps


@dataclass
class ForwardResult:
    pred: Tensor               # [B, L], denormalized
    self_maps: list            # per layer, Tensor [B, h, T, T]
    temp_maps: list            # per layer, Tensor or None
    revin: RevInState


def forward_batch(params: ModelParams, config: ModelConfig, tm: np.ndarray,
                  sm: np.ndarray | None, cal: dict) -> ForwardResult:
    """Batched forward: tm/sm are [B, input_len] arrays, cal maps feature name
    to an integer [B, input_len] array. Returns denormalized predictions."""
    tm = np.asarray(tm, dtype=np.float64)
    if tm.ndim != 2 or tm.shape[1] != config.input_len:
        raise ad.ShapeError(f"tm batch must be [B, {config.input_len}], "
                            f"got {tm.shape}")
    gamma, beta = params["revin_gamma"], params["revin_beta"]
    tm_norm, state = revin_normalize(Tensor(tm), gamma, beta)
    e_tm = token_embed_with_position(tm_norm, params["tm_token_kernel"],
                                     params["tm_token_bias"], config)
    e_sm = None
    if config.wiring.uses_support:
        if sm is None:
            raise ConfigError(f"wiring {config.wiring.value} needs the support "
                              "modality, but no sm batch was given")
        sm = np.asarray(sm, dtype=np.float64)
        if sm.shape != tm.shape:
            raise ad.ShapeError(f"sm batch {sm.shape} must match tm {tm.shape}")
        sm_norm = instance_standardize(Tensor(sm))
        e_sm = token_embed_with_position(sm_norm, params["sm_token_kernel"],
                                         params["sm_token_bias"], config)
    e_t = temporal_feature_embedding(cal, params, config)

    self_maps, temp_maps = [], []
    for c in range(config.layers):
        e_tm, smap, tmap = fusion_layer_forward(e_tm, e_sm, e_t, params, c, config)
        self_maps.append(smap)
        temp_maps.append(tmap)

    if config.readout == "last":
        rep = ad.take_last_step(e_tm)                      # [B, d]
    else:
        rep = ad.reshape(e_tm, (tm.shape[0], config.input_len * config.d))
    pred_norm = ad.linear_affine(rep, params["readout_w"], params["readout_b"])
    pred = revin_denormalize(pred_norm, state, gamma, beta)
    return ForwardResult(pred=pred, self_maps=self_maps, temp_maps=temp_maps,
                         revin=state)


def calendar_arrays(samples: list, config: ModelConfig) -> dict:
    """Stack WindowSample calendars into integer index arrays per feature."""
    def row_indices(row):
        out = {"month": row.month - 1, "day": row.day - 1, "hour": row.hour,
               "weekday": row.weekday, "holiday": row.holiday}
        if config.interval_minutes < 60:
            if row.minute_index is None:
                raise ConfigError("calendar row lacks a minute index but "
                                  f"R={config.interval_minutes} < 60")
            out["minute"] = row.minute_index
        return out

    names = [name for name, _ in config.calendar_features()]
    cal = {name: np.empty((len(samples), config.input_len), dtype=np.int64)
           for name in names}
    for i, s in enumerate(samples):
        for j, row in enumerate(s.calendar):
            idx = row_indices(row)
            for name in names:
                cal[name][i, j] = idx[name]
    return cal


def batch_arrays(samples: list, config: ModelConfig):
    """(tm [B,T], sm [B,T], cal dict, target [B,L]) from WindowSamples."""
    for s in samples:
        if len(s.tm_input) != config.input_len or len(s.target) != config.horizon:
            raise ad.ShapeError(
                f"sample lengths ({len(s.tm_input)} in / {len(s.target)} out) do "
                f"not match config ({config.input_len} / {config.horizon})")
    tm = np.stack([s.tm_input for s in samples])
    sm = np.stack([s.sm_input for s in samples])
    target = np.stack([s.target for s in samples])
    return tm, sm, calendar_arrays(samples, config), target


def model_forward(sample: WindowSample, params: ModelParams,
                  config: ModelConfig) -> PredictionBundle:
    """Single-sample forward returning the denormalized forecast and maps."""
    tm, sm, cal, _ = batch_arrays([sample], config)
    res = forward_batch(params, config, tm,
                        sm if config.wiring.uses_support else None, cal)
    return PredictionBundle(
        location_id=sample.location_id,
        start=sample.start,
        resolution_minutes=sample.resolution_minutes,
        tm_input=sample.tm_input.copy(),
        forecast=res.pred.data[0].copy(),
        target=None if sample.target is None else sample.target.copy(),
        self_attention=[m.data[0].copy() for m in res.self_maps],
        temporal_attention=[m.data[0].copy() for m in res.temp_maps
                            if m is not None])


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, config: ModelConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": {name: {"shape": list(t.shape),
                          "values": t.data.reshape(-1).tolist()}
                   for name, t in params.items()},
    }
    path.write_text(json.dumps(payload))


def load_checkpoint(path):
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version "
                          f"{payload.get('version')!r}")
    config = ModelConfig.from_dict(payload["config"])
    values = {}
    for name, entry in payload["params"].items():
        values[name] = np.array(entry["values"]).reshape(entry["shape"])
    params = ModelParams(config, values=values)
    return params, config
