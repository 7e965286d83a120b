"""Encoder-decoder LSTM glucose forecaster with carb-focused additive attention.

The encoder reads ``n`` past APS states. The decoder starts from the
encoder's final state and, for each of the ``m`` future steps, attends over
all encoder hidden states (querying with its previous hidden state), feeds
``[projected state, context]`` through its LSTM, and maps the new hidden state
through two linear layers to a glucose value. During training the decoder's
glucose feature is the true value (teacher forcing); at inference it is the
model's own previous prediction.

Features per step are ``[bg, insulin_dose, iob, carbs]``, z-scored with the
training-set statistics stored in the model.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import netcore as nc
from .core import STEP_MINUTES, DataError, InvalidInputError, ModelError, Trace
from .simkit import IOB_TAU

N_FEATURES = 4
BOOST_DELAY_STEPS = 6  # 30 minutes
STEP_IOB_DECAY = math.exp(-STEP_MINUTES / IOB_TAU)
STEPS_PER_HOUR = 60 // STEP_MINUTES


class Attention(str, enum.Enum):
    FULL = "full"
    NO_CARB_FOCUS = "nofocus"
    NONE = "none"


@dataclass(frozen=True)
class ModelConfig:
    n_input_steps: int = 12
    m_horizon_steps: int = 12
    hidden: int = 64
    head_hidden: int = 32
    attention: Attention = Attention.FULL
    epochs: int = 10
    lr: float = 1e-3
    fine_tune_lr: float = 1e-5
    batch: int = 32
    seed: int = 0
    boost: float = 1.10
    clip_norm: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "attention", Attention(self.attention))
        if self.n_input_steps < 1 or self.m_horizon_steps < 1:
            raise InvalidInputError("n_input_steps and m_horizon_steps must be >= 1")
        if self.hidden < 1 or self.head_hidden < 1 or self.batch < 1 or self.epochs < 0:
            raise InvalidInputError("hidden, head_hidden and batch must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"] = self.attention.value
        return d

    @property
    def window_steps(self) -> int:
        return self.n_input_steps + self.m_horizon_steps


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PredictionWindow:
    t: int
    input_states: Trace
    predicted_bg: np.ndarray
    boost_mask: np.ndarray
    decoder_bg_inputs: Optional[np.ndarray] = None


# ------------------------------------------------------------------ windows


def boost_mask_from_carbs(carbs) -> np.ndarray:
    """True at every encoder index exactly 30 minutes after a nonzero-carb step in the same window."""
    carbs = np.asarray(carbs)
    mask = np.zeros(carbs.shape, dtype=bool)
    if carbs.shape[-1] > BOOST_DELAY_STEPS:
        mask[..., BOOST_DELAY_STEPS:] = carbs[..., :-BOOST_DELAY_STEPS] > 0
    return mask


def project_iob(iob0: float, doses) -> np.ndarray:
    out = np.empty(len(doses))
    cur = iob0
    for i, d in enumerate(doses):
        cur = cur * STEP_IOB_DECAY + d
        out[i] = cur
    return out


def _features(trace: Trace) -> np.ndarray:
    return np.stack([trace.bg, trace.insulin, trace.iob, trace.carbs], axis=-1)


def decoder_inputs(trace: Trace, t: int, m: int, extra_insulin=None) -> np.ndarray:
    """Raw decoder inputs for a forecast issued at step ``t``.

    Row 0 is the observed state at ``t``. Rows 1..m-1 are projected states for
    ``t+1..t+m-1``: announced carbs from the trace (zero past its end), the
    planned basal ``r_t`` (plus ``extra_insulin`` U per step if given), IOB
    rolled forward with the decay model, and the true glucose where it exists
    (used only for teacher forcing).
    """
    n_total = len(trace)
    out = np.zeros((m, N_FEATURES))
    out[0] = [trace.bg[t], trace.insulin[t], trace.iob[t], trace.carbs[t]]
    if m == 1:
        return out
    steps = np.arange(t + 1, t + m)
    inside = steps < n_total
    ins = np.full(m - 1, trace.basal[t] / STEPS_PER_HOUR)
    if extra_insulin is not None:
        ins = ins + np.asarray(extra_insulin, dtype=float)
    out[1:, 1] = ins
    out[1:, 2] = project_iob(trace.iob[t], ins)
    out[1:, 3][inside] = trace.carbs[steps[inside]]
    # placeholder for steps past the end; replaced autoregressively at inference
    out[1:, 0] = np.where(inside, trace.bg[np.minimum(steps, n_total - 1)], trace.bg[t])
    return out


@dataclass
class WindowSet:
    enc: np.ndarray  # (N, n, 4) raw
    dec: np.ndarray  # (N, m, 4) raw
    target: np.ndarray  # (N, m) raw CGM
    mask: np.ndarray  # (N, n) bool
    true_future: Optional[np.ndarray] = None  # (N, m) true glucose when available
    index: Optional[np.ndarray] = None  # (N, 2) [segment, t]

    def __len__(self):
        return len(self.enc)

    @property
    def observed(self) -> np.ndarray:
        return self.enc[:, :, 0]

    @classmethod
    def concat(cls, sets: Sequence["WindowSet"]) -> "WindowSet":
        tf = None
        if all(s.true_future is not None for s in sets):
            tf = np.concatenate([s.true_future for s in sets])
        return cls(
            np.concatenate([s.enc for s in sets]),
            np.concatenate([s.dec for s in sets]),
            np.concatenate([s.target for s in sets]),
            np.concatenate([s.mask for s in sets]),
            tf,
            np.concatenate([s.index for s in sets]),
        )


def build_windows(traces: Sequence[Trace], n: int, m: int) -> WindowSet:
    """Stride-1 windows of ``n`` inputs and ``m`` targets, never crossing a segment boundary."""
    enc, dec, tgt, mask, tf, idx = [], [], [], [], [], []
    have_true = all(tr.true_bg is not None for tr in traces)
    for s_i, tr in enumerate(traces):
        L = len(tr)
        if L < n + m:
            continue
        feats = _features(tr)
        ts = np.arange(n - 1, L - m)
        enc.append(np.lib.stride_tricks.sliding_window_view(feats, n, axis=0).transpose(0, 2, 1)[: len(ts)].copy())
        tgt.append(np.lib.stride_tricks.sliding_window_view(tr.bg[n:], m)[: len(ts)].copy())
        if have_true:
            tf.append(np.lib.stride_tricks.sliding_window_view(tr.true_bg[n:], m)[: len(ts)].copy())
        d = np.empty((len(ts), m, N_FEATURES))
        for j, t in enumerate(ts):
            d[j] = decoder_inputs(tr, int(t), m)
        dec.append(d)
        mask.append(boost_mask_from_carbs(enc[-1][:, :, 3]))
        idx.append(np.stack([np.full(len(ts), s_i), ts], axis=1))
    if not enc:
        raise DataError(f"no segment is long enough for one {n + m}-step window")
    return WindowSet(
        np.concatenate(enc),
        np.concatenate(dec),
        np.concatenate(tgt),
        np.concatenate(mask),
        np.concatenate(tf) if have_true else None,
        np.concatenate(idx),
    )


# -------------------------------------------------------------------- model


class Forecaster:
    def __init__(self, config: ModelConfig = ModelConfig(), mean=None, std=None):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xF0CA]))
        H = config.hidden
        self.encoder = nc.LstmCellParams(N_FEATURES, H, rng, "encoder")
        dec_in = N_FEATURES + (H if self.uses_attention else 0)
        self.decoder = nc.LstmCellParams(dec_in, H, rng, "decoder")
        self.attention = nc.AttentionParams(H, H, rng, "attention") if self.uses_attention else None
        self.head1 = nc.Linear(H, config.head_hidden, rng, "head1")
        self.head2 = nc.Linear(config.head_hidden, 1, rng, "head2")
        self.mean = np.zeros(N_FEATURES) if mean is None else np.asarray(mean, dtype=float)
        self.std = np.ones(N_FEATURES) if std is None else np.asarray(std, dtype=float)
        self.loss_curve: List[float] = []
        self.history: List[dict] = []

    @property
    def uses_attention(self) -> bool:
        return self.config.attention is not Attention.NONE

    @property
    def uses_carb_focus(self) -> bool:
        return self.config.attention is Attention.FULL

    def parameters(self) -> Dict[str, nc.Tensor]:
        ps = self.encoder.parameters() + self.decoder.parameters()
        if self.attention is not None:
            ps += self.attention.parameters()
        ps += self.head1.parameters() + self.head2.parameters()
        return {p.name: p for p in ps}

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    # -- standardization
    def fit_scaler(self, windows: WindowSet):
        feats = windows.enc.reshape(-1, N_FEATURES)
        self.mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        self.std = np.where(std > 1e-8, std, 1.0)

    def _scale(self, x):
        return (x - self.mean) / self.std

    def _unscale_bg(self, y):
        return y * self.std[0] + self.mean[0]

    # -- forward
    def forward(self, enc_x, dec_x, mask, teacher_forcing: bool = True, return_bg_inputs: bool = False):
        """Predict standardized glucose for ``m`` steps.

        ``enc_x`` is ``(B, n, 4)``, ``dec_x`` ``(B, m, 4)``, both standardized;
        ``mask`` is the boolean ``(B, n)`` carb-focus mask.
        """
        cfg = self.config
        B, n, _ = enc_x.shape
        m = dec_x.shape[1]
        if n != cfg.n_input_steps or m != cfg.m_horizon_steps:
            raise InvalidInputError(
                f"model expects {cfg.n_input_steps} inputs / {cfg.m_horizon_steps} outputs, got {n} / {m}"
            )
        H = cfg.hidden
        h = nc.Tensor(np.zeros((B, H)))
        z = nc.Tensor(np.zeros((B, H)))
        hs = []
        for j in range(n):
            h, z = nc.lstm_step(self.encoder, enc_x[:, j, :], h, z)
            hs.append(h)
        h_enc = keys_proj = None
        if self.uses_attention:
            h_enc = nc.stack(hs, axis=1)
            keys_proj = nc.matmul(h_enc, self.attention.W_k)
        focus = mask if self.uses_carb_focus else None

        preds = []
        bg_inputs = []
        prev = None
        for k in range(m):
            x = dec_x[:, k, :]
            if k > 0 and not teacher_forcing:
                x = nc.concat([prev, nc.Tensor(x[:, 1:])], axis=-1)
            else:
                x = nc.Tensor(x)
            if return_bg_inputs:
                bg_inputs.append(x.data[:, 0].copy())
            if self.uses_attention:
                ctx, _ = nc.additive_attention(self.attention, h, h_enc, focus, cfg.boost, keys_proj)
                x = nc.concat([x, ctx], axis=-1)
            h, z = nc.lstm_step(self.decoder, x, h, z)
            y = nc.linear(self.head2, nc.linear(self.head1, h))
            preds.append(y)
            prev = y
        out = nc.concat(preds, axis=-1)
        if return_bg_inputs:
            return out, np.stack(bg_inputs, axis=1)
        return out

    def predict_windows(self, windows: WindowSet, chunk: int = 1024) -> np.ndarray:
        """Autoregressive forecasts in mg/dL, shape ``(N, m)``."""
        outs = []
        with nc.no_grad():
            for a in range(0, len(windows), chunk):
                sl = slice(a, a + chunk)
                y = self.forward(
                    self._scale(windows.enc[sl]), self._scale(windows.dec[sl]), windows.mask[sl], teacher_forcing=False
                )
                outs.append(self._unscale_bg(y.data))
        res = np.concatenate(outs) if outs else np.zeros((0, self.config.m_horizon_steps))
        if not np.all(np.isfinite(res)):
            raise ModelError("model diverged: non-finite prediction")
        return res

    # -- persistence
    def arrays(self) -> Dict[str, np.ndarray]:
        d = {name: p.data for name, p in self.parameters().items()}
        d["scaler.mean"] = self.mean
        d["scaler.std"] = self.std
        return d

    def save(self, stem, extra_meta: Optional[dict] = None):
        meta = {
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config.to_dict()),
            "seed": self.config.seed,
            "training": {
                "lr": self.config.lr,
                "fine_tune_lr": self.config.fine_tune_lr,
                "batch": self.config.batch,
                "history": self.history,
                "loss_curve": self.loss_curve,
            },
        }
        if extra_meta:
            meta.update(extra_meta)
        return nc.save_checkpoint(stem, self.arrays(), meta)

    @classmethod
    def load(cls, stem, expect: Optional[ModelConfig] = None) -> "Forecaster":
        arrays, manifest = nc.load_checkpoint(stem)
        cfg = ModelConfig(**manifest["config"])
        if expect is not None:
            a, b = cfg.to_dict(), expect.to_dict()
            for key in ("n_input_steps", "m_horizon_steps", "hidden", "head_hidden", "attention"):
                if a[key] != b[key]:
                    raise ModelError(f"checkpoint {key}={a[key]!r} does not match requested {b[key]!r}")
        model = cls(cfg, arrays["scaler.mean"], arrays["scaler.std"])
        params = model.parameters()
        for name, p in params.items():
            if name not in arrays:
                raise ModelError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != p.shape:
                raise ModelError(f"checkpoint parameter {name} has shape {arrays[name].shape}, model {p.shape}")
            p.data = arrays[name].copy()
        model.loss_curve = list(manifest["training"].get("loss_curve", []))
        model.history = list(manifest["training"].get("history", []))
        return model

    def copy(self) -> "Forecaster":
        other = Forecaster(self.config, self.mean.copy(), self.std.copy())
        src = self.parameters()
        for name, p in other.parameters().items():
            p.data = src[name].data.copy()
        other.loss_curve = list(self.loss_curve)
        other.history = [dict(h) for h in self.history]
        return other


# ------------------------------------------------------------------ training


def _fit(model: Forecaster, windows: WindowSet, epochs: int, lr: float, seed_tag: int) -> List[float]:
    cfg = model.config
    if len(windows) == 0:
        raise DataError("no training windows")
    params = model.parameters()
    state = nc.AdamState(lr=lr)
    enc = model._scale(windows.enc)
    dec = model._scale(windows.dec)
    tgt = (windows.target - model.mean[0]) / model.std[0]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed_tag, len(model.history)]))
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(windows))
        total = 0.0
        for a in range(0, len(order), cfg.batch):
            b = order[a : a + cfg.batch]
            for p in params.values():
                p.zero_grad()
            pred = model.forward(enc[b], dec[b], windows.mask[b], teacher_forcing=True)
            loss = nc.mse(pred, tgt[b])
            loss.backward()
            total += float(loss.data) * len(b)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            nc.clip_grad_norm(grads, cfg.clip_norm)
            nc.adam_step(state, params, grads)
        curve.append(total / len(order))
    return curve


def train(traces: Sequence[Trace], config: ModelConfig = ModelConfig(), model: Optional[Forecaster] = None):
    """Fit a fresh model (scaler from the training windows) with teacher forcing and MSE.

    Returns ``(model, loss_curve)`` with one mean standardized MSE per epoch.
    """
    windows = build_windows(traces, config.n_input_steps, config.m_horizon_steps)
    if model is None:
        model = Forecaster(config)
        model.fit_scaler(windows)
    curve = _fit(model, windows, config.epochs, config.lr, 1)
    model.loss_curve.extend(curve)
    model.history.append({"stage": "train", "epochs": config.epochs, "lr": config.lr, "windows": len(windows)})
    return model, curve


def fine_tune(pretrained: Forecaster, traces: Sequence[Trace], epochs: int, lr: Optional[float] = None) -> Forecaster:
    """Continue training a copy of ``pretrained`` on new data at the fine-tune learning rate.

    The pretrained scaler is kept so the new data is seen in the same feature space.
    """
    if epochs < 0:
        raise InvalidInputError("epochs must be >= 0")
    model = pretrained.copy()
    lr = model.config.fine_tune_lr if lr is None else lr
    if lr != model.config.fine_tune_lr:
        model.config = replace(model.config, fine_tune_lr=lr)
    if epochs == 0:
        return model
    cfg = model.config
    windows = build_windows(traces, cfg.n_input_steps, cfg.m_horizon_steps)
    curve = _fit(model, windows, epochs, lr, 2)
    model.loss_curve.extend(curve)
    model.history.append({"stage": "fine_tune", "epochs": epochs, "lr": lr, "windows": len(windows)})
    return model


def predict_horizon(model: Forecaster, trace: Trace, t: int, extra_insulin=None) -> PredictionWindow:
    """Forecast the ``m`` steps after ``t`` from the ``n`` states ending at ``t``."""
    cfg = model.config
    n, m = cfg.n_input_steps, cfg.m_horizon_steps
    if t < n - 1:
        raise DataError(f"step {t} has only {t + 1} states of history, {n} needed")
    if t >= len(trace):
        raise DataError(f"step {t} is past the end of the trace ({len(trace)} steps)")
    window = trace.slice(t - n + 1, t + 1)
    enc = _features(window)[None]
    dec = decoder_inputs(trace, t, m, extra_insulin)[None]
    mask = boost_mask_from_carbs(window.carbs)
    with nc.no_grad():
        y, bg_in = model.forward(model._scale(enc), model._scale(dec), mask[None], teacher_forcing=False, return_bg_inputs=True)
    pred = model._unscale_bg(y.data[0])
    if not np.all(np.isfinite(pred)):
        raise ModelError("model diverged: non-finite prediction")
    return PredictionWindow(t, window, pred, mask, model._unscale_bg(bg_in[0]))


def write_loss_curve(curve: Sequence[float], path, header_comment: Optional[str] = None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        fh.write("epoch,mean_mse\n")
        for i, v in enumerate(curve, start=1):
            fh.write(f"{i},{v:.10g}\n")
