"""Autoencoder + two-layer LSTM baseline that reaches a horizon by rollout.

The autoencoder is a dense network on min-max normalised snapshots. The LSTM
steps the 2D latent one ``dt`` at a time, conditioned on the Reynolds number,
so the cost of a forecast grows linearly with the number of steps.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import ParameterStore, Tape, Tensor, backward, glorot_uniform, no_grad, ops
from .errors import ConfigurationError, DimensionError, StateError, UsageError
from .pde import BurgersConfig, snapshots
from .training import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AELSTMConfig:
    state_dim: int = 128
    encoder_widths: tuple[int, ...] = (512, 256, 128, 64, 32)
    latent_dim: int = 2
    lstm_hidden: int = 40
    lstm_layers: int = 2
    window: int = 40
    activation: str = "relu"
    re_scale: float = 2400.0
    ae_epochs: int = 500
    ae_alpha: float = 3e-4
    ae_batch: int = 32
    lstm_epochs: int = 2000
    lstm_alpha: float = 5e-5
    lstm_batch: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")
        if self.lstm_layers < 1 or self.lstm_hidden < 1 or self.latent_dim < 1 or self.state_dim < 1:
            raise ConfigurationError("layer sizes must be positive")
        if any(w < 1 for w in self.encoder_widths):
            raise ConfigurationError("encoder widths must be positive")
        for name in ("ae_epochs", "ae_batch", "lstm_epochs", "lstm_batch"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.ae_alpha <= 0 or self.lstm_alpha <= 0 or self.re_scale <= 0:
            raise ConfigurationError("rates and scales must be positive")
        if self.activation not in ("relu", "tanh", "sigmoid"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_widths))

    @property
    def lstm_input_dim(self) -> int:
        return self.latent_dim + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AELSTMConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown AE-LSTM config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class BaselineData:
    """Trajectories sampled every ``dt`` from t=0 for each Reynolds number."""

    re: np.ndarray  # (R,)
    states: np.ndarray  # (R, T, n)
    dt: float

    @property
    def flat(self) -> np.ndarray:
        return self.states.reshape(-1, self.states.shape[-1])


def re_grid(lo: float, hi: float, step: float) -> np.ndarray:
    return np.arange(lo, hi + 0.5 * step, step, dtype=np.float64)


BASELINE_PRESETS: dict[str, dict] = {
    # Table-6 rates and epochs, comparison Re grids.
    "full": dict(
        train_re=(600.0, 2225.0, 25.0),
        test_re=(550.0, 1025.0, 1500.0, 1975.0, 2450.0),
        n_snapshots=500,
        config=AELSTMConfig(),
    ),
    "desk": dict(
        train_re=(600.0, 2200.0, 100.0),
        test_re=(550.0, 1025.0, 1500.0, 1975.0, 2450.0),
        n_snapshots=500,
        config=AELSTMConfig(ae_epochs=100, lstm_epochs=300),
    ),
}


def baseline_preset(name: str) -> dict:
    if name not in BASELINE_PRESETS:
        raise ConfigurationError(f"unknown baseline preset {name!r}; choose from {sorted(BASELINE_PRESETS)}")
    return BASELINE_PRESETS[name]


def generate_trajectories(pde: BurgersConfig, re_values: Sequence[float], n_snapshots: int) -> BaselineData:
    re_values = np.asarray(re_values, dtype=np.float64).ravel()
    if n_snapshots < 2 or re_values.size == 0:
        raise ConfigurationError("need at least one Re value and two snapshots")
    times = np.arange(n_snapshots) * pde.dt
    rows = [snapshots(pde, times, np.full(n_snapshots, re)) for re in re_values]
    return BaselineData(re_values, np.stack(rows), pde.dt)


# ---------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class MinMax:
    lo: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "MinMax":
        data = np.asarray(data, dtype=np.float64)
        lo, hi = data.min(axis=0), data.max(axis=0)
        scale = hi - lo
        scale[scale == 0] = 1.0  # constant point
        return cls(lo, scale)

    def normalize(self, u):
        return (np.asarray(u, dtype=np.float64) - self.lo) / self.scale

    def denormalize(self, v):
        return np.asarray(v, dtype=np.float64) * self.scale + self.lo


# ---------------------------------------------------------------- model


class AELSTM:
    """Parameters live in one store under ``ae/``, ``lstm/`` and ``norm/``."""

    def __init__(self, config: AELSTMConfig | None = None, params: ParameterStore | None = None):
        self.config = config or AELSTMConfig()
        self.params = params if params is not None else self._init_params(np.random.default_rng(self.config.seed))

    # ---- construction
    def _init_params(self, rng: np.random.Generator) -> ParameterStore:
        c = self.config
        s = ParameterStore()

        def dense(name, p, q):
            s.add(f"{name}/w", glorot_uniform(rng, (p, q), p, q))
            s.add(f"{name}/b", np.zeros(q))

        widths = (c.state_dim, *c.encoder_widths, c.latent_dim)
        for i in range(len(widths) - 1):
            dense(f"ae/enc{i}", widths[i], widths[i + 1])
        widths = widths[::-1]
        for i in range(len(widths) - 1):
            dense(f"ae/dec{i}", widths[i], widths[i + 1])
        q = c.lstm_hidden
        for layer in range(c.lstm_layers):
            p = c.lstm_input_dim if layer == 0 else q
            s.add(f"lstm/l{layer}/w_ih", glorot_uniform(rng, (p, 4 * q), p, q))
            s.add(f"lstm/l{layer}/w_hh", glorot_uniform(rng, (q, 4 * q), q, q))
            b = np.zeros(4 * q)
            b[q : 2 * q] = 1.0  # forget-gate bias
            s.add(f"lstm/l{layer}/b", b)
        s.add("lstm/head/w", 0.01 * glorot_uniform(rng, (q, c.latent_dim), q, c.latent_dim))
        s.add("lstm/head/b", np.zeros(c.latent_dim))
        s.add("norm/lo", np.zeros(c.state_dim))
        s.add("norm/scale", np.ones(c.state_dim))
        s.add("norm/z_mean", np.zeros(c.latent_dim))
        s.add("norm/z_std", np.ones(c.latent_dim))
        return s

    @property
    def normalizer(self) -> MinMax:
        return MinMax(self.params["norm/lo"].data, self.params["norm/scale"].data)

    def _set_normalizer(self, mm: MinMax) -> None:
        self.params["norm/lo"].data[...] = mm.lo
        self.params["norm/scale"].data[...] = mm.scale

    # ---- autoencoder
    def _mlp(self, x, prefix: str, n: int):
        act = self.config.activation
        for i in range(n):
            x = ops.dense(x, self.params[f"{prefix}{i}/w"], self.params[f"{prefix}{i}/b"])
            if i < n - 1:
                x = ops.activation(x, act)
        return x

    def encode_normalized(self, v) -> Tensor:
        return self._mlp(ops.as_tensor(v), "ae/enc", len(self.config.encoder_widths) + 1)

    def decode_normalized(self, z) -> Tensor:
        return self._mlp(ops.as_tensor(z), "ae/dec", len(self.config.encoder_widths) + 1)

    def encode(self, u) -> np.ndarray:
        """Physical snapshots (B, n) -> latents (B, m)."""
        with no_grad():
            return self.encode_normalized(self.normalizer.normalize(np.atleast_2d(u))).data

    def decode(self, z) -> np.ndarray:
        with no_grad():
            return self.normalizer.denormalize(self.decode_normalized(np.atleast_2d(z)).data)

    def reconstruct(self, u) -> np.ndarray:
        return self.decode(self.encode(u))

    # ---- LSTM on standardised latents
    def _lstm_inputs(self, zs: np.ndarray, re) -> np.ndarray:
        """(B, T, m) standardised latents plus the Re feature -> (B, T, m+1)."""
        re = np.broadcast_to(np.asarray(re, dtype=np.float64).reshape(-1, 1, 1), (zs.shape[0], zs.shape[1], 1))
        return np.concatenate([zs, re / self.config.re_scale], axis=2)

    def _zero_state(self, batch: int):
        q = self.config.lstm_hidden
        return [(np.zeros((batch, q)), np.zeros((batch, q))) for _ in range(self.config.lstm_layers)]

    def _lstm_layers_seq(self, xs, state):
        """Run every layer over a whole sequence; returns top hidden states and final states."""
        new_state = []
        for layer, (h0, c0) in enumerate(state):
            p = f"lstm/l{layer}/"
            xs, h, c = ops.lstm_sequence(xs, h0, c0, self.params[p + "w_ih"], self.params[p + "w_hh"], self.params[p + "b"])
            new_state.append((h, c))
        return xs, new_state

    def _lstm_step(self, x, state):
        new_state = []
        for layer, (h, c) in enumerate(state):
            p = f"lstm/l{layer}/"
            h, c = ops.lstm_cell(x, h, c, self.params[p + "w_ih"], self.params[p + "w_hh"], self.params[p + "b"])
            new_state.append((h, c))
            x = h
        return x, new_state

    def _head(self, h):
        return ops.dense(h, self.params["lstm/head/w"], self.params["lstm/head/b"])

    def predict_next_sequence(self, zs: np.ndarray, re) -> Tensor:
        """Teacher-forced one-step predictions for every position of (B, T, m) standardised latents."""
        b, t, m = zs.shape
        hs, _ = self._lstm_layers_seq(self._lstm_inputs(zs, re), self._zero_state(b))
        delta = self._head(ops.reshape(hs, (b * t, self.config.lstm_hidden)))
        return ops.add(ops.reshape(delta, (b, t, m)), zs)

    def _standardize(self, z):
        return (z - self.params["norm/z_mean"].data) / self.params["norm/z_std"].data

    def _unstandardize(self, z):
        return z * self.params["norm/z_std"].data + self.params["norm/z_mean"].data

    def rollout_latents(self, z_window: np.ndarray, re, steps: int) -> np.ndarray:
        """Standardised latent window (B, W, m) -> the ``steps`` predicted latents (B, steps, m)."""
        if steps < 1:
            raise UsageError("steps must be >= 1")
        z_window = np.asarray(z_window, dtype=np.float64)
        b, w, m = z_window.shape
        if w != self.config.window:
            raise DimensionError(f"window length {w} != configured {self.config.window}")
        re = np.asarray(re, dtype=np.float64).reshape(-1)
        re_col = np.broadcast_to(re.reshape(-1, 1), (b, 1)) / self.config.re_scale
        state = self._zero_state(b)
        with no_grad():
            if w > 1:
                _, state = self._lstm_layers_seq(self._lstm_inputs(z_window[:, :-1], re), state)
            z = ops.as_tensor(z_window[:, -1])
            out = []
            for _ in range(steps):
                h, state = self._lstm_step(ops.concat([z, re_col], axis=1), state)
                z = ops.add(self._head(h), z)
                out.append(z.data)
        return np.stack(out, axis=1)

    def rollout_forecast(self, u_window, re, steps: int) -> np.ndarray:
        """Forecast ``steps`` time steps past the last snapshot of the window.

        ``u_window`` is (W, n) or (B, W, n); the result is (n,) or (B, n).
        """
        if not isinstance(steps, (int, np.integer)) or steps < 1:
            raise UsageError("steps must be a positive integer")
        u = np.asarray(u_window, dtype=np.float64)
        single = u.ndim == 2
        if single:
            u = u[None]
        if u.ndim != 3 or u.shape[2] != self.config.state_dim:
            raise DimensionError(f"window must be (W, {self.config.state_dim}) or (B, W, {self.config.state_dim})")
        if u.shape[1] != self.config.window:
            raise DimensionError(f"window length {u.shape[1]} != configured {self.config.window}")
        b, w, n = u.shape
        with no_grad():
            z = self.encode_normalized(self.normalizer.normalize(u.reshape(b * w, n))).data
        z_last = self.rollout_latents(self._standardize(z).reshape(b, w, -1), re, steps)[:, -1]
        with no_grad():
            v = self.decode_normalized(self._unstandardize(z_last)).data
        out = self.normalizer.denormalize(v)
        return out[0] if single else out

    # ---- persistence
    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.params.save(d / "params.fvps")
        (d / "baseline.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "AELSTM":
        d = Path(directory)
        if not (d / "params.fvps").exists() or not (d / "baseline.json").exists():
            raise StateError(f"no baseline checkpoint found in {d}")
        cfg = AELSTMConfig.from_dict(json.loads((d / "baseline.json").read_text()))
        model = cls(cfg)
        loaded = ParameterStore.load(d / "params.fvps")
        if list(loaded) != list(model.params):
            raise ConfigurationError("baseline parameter paths do not match the configuration")
        for k in loaded:
            if loaded[k].shape != model.params[k].shape:
                raise DimensionError(f"{k}: expected {model.params[k].shape}, got {loaded[k].shape}")
        model.params = loaded
        return model


# ---------------------------------------------------------------- training


@dataclass
class BaselineReport:
    ae_loss: list[float] = field(default_factory=list)
    lstm_loss: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _adam_loop(
    store: ParameterStore,
    n: int,
    batch: int,
    epochs: int,
    alpha: float,
    rng: np.random.Generator,
    loss_fn: Callable[[np.ndarray], Tensor],
    label: str,
) -> list[float]:
    state = AdamState()
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            store.zero_grad()
            with Tape() as tape:
                loss = loss_fn(idx)
            backward(tape, loss)
            adam_step(store, store.grads(), state, alpha)
            total += float(loss.data) * len(idx)
        history.append(total / n)
        log.debug("%s epoch %d loss %.6g", label, epoch + 1, history[-1])
    return history


def ae_train(model: AELSTM, snapshots_: np.ndarray, config: AELSTMConfig | None = None) -> list[float]:
    """Fit the normaliser and the autoencoder on (N, n) snapshots. Returns per-epoch mean loss."""
    cfg = config or model.config
    data = np.asarray(snapshots_, dtype=np.float64).reshape(-1, cfg.state_dim)
    mm = MinMax.fit(data)
    model._set_normalizer(mm)
    v = mm.normalize(data)
    store = model.params.subset("ae/")
    rng = np.random.default_rng([cfg.seed, 11])

    def loss_fn(idx):
        x = v[idx]
        return ops.mse(model.decode_normalized(model.encode_normalized(x)), x)

    return _adam_loop(store, len(v), cfg.ae_batch, cfg.ae_epochs, cfg.ae_alpha, rng, loss_fn, "ae")


def latent_windows(model: AELSTM, data: BaselineData) -> tuple[np.ndarray, np.ndarray]:
    """Encode trajectories, fit latent standardisation, cut (window+1)-long sequences.

    Returns ``(sequences (S, W+1, m), re (S,))``.
    """
    r, t, n = data.states.shape
    w = model.config.window
    if t < w + 1:
        raise ConfigurationError(f"trajectories need at least window+1 = {w + 1} snapshots")
    z = model.encode(data.flat).reshape(r, t, -1)
    mean = z.reshape(-1, z.shape[-1]).mean(axis=0)
    std = z.reshape(-1, z.shape[-1]).std(axis=0)
    std[std == 0] = 1.0
    model.params["norm/z_mean"].data[...] = mean
    model.params["norm/z_std"].data[...] = std
    zs = (z - mean) / std
    idx = np.arange(t - w)[:, None] + np.arange(w + 1)[None, :]
    seqs = zs[:, idx]  # (R, t-w, W+1, m)
    return seqs.reshape(-1, w + 1, zs.shape[-1]), np.repeat(data.re, t - w)


def lstm_train(model: AELSTM, sequences: np.ndarray, re: np.ndarray, config: AELSTMConfig | None = None) -> list[float]:
    """Teacher-forced next-step training on standardised latent sequences (S, W+1, m)."""
    cfg = config or model.config
    seqs = np.asarray(sequences, dtype=np.float64)
    re = np.asarray(re, dtype=np.float64)
    store = model.params.subset("lstm/")
    rng = np.random.default_rng([cfg.seed, 12])

    def loss_fn(idx):
        s = seqs[idx]
        return ops.mse(model.predict_next_sequence(s[:, :-1], re[idx]), s[:, 1:])

    return _adam_loop(store, len(seqs), cfg.lstm_batch, cfg.lstm_epochs, cfg.lstm_alpha, rng, loss_fn, "lstm")


def train_baseline(data: BaselineData, config: AELSTMConfig | None = None) -> tuple[AELSTM, BaselineReport]:
    """Train the autoencoder, then the LSTM on the frozen encoder's latents."""
    cfg = config or AELSTMConfig(state_dim=data.states.shape[-1])
    if cfg.state_dim != data.states.shape[-1]:
        cfg = replace(cfg, state_dim=data.states.shape[-1])
    t0 = time.perf_counter()
    model = AELSTM(cfg)
    report = BaselineReport()
    report.ae_loss = ae_train(model, data.flat, cfg)
    seqs, re = latent_windows(model, data)
    report.lstm_loss = lstm_train(model, seqs, re, cfg)
    report.seconds = time.perf_counter() - t0
    return model, report


# ---------------------------------------------------------------- analysis


def horizon_errors(model: AELSTM, data: BaselineData, horizon: int, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-step latent MSE of teacher-forced vs free-running prediction.

    Both start from the window ``[start, start+W)`` of every trajectory and
    predict steps ``1..horizon`` after it. Teacher forcing feeds the encoded
    ground truth at every step; free running feeds predictions back.
    """
    w = model.config.window
    r, t, n = data.states.shape
    if start + w + horizon > t:
        raise ConfigurationError("trajectories are too short for this horizon")
    z = model._standardize(model.encode(data.flat)).reshape(r, t, -1)
    truth = z[:, start + w : start + w + horizon]
    with no_grad():
        tf = model.predict_next_sequence(z[:, start : start + w + horizon - 1], data.re).data[:, w - 1 :]
    fr = model.rollout_latents(z[:, start : start + w], data.re, horizon)
    tf_err = ((tf - truth) ** 2).mean(axis=(0, 2))
    fr_err = ((fr - truth) ** 2).mean(axis=(0, 2))
    return tf_err, fr_err
