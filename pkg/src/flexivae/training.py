"""Mini-batch training with Adam, zone evaluation and the data-scaling study."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import ParameterStore, Tape, backward
from .errors import ConfigurationError, TrainingDivergedError
from .model import EncoderDecoderConfig, FlexiVAE, PropagatorConfig, default_arch, loss_total
from .pde import (
    AdvDiffConfig,
    BurgersConfig,
    DatasetSplit,
    PDEConfig,
    TupleRecord,
    ZONES,
    build_dataset,
    config_from_dict,
    snapshots,
    split_dataset,
    stack_records,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: ParameterStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    alpha: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for key, t in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(t.data)
            state.v[key] = np.zeros_like(t.data)
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data -= alpha * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------- config and report


@dataclass(frozen=True)
class TrainingConfig:
    alpha: float = 7e-4
    batch_size: int = 64
    epochs: int = 30
    beta: float = 1.2e-5
    eta: float = 1.70
    seed: int = 0
    propagator: str = "dcp"
    latent_dim: int | None = None
    embedding_dim: int = 64
    activation: str = "relu"
    dataset: str | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if self.beta < 0 or self.eta < 0:
            raise ConfigurationError("beta and eta must be non-negative")
        if self.propagator.lower() not in ("dcp", "pep"):
            raise ConfigurationError(f"unknown propagator {self.propagator!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    steps: int = 0
    zone_mse: dict[str, float | None] = field(default_factory=dict)

    def losses(self, key: str = "L") -> np.ndarray:
        return np.array([e[key] for e in self.epochs])

    def write_csv(self, path: str | Path) -> None:
        cols = ["epoch", "L", "L_RE", "L_PRE", "L_KL", "seconds"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for e in self.epochs:
                w.writerow({c: e[c] for c in cols})

    def summary(self) -> dict:
        return {
            "epochs": len(self.epochs),
            "steps": self.steps,
            "first_L": self.epochs[0]["L"] if self.epochs else None,
            "final_L": self.epochs[-1]["L"] if self.epochs else None,
            "zone_mse": self.zone_mse,
        }


def model_for(pde: PDEConfig, config: TrainingConfig) -> FlexiVAE:
    """Freshly initialised model sized for ``pde`` with normalisation from its ranges."""
    arch = default_arch(pde.state_shape, config.latent_dim, activation=config.activation)
    prop = PropagatorConfig(
        kind=config.propagator,
        embedding_dim=config.embedding_dim,
        zeta_scale=float(pde.re_range[1]),
        tau_scale=float(pde.tau_steps_range[1] * pde.dt),
    )
    return FlexiVAE(arch, prop, seed=config.seed)


def _finite_store(params: ParameterStore) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in params.values())


def train(
    dataset: DatasetSplit | Sequence[TupleRecord],
    config: TrainingConfig,
    pde: PDEConfig | None = None,
    model: FlexiVAE | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[FlexiVAE, TrainReport]:
    """Fit encoder, decoder and propagator jointly on the training records.

    Each epoch visits a fresh seeded permutation in mini-batches (the last
    partial batch is kept). A non-finite loss aborts with
    :class:`TrainingDivergedError` carrying the offending batch.
    """
    records = dataset.train if isinstance(dataset, DatasetSplit) else list(dataset)
    if not records:
        raise ConfigurationError("training set is empty")
    if pde is None and isinstance(dataset, DatasetSplit):
        pde = dataset.config
    if model is None:
        if pde is None:
            raise ConfigurationError("need a PDE config (or a model) to size the network")
        model = model_for(pde, config)
    cols = stack_records(records)
    n = len(records)
    order_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])
    state = AdamState()
    report = TrainReport()
    params = model.params
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(4)
        perm = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = {k: v[idx] for k, v in cols.items()}
            params.zero_grad()
            with Tape() as tape:
                terms = loss_total(batch, model, config.beta, config.eta, noise_rng)
            values = np.array([float(t.data) for t in terms])
            if not np.all(np.isfinite(values)):
                snap = {
                    "epoch": epoch,
                    "step": report.steps,
                    "keys": [records[i].key for i in idx],
                    "loss_terms": values.tolist(),
                    "batch": batch,
                }
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {report.steps}", snap)
            backward(tape, terms.total)
            adam_step(params, params.grads(), state, config.alpha)
            report.steps += 1
            sums += values * len(idx)
        if not _finite_store(params):
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch}", {"epoch": epoch})
        means = sums / n
        row = {
            "epoch": epoch,
            "L": means[0],
            "L_RE": means[1],
            "L_PRE": means[2],
            "L_KL": means[3],
            "seconds": time.perf_counter() - t0,
        }
        report.epochs.append(row)
        log.info("epoch %d L=%.5g RE=%.5g PRE=%.5g KL=%.4g (%.1fs)", epoch, *means, row["seconds"])
        if progress is not None:
            progress(row)
    return model, report


# ---------------------------------------------------------------- evaluation


@dataclass
class ZoneResult:
    mse: np.ndarray
    power: np.ndarray
    zeta: np.ndarray
    tplus: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mse.size)

    @property
    def mean(self) -> float:
        return float(np.mean(self.mse))

    def mean_where(self, min_power: float) -> float | None:
        keep = self.power > min_power
        return float(np.mean(self.mse[keep])) if np.any(keep) else None


@dataclass
class EvaluationSample:
    u_now: np.ndarray
    u_future: np.ndarray
    t: np.ndarray
    tau: np.ndarray
    zeta: np.ndarray
    zone: np.ndarray


def sample_evaluation_records(split: DatasetSplit, n_samples: int, seed: int, pde: PDEConfig | None = None):
    """Fresh (zeta, t, tau) draws over the full configured ranges, labelled by zone.

    Exact states come from the closed forms, so no stored data is reused.
    """
    pde = pde or split.config
    if pde is None:
        raise ConfigurationError("evaluation needs the PDE config")
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    rng = np.random.default_rng([seed, 7])
    zeta = rng.uniform(*pde.re_range, size=n_samples)
    t = rng.uniform(*pde.t0_range, size=n_samples)
    steps = rng.integers(pde.tau_steps_range[0], pde.tau_steps_range[1] + 1, size=n_samples)
    tau = steps * pde.dt
    u_now = snapshots(pde, t, zeta)
    u_future = snapshots(pde, t + tau, zeta)
    zone = split.box.classify(zeta, t + tau)
    return EvaluationSample(u_now, u_future, t, tau, zeta[:, None], zone)


def evaluate_zones(
    model,
    split: DatasetSplit,
    n_samples: int = 30_000,
    seed: int = 0,
    pde: PDEConfig | None = None,
    chunk: int = 512,
) -> dict[str, ZoneResult | None]:
    """Per-record forecast MSE (``||forecast - exact||^2 / n``) in each zone.

    ``model`` needs only ``forecast(u_now, tau, zeta)`` on batches. Zones
    without samples map to None.
    """
    s = sample_evaluation_records(split, n_samples, seed, pde)
    preds = np.concatenate(
        [model.forecast(s.u_now[i : i + chunk], s.tau[i : i + chunk], s.zeta[i : i + chunk]) for i in range(0, n_samples, chunk)]
    )
    axes = tuple(range(1, preds.ndim))
    mse = np.mean((preds - s.u_future) ** 2, axis=axes)
    power = np.mean(s.u_future**2, axis=axes)
    out: dict[str, ZoneResult | None] = {}
    for z in ZONES:
        keep = s.zone == z
        out[z] = (
            ZoneResult(mse[keep], power[keep], s.zeta[keep, 0], (s.t + s.tau)[keep]) if np.any(keep) else None
        )
    return out


def zone_means(results: dict[str, ZoneResult | None]) -> dict[str, float | None]:
    return {z: (r.mean if r is not None else None) for z, r in results.items()}


def mse_heatmap(results: dict[str, ZoneResult | None], bins: int = 20, pde: PDEConfig | None = None):
    """Binned mean MSE over (zeta, t + tau); empty bins are NaN."""
    parts = [r for r in results.values() if r is not None]
    zeta = np.concatenate([r.zeta for r in parts])
    tplus = np.concatenate([r.tplus for r in parts])
    mse = np.concatenate([r.mse for r in parts])
    ze = np.linspace(zeta.min(), zeta.max(), bins + 1)
    te = np.linspace(tplus.min(), tplus.max(), bins + 1)
    total, _, _ = np.histogram2d(zeta, tplus, bins=(ze, te), weights=mse)
    count, _, _ = np.histogram2d(zeta, tplus, bins=(ze, te))
    with np.errstate(invalid="ignore"):
        grid = total / count
    return ze, te, grid


def write_heatmap_csv(path: str | Path, results: dict[str, ZoneResult | None], bins: int = 20) -> None:
    ze, te, grid = mse_heatmap(results, bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zeta_lo", "zeta_hi", "tplus_lo", "tplus_hi", "mse"])
        for i in range(bins):
            for j in range(bins):
                w.writerow([ze[i], ze[i + 1], te[j], te[j + 1], grid[i, j]])


# ---------------------------------------------------------------- presets


@dataclass(frozen=True)
class Preset:
    name: str
    pde: PDEConfig
    train: TrainingConfig
    size: int

    def dataset_shape(self) -> tuple[int, int, int]:
        return dataset_shape(self.size)


def dataset_shape(size: int) -> tuple[int, int, int]:
    """(K, J, I) for a dataset of ``size`` tuples: 10 initial times x 10 horizons per parameter."""
    if size < 1:
        raise ConfigurationError("dataset size must be >= 1")
    if size % 100 == 0:
        return size // 100, 10, 10
    return size, 1, 1


PRESETS: dict[str, Preset] = {
    "burgers-dcp": Preset(
        "burgers-dcp", BurgersConfig(), TrainingConfig(7e-4, 64, 100, 1.2e-5, 1.70, propagator="dcp", latent_dim=2), 80_000
    ),
    "burgers-pep": Preset(
        "burgers-pep", BurgersConfig(), TrainingConfig(8e-4, 256, 150, 4e-5, 0.60, propagator="pep", latent_dim=2), 20_000
    ),
    "advdiff-dcp": Preset(
        "advdiff-dcp",
        AdvDiffConfig(),
        TrainingConfig(7e-4, 64, 75, 1.152e-5, 1.15, propagator="dcp", latent_dim=3),
        80_000,
    ),
    "burgers-dcp-desk": Preset(
        "burgers-dcp-desk", BurgersConfig(), TrainingConfig(7e-4, 64, 30, 1.2e-5, 1.70, propagator="dcp", latent_dim=2), 10_000
    ),
    "burgers-pep-desk": Preset(
        "burgers-pep-desk", BurgersConfig(), TrainingConfig(8e-4, 256, 30, 4e-5, 0.60, propagator="pep", latent_dim=2), 10_000
    ),
    "advdiff-dcp-desk": Preset(
        "advdiff-dcp-desk",
        AdvDiffConfig(grid=(32, 32)),
        TrainingConfig(7e-4, 32, 20, 1.152e-5, 1.15, propagator="dcp", latent_dim=3),
        5_000,
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------- scaling study


@dataclass
class ScalingResult:
    sizes: list[int]
    mse: list[float]
    slope: float
    intercept: float


def fit_loglog(sizes: Sequence[float], mse: Sequence[float]) -> tuple[float, float]:
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(mse, dtype=np.float64))
    if len(x) < 2 or np.ptp(x) == 0:
        raise ConfigurationError("log-log fit needs at least two distinct sizes")
    if not np.all(np.isfinite(y)):
        raise ConfigurationError("log-log fit needs positive finite MSE values")
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def scaling_fit_default(preset: Preset, seed: int = 0, n_eval: int = 2000) -> Callable[[int], float]:
    """Build, split, train and score right extrapolation for a given dataset size."""

    def fit(size: int) -> float:
        K, J, I = dataset_shape(size)
        records = build_dataset(preset.pde, K, J, I, seed)
        split = split_dataset(records, 0.7, seed, config=preset.pde)
        model, _ = train(split, replace(preset.train, seed=seed), preset.pde)
        res = evaluate_zones(model, split, n_eval, seed + 1)
        if res["right"] is None:
            raise ConfigurationError("right-extrapolation zone is empty")
        return res["right"].mean

    return fit


def data_scaling_study(
    sizes: Sequence[int],
    preset: Preset | str = "burgers-dcp-desk",
    fit: Callable[[int], float] | None = None,
    seed: int = 0,
) -> ScalingResult:
    """MSE against dataset size and the least-squares slope of log MSE on log size."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ConfigurationError("need at least two sizes")
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        raise ConfigurationError("sizes must be ascending")
    if len(set(sizes)) < 2:
        raise ConfigurationError("sizes are identical; slope undefined")
    if isinstance(preset, str):
        preset = get_preset(preset)
    fit = fit or scaling_fit_default(preset, seed)
    mse = []
    for s in sizes:
        value = float(fit(s))
        log.info("scaling: size=%d mse=%.4g", s, value)
        mse.append(value)
    slope, intercept = fit_loglog(sizes, mse)
    return ScalingResult(sizes, mse, slope, intercept)


def load_training_config(path: str | Path) -> TrainingConfig:
    return TrainingConfig.from_dict(json.loads(Path(path).read_text()))
