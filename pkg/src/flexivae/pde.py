"""Closed-form PDE solutions, tuple datasets and zone splits.

Two benchmark problems are supported: the 1D viscous Burgers equation on
[0, L] and 2D advection-diffusion of a point source on [-2, 2]^2. Both are
parametrised by a Reynolds number ``Re = 1/nu``.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DomainError

BURGERS_FORMS = ("cole_hopf", "printed")


@dataclass(frozen=True)
class BurgersConfig:
    n: int = 128
    length: float = 1.0
    dt: float = 0.004
    re_range: tuple[float, float] = (400.0, 2400.0)
    tau_steps_range: tuple[int, int] = (150, 450)
    t0_range: tuple[float, float] = (0.0, 2.0)
    # "printed" drops the (t+1) factor on the exponential term, which does not
    # satisfy the PDE; kept only for comparison.
    form: str = "cole_hopf"

    kind = "burgers"

    def __post_init__(self):
        object.__setattr__(self, "re_range", tuple(float(v) for v in self.re_range))
        object.__setattr__(self, "tau_steps_range", tuple(int(v) for v in self.tau_steps_range))
        object.__setattr__(self, "t0_range", tuple(float(v) for v in self.t0_range))
        if self.n < 2:
            raise ConfigurationError("Burgers grid needs n >= 2")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not self.re_range[0] < self.re_range[1]:
            raise ConfigurationError(f"re_range must be increasing, got {self.re_range}")
        if self.re_range[0] <= 0:
            raise ConfigurationError("Reynolds numbers must be positive")
        if self.tau_steps_range[0] > self.tau_steps_range[1] or self.tau_steps_range[0] < 1:
            raise ConfigurationError(f"bad tau_steps_range {self.tau_steps_range}")
        if self.t0_range[0] > self.t0_range[1] or self.t0_range[0] < 0:
            raise ConfigurationError(f"bad t0_range {self.t0_range}")
        if self.form not in BURGERS_FORMS:
            raise ConfigurationError(f"form must be one of {BURGERS_FORMS}")

    @property
    def state_shape(self) -> tuple[int, ...]:
        return (self.n,)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n)

    @property
    def dx(self) -> float:
        return self.length / (self.n - 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class AdvDiffConfig:
    grid: tuple[int, int] = (128, 128)
    domain: tuple[float, float] = (-2.0, 2.0)
    dt: float = 0.004
    c: float = 1.0
    re_range: tuple[float, float] = (1.0, 10.0)
    tau_steps_range: tuple[int, int] = (150, 425)
    # keeps the advected peak c*(t+tau) inside the domain
    t0_range: tuple[float, float] = (0.1, 0.3)

    kind = "advdiff"

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))
        object.__setattr__(self, "re_range", tuple(float(v) for v in self.re_range))
        object.__setattr__(self, "tau_steps_range", tuple(int(v) for v in self.tau_steps_range))
        object.__setattr__(self, "t0_range", tuple(float(v) for v in self.t0_range))
        if min(self.grid) < 2:
            raise ConfigurationError("advection-diffusion grid dims must be >= 2")
        if not math.isfinite(self.c):
            raise ConfigurationError("advection speed must be finite")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.re_range[0] < 1e-6 or not self.re_range[0] < self.re_range[1]:
            raise ConfigurationError(f"bad re_range {self.re_range}")
        if self.tau_steps_range[0] > self.tau_steps_range[1] or self.tau_steps_range[0] < 1:
            raise ConfigurationError(f"bad tau_steps_range {self.tau_steps_range}")
        if self.t0_range[0] <= 0 or self.t0_range[0] > self.t0_range[1]:
            raise ConfigurationError("advection-diffusion initial times must be positive")

    @property
    def state_shape(self) -> tuple[int, ...]:
        return self.grid

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.domain[0], self.domain[1], self.grid[1])

    @property
    def y(self) -> np.ndarray:
        return np.linspace(self.domain[0], self.domain[1], self.grid[0])

    @property
    def dx(self) -> float:
        return (self.domain[1] - self.domain[0]) / (self.grid[1] - 1)

    @property
    def dy(self) -> float:
        return (self.domain[1] - self.domain[0]) / (self.grid[0] - 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


PDEConfig = BurgersConfig | AdvDiffConfig


def config_from_dict(d: dict) -> PDEConfig:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "burgers":
        return BurgersConfig(**d)
    if kind == "advdiff":
        return AdvDiffConfig(**d)
    raise ConfigurationError(f"unknown PDE kind {kind!r}")


# ---------------------------------------------------------------- closed forms


def burgers_exact(x, t, re, form: str = "cole_hopf"):
    """Cole-Hopf solution of the viscous Burgers equation with Re = 1/nu.

    ``u = (x/(t+1)) / (1 + sqrt((t+1)/t0) exp(Re x^2 / (4(t+1))))`` with
    ``t0 = exp(Re/8)``. The square-root factor and the exponential are
    combined in log space and the exponent is clamped at 700, past which the
    solution is zero to double precision. ``form="printed"`` evaluates
    ``x / (t + 1 + sqrt((t+1)/t0) exp(...))`` instead.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    re = np.asarray(re, dtype=np.float64)
    if np.any(re <= 0):
        raise DomainError("Burgers solution needs Re > 0")
    if np.any(t < 0):
        raise DomainError("Burgers solution needs t >= 0")
    tp1 = t + 1.0
    arg = 0.5 * (np.log(tp1) - re / 8.0) + re * x * x / (4.0 * tp1)
    e = np.exp(np.minimum(arg, 700.0))
    if form == "cole_hopf":
        return (x / tp1) / (1.0 + e)
    if form == "printed":
        return x / (tp1 + e)
    raise ConfigurationError(f"form must be one of {BURGERS_FORMS}")


def advdiff_exact(x, y, t, re, c: float = 1.0):
    """Advected, diffusing Gaussian from a unit point source at the origin."""
    t = np.asarray(t, dtype=np.float64)
    re = np.asarray(re, dtype=np.float64)
    if np.any(t <= 0):
        raise DomainError("advection-diffusion solution needs t > 0 (Dirac initial state)")
    if np.any(re <= 0):
        raise DomainError("advection-diffusion solution needs Re > 0")
    nu = 1.0 / re
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r2 = (x - c * t) ** 2 + y * y
    return np.exp(-r2 / (4.0 * nu * t)) / (4.0 * np.pi * nu * t)


def snapshot(config: PDEConfig, t: float, zeta) -> np.ndarray:
    """Exact solution sampled on the configuration's uniform grid."""
    re = float(np.ravel(zeta)[0])
    if isinstance(config, BurgersConfig):
        return burgers_exact(config.x, t, re, config.form)
    xx, yy = np.meshgrid(config.x, config.y)
    return advdiff_exact(xx, yy, t, re, config.c)


def snapshots(config: PDEConfig, times: np.ndarray, zetas: np.ndarray) -> np.ndarray:
    """Vectorised :func:`snapshot` over paired arrays of times and parameters."""
    times = np.asarray(times, dtype=np.float64)
    zetas = np.asarray(zetas, dtype=np.float64).reshape(len(times))
    if isinstance(config, BurgersConfig):
        return burgers_exact(config.x[None, :], times[:, None], zetas[:, None], config.form)
    xx, yy = np.meshgrid(config.x, config.y)
    return advdiff_exact(xx[None], yy[None], times[:, None, None], zetas[:, None, None], config.c)


def pde_residual(states: np.ndarray, config: PDEConfig, zeta) -> float:
    """Max |residual| of the governing PDE on interior points.

    ``states`` holds at least three snapshots spaced ``config.dt`` apart. The
    time derivative is a central difference around each interior snapshot and
    space derivatives are second-order central differences.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.shape[0] < 3:
        raise ConfigurationError("pde_residual needs at least three consecutive snapshots")
    nu = 1.0 / float(np.ravel(zeta)[0])
    dt = config.dt
    ut = (states[2:] - states[:-2]) / (2.0 * dt)
    u = states[1:-1]
    if isinstance(config, BurgersConfig):
        dx = config.dx
        ux = (u[:, 2:] - u[:, :-2]) / (2.0 * dx)
        uxx = (u[:, 2:] - 2.0 * u[:, 1:-1] + u[:, :-2]) / dx**2
        res = ut[:, 1:-1] + u[:, 1:-1] * ux - nu * uxx
    else:
        dx, dy = config.dx, config.dy
        c = config.c
        core = u[:, 1:-1, 1:-1]
        ux = (u[:, 1:-1, 2:] - u[:, 1:-1, :-2]) / (2.0 * dx)
        uxx = (u[:, 1:-1, 2:] - 2.0 * core + u[:, 1:-1, :-2]) / dx**2
        uyy = (u[:, 2:, 1:-1] - 2.0 * core + u[:, :-2, 1:-1]) / dy**2
        res = ut[:, 1:-1, 1:-1] + c * ux - nu * (uxx + uyy)
    return float(np.max(np.abs(res))) if res.size else 0.0


# ---------------------------------------------------------------- tuple dataset


@dataclass
class TupleRecord:
    u_now: np.ndarray
    u_future: np.ndarray
    t: float
    tau: float
    tau_steps: int
    zeta: np.ndarray
    k: int
    j: int
    i: int

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.k, self.j, self.i)

    @property
    def t_future(self) -> float:
        return self.t + self.tau


def _stream(seed: int, *counter: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *counter])))


def build_dataset(config: PDEConfig, K: int, J: int, I: int, seed: int) -> list[TupleRecord]:
    """K parameters x J initial times x I horizons, drawn uniformly.

    Each draw comes from its own counter-derived random stream, so any record
    can be regenerated independently of the others.
    """
    if min(K, J, I) < 1:
        raise ConfigurationError(f"K, J, I must be >= 1, got {(K, J, I)}")
    records = []
    lo_s, hi_s = config.tau_steps_range
    for k in range(K):
        zeta = np.array([_stream(seed, 0, k).uniform(*config.re_range)])
        for j in range(J):
            t = float(_stream(seed, 1, k, j).uniform(*config.t0_range))
            u_now = snapshot(config, t, zeta)
            for i in range(I):
                steps = int(_stream(seed, 2, k, j, i).integers(lo_s, hi_s + 1))
                tau = steps * config.dt
                u_future = snapshot(config, t + tau, zeta)
                records.append(TupleRecord(u_now, u_future, t, tau, steps, zeta, k, j, i))
    return records


def stack_records(records: Sequence[TupleRecord]) -> dict[str, np.ndarray]:
    """Columnar view of a record list (arrays share no memory with records)."""
    return {
        "u_now": np.stack([r.u_now for r in records]),
        "u_future": np.stack([r.u_future for r in records]),
        "t": np.array([r.t for r in records]),
        "tau": np.array([r.tau for r in records]),
        "zeta": np.stack([np.ravel(r.zeta) for r in records]),
    }


DATASET_MAGIC = b"FVDS"
DATASET_VERSION = 1


def dataset_to_bytes(config: PDEConfig, records: Sequence[TupleRecord]) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", DATASET_VERSION))
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<Q", len(records)))
    for r in records:
        buf.write(struct.pack("<3I3d", r.k, r.j, r.i, r.t, r.tau, float(np.ravel(r.zeta)[0])))
        for arr in (r.u_now, r.u_future):
            flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
            buf.write(struct.pack("<I", flat.size))
            buf.write(flat.tobytes())
    return buf.getvalue()


def dataset_from_bytes(blob: bytes) -> tuple[PDEConfig, list[TupleRecord]]:
    if blob[:4] != DATASET_MAGIC:
        raise ConfigurationError("not a dataset file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != DATASET_VERSION:
        raise ConfigurationError(f"unsupported dataset version {version}")
    (clen,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    config = config_from_dict(json.loads(blob[pos : pos + clen].decode("utf-8")))
    pos += clen
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    shape = config.state_shape
    head = struct.calcsize("<3I3d")
    records = []
    for _ in range(count):
        k, j, i, t, tau, zeta = struct.unpack_from("<3I3d", blob, pos)
        pos += head
        arrays = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape))
            pos += 8 * n
        steps = int(round(tau / config.dt))
        records.append(TupleRecord(arrays[0], arrays[1], t, tau, steps, np.array([zeta]), k, j, i))
    return config, records


def save_dataset(path: str | Path, config: PDEConfig, records: Sequence[TupleRecord]) -> None:
    Path(path).write_bytes(dataset_to_bytes(config, records))


def load_dataset(path: str | Path) -> tuple[PDEConfig, list[TupleRecord]]:
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- zone split

ZONES = ("interp", "left", "right")


@dataclass
class ZoneBox:
    """Training box in (zeta, t + tau) space."""

    re_lo: float
    re_hi: float
    tplus_lo: float
    tplus_hi: float

    def classify(self, zeta, tplus) -> np.ndarray:
        """Zone label per point: inside the box is interpolation; outside, the
        side with the larger normalised overshoot wins."""
        z = np.atleast_1d(np.asarray(zeta, dtype=np.float64))
        s = np.atleast_1d(np.asarray(tplus, dtype=np.float64))
        span_z = max(self.re_hi - self.re_lo, 1e-12)
        span_s = max(self.tplus_hi - self.tplus_lo, 1e-12)
        below = np.maximum(self.re_lo - z, 0) / span_z + np.maximum(self.tplus_lo - s, 0) / span_s
        above = np.maximum(z - self.re_hi, 0) / span_z + np.maximum(s - self.tplus_hi, 0) / span_s
        out = np.full(z.shape, "interp", dtype=object)
        outside = (below > 0) | (above > 0)
        out[outside & (below >= above)] = "left"
        out[outside & (below < above)] = "right"
        return out


@dataclass
class DatasetSplit:
    train: list[TupleRecord]
    val_interp: list[TupleRecord]
    val_left_extrap: list[TupleRecord]
    val_right_extrap: list[TupleRecord]
    box: ZoneBox
    config: PDEConfig | None = None
    meta: dict = field(default_factory=dict)

    def zone(self, name: str) -> list[TupleRecord]:
        return {"interp": self.val_interp, "left": self.val_left_extrap, "right": self.val_right_extrap}[name]

    def counts(self) -> dict[str, int]:
        return {
            "train": len(self.train),
            "interp": len(self.val_interp),
            "left": len(self.val_left_extrap),
            "right": len(self.val_right_extrap),
        }


def split_dataset(
    records: Sequence[TupleRecord], train_frac: float = 0.7, seed: int = 0, config: PDEConfig | None = None
) -> DatasetSplit:
    """Partition records into a training set and three validation zones.

    The training box spans the central ``train_frac`` quantile range of zeta
    and of t + tau. Records inside the box are shuffled and divided
    ``train_frac`` / ``1 - train_frac`` between training and interpolation;
    records outside it are extrapolation, left or right by
    :meth:`ZoneBox.classify`.
    """
    if not 0.0 < train_frac < 1.0:
        raise ConfigurationError(f"train_frac must lie in (0, 1), got {train_frac}")
    if len(records) < 10:
        raise ConfigurationError(f"need at least 10 records to split, got {len(records)}")
    zeta = np.array([float(np.ravel(r.zeta)[0]) for r in records])
    tplus = np.array([r.t + r.tau for r in records])
    q = ((1.0 - train_frac) / 2.0, (1.0 + train_frac) / 2.0)
    zlo, zhi = np.quantile(zeta, q)
    slo, shi = np.quantile(tplus, q)
    box = ZoneBox(float(zlo), float(zhi), float(slo), float(shi))
    labels = box.classify(zeta, tplus)

    inside = np.flatnonzero(labels == "interp")
    order = np.random.default_rng(seed).permutation(inside)
    n_train = int(round(train_frac * len(order)))
    train_idx = np.sort(order[:n_train])
    interp_idx = np.sort(order[n_train:])
    return DatasetSplit(
        train=[records[i] for i in train_idx],
        val_interp=[records[i] for i in interp_idx],
        val_left_extrap=[records[i] for i in np.flatnonzero(labels == "left")],
        val_right_extrap=[records[i] for i in np.flatnonzero(labels == "right")],
        box=box,
        config=config,
        meta={"train_frac": train_frac, "seed": seed},
    )


def split_to_dict(split: DatasetSplit) -> dict:
    """JSON-ready description of a split: the box and the record keys per part."""
    return {
        "box": asdict(split.box),
        "meta": dict(split.meta),
        "parts": {
            "train": [list(r.key) for r in split.train],
            "interp": [list(r.key) for r in split.val_interp],
            "left": [list(r.key) for r in split.val_left_extrap],
            "right": [list(r.key) for r in split.val_right_extrap],
        },
    }


def split_from_dict(d: dict, records: Sequence[TupleRecord], config: PDEConfig | None = None) -> DatasetSplit:
    """Rebuild a :class:`DatasetSplit` over ``records`` from :func:`split_to_dict` output."""
    by_key = {r.key: r for r in records}
    try:
        parts = {name: [by_key[tuple(k)] for k in d["parts"][name]] for name in ("train", *ZONES)}
        box = ZoneBox(**d["box"])
    except KeyError as exc:
        raise ConfigurationError(f"split does not match the dataset or is missing {exc}") from None
    return DatasetSplit(parts["train"], parts["interp"], parts["left"], parts["right"], box, config, d.get("meta", {}))
