"""Flexi-VAE network: convolutional VAE plus a parametric latent propagator.

Parameters live in a single :class:`ParameterStore` under three prefixes,
``enc/``, ``dec/`` and ``prop/``. The reconstruction and forecast paths call
the same :meth:`FlexiVAE.decode`, so they share the decoder tensors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import ParameterStore, Tensor, glorot_uniform, no_grad, ops
from .errors import ConfigurationError, DimensionError, StateError

ACTIVATIONS = ("relu", "tanh", "sigmoid")
LOG_VAR_CLAMP = 10.0


@dataclass(frozen=True)
class EncoderDecoderConfig:
    state_shape: tuple[int, ...] = (128,)
    latent_dim: int = 2
    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int | None = None  # 5 in 1D, 3 in 2D
    stride: int = 2
    groups: int = 4
    head_widths: tuple[int, ...] = (128,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "state_shape", tuple(int(v) for v in self.state_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "head_widths", tuple(int(v) for v in self.head_widths))
        if self.kernel is None:
            object.__setattr__(self, "kernel", 5 if len(self.state_shape) == 1 else 3)
        if len(self.state_shape) not in (1, 2):
            raise ConfigurationError(f"state_shape must be 1D or 2D, got {self.state_shape}")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if not self.channels or min(self.channels) < 1:
            raise ConfigurationError("channels must be a nonempty list of positive ints")
        if min(self.head_widths, default=1) < 1:
            raise ConfigurationError("head widths must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError("kernel must be a positive odd integer")
        if self.stride < 1:
            raise ConfigurationError("stride must be >= 1")
        if any(c % self.groups for c in self.channels):
            raise ConfigurationError(f"every channel count must be divisible by groups={self.groups}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        factor = self.stride ** len(self.channels)
        if any(s % factor for s in self.state_shape):
            raise ConfigurationError(
                f"state dims {self.state_shape} must be divisible by stride**depth = {factor} "
                "so the decoder can mirror the encoder"
            )

    @property
    def reduced_shape(self) -> tuple[int, ...]:
        factor = self.stride ** len(self.channels)
        return tuple(s // factor for s in self.state_shape)

    @property
    def spatial_ndim(self) -> int:
        return len(self.state_shape)


@dataclass(frozen=True)
class PropagatorConfig:
    kind: str = "dcp"
    hidden: tuple[int, ...] = (64, 64)
    embedding_dim: int = 64
    zeta_scale: float = 2400.0
    tau_scale: float = 450 * 0.004
    # PE consumes pe_scale * (normalised value) so its frequencies see O(100) inputs
    pe_scale: float = 100.0
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.kind not in ("dcp", "pep"):
            raise ConfigurationError(f"propagator kind must be 'dcp' or 'pep', got {self.kind!r}")
        if min(self.hidden, default=1) < 1:
            raise ConfigurationError("hidden widths must be positive")
        if self.zeta_scale <= 0 or self.tau_scale <= 0:
            raise ConfigurationError("normalisation scales must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        if self.kind == "pep" and (self.embedding_dim < 2 or self.embedding_dim % 2):
            raise ConfigurationError("PEP embedding_dim must be even")


class LatentSample(NamedTuple):
    mu: Tensor
    log_var: Tensor
    z: Tensor
    epsilon: np.ndarray


class LossTerms(NamedTuple):
    total: Tensor
    re: Tensor
    pre: Tensor
    kl: Tensor


def positional_encoding(value, d: int) -> np.ndarray:
    """Sinusoidal embedding; ``out[..., 2f] = sin(v w_f)``, ``out[..., 2f+1] = cos(v w_f)``
    with ``w_f = 10000**(-2f/d)``. Scalars give shape ``(d,)``, arrays ``(*shape, d)``."""
    if d < 2 or d % 2:
        raise ConfigurationError(f"positional encoding needs an even dimension, got {d}")
    v = np.asarray(value, dtype=np.float64)
    omega = 1.0 / 10000.0 ** (2.0 * np.arange(d // 2) / d)
    arg = v[..., None] * omega
    out = np.empty(v.shape + (d,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def reparameterize(mu: Tensor, log_var: Tensor, rng: np.random.Generator) -> LatentSample:
    """``z = mu + exp(log_var / 2) * eps``; eps is a constant, so gradients reach mu and log_var only."""
    mu, log_var = ops.as_tensor(mu), ops.as_tensor(log_var)
    eps = rng.standard_normal(mu.shape)
    z = ops.add(mu, ops.mul(ops.exp(ops.scale(log_var, 0.5)), Tensor(eps)))
    return LatentSample(mu, log_var, z, eps)


def kl_divergence(mu, log_var) -> Tensor:
    """Batch mean of ``-1/2 sum_j (1 + log_var_j - mu_j^2 - exp(log_var_j))``."""
    mu, log_var = ops.as_tensor(mu), ops.as_tensor(log_var)
    if mu.ndim == 1:
        mu, log_var = ops.reshape(mu, (1, -1)), ops.reshape(log_var, (1, -1))
    inner = ops.sub(ops.add(ops.square(mu), ops.exp(log_var)), ops.add(log_var, 1.0))
    per_sample = ops.scale(ops.sum(inner, axis=1), 0.5)
    return ops.mean(per_sample)


def _sq_norm_mean(pred: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of per-sample squared L2 norms."""
    diff = ops.sub(pred, Tensor(target))
    b = diff.shape[0]
    return ops.scale(ops.sum(ops.square(diff)), 1.0 / b)


class FlexiVAE:
    """Encoder, decoder and propagator with their parameters.

    ``seed=None`` builds an unloaded model whose parameters must be supplied
    with :meth:`load_params` before use.
    """

    def __init__(
        self,
        arch: EncoderDecoderConfig | None = None,
        prop: PropagatorConfig | None = None,
        seed: int | None = 0,
        params: ParameterStore | None = None,
    ):
        self.arch = arch or EncoderDecoderConfig()
        self.prop = prop or PropagatorConfig()
        if self.prop.kind == "pep" and self.prop.embedding_dim <= self.arch.latent_dim:
            raise ConfigurationError("PEP embedding_dim must exceed the latent dimension")
        self.params: ParameterStore | None = None
        if params is not None:
            self.load_params(params)
        elif seed is not None:
            self.params = self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------ parameters

    @property
    def loaded(self) -> bool:
        return self.params is not None

    def _require(self) -> ParameterStore:
        if self.params is None:
            raise StateError("model parameters are not loaded")
        return self.params

    @property
    def theta_e(self) -> ParameterStore:
        return self._require().subset("enc/")

    @property
    def theta_d(self) -> ParameterStore:
        return self._require().subset("dec/")

    @property
    def theta_p(self) -> ParameterStore:
        return self._require().subset("prop/")

    def load_params(self, params: ParameterStore) -> None:
        expected = self._init_params(np.random.default_rng(0))
        if list(expected) != list(params):
            raise ConfigurationError("parameter paths do not match the architecture")
        for key in expected:
            if expected[key].shape != params[key].shape:
                raise DimensionError(f"{key}: expected shape {expected[key].shape}, got {params[key].shape}")
        self.params = params

    def _init_params(self, rng: np.random.Generator) -> ParameterStore:
        a, p = self.arch, self.prop
        store = ParameterStore()
        k, nd = a.kernel, a.spatial_ndim
        kshape = (k,) * nd

        def conv(prefix, cin, cout):
            fan_in, fan_out = cin * k**nd, cout * k**nd
            store.add(f"{prefix}/w", glorot_uniform(rng, (cout, cin, *kshape), fan_in, fan_out))
            store.add(f"{prefix}/b", np.zeros(cout))

        def dense(prefix, nin, nout):
            store.add(f"{prefix}/w", glorot_uniform(rng, (nin, nout), nin, nout))
            store.add(f"{prefix}/b", np.zeros(nout))

        def gn(prefix, c):
            store.add(f"{prefix}/g", np.ones(c))
            store.add(f"{prefix}/b", np.zeros(c))

        cin = 1
        for i, c in enumerate(a.channels):
            conv(f"enc/conv{i}", cin, c)
            gn(f"enc/gn{i}", c)
            cin = c
        flat = a.channels[-1] * int(np.prod(a.reduced_shape))
        width = flat
        for i, h in enumerate(a.head_widths):
            dense(f"enc/fc{i}", width, h)
            width = h
        dense("enc/head", width, 2 * a.latent_dim)

        width = a.latent_dim
        for i, h in enumerate(a.head_widths):
            dense(f"dec/fc{i}", width, h)
            width = h
        dense("dec/expand", width, flat)
        outs = list(reversed(a.channels[:-1])) + [a.channels[0]]
        cin = a.channels[-1]
        for i, c in enumerate(outs):
            conv(f"dec/conv{i}", cin, c)
            gn(f"dec/gn{i}", c)
            cin = c
        conv("dec/out", cin, 1)

        m = a.latent_dim
        if p.kind == "dcp":
            width = m + 2
            for i, h in enumerate(p.hidden):
                dense(f"prop/fc{i}", width, h)
                width = h
            dense("prop/out", width, m)
        else:
            dense("prop/up", m, p.embedding_dim)
            dense("prop/down", p.embedding_dim, m)
        return store

    # ------------------------------------------------------------ network pieces

    def _act(self, x: Tensor, kind: str | None = None) -> Tensor:
        return ops.activation(x, kind or self.arch.activation)

    def _conv(self, x: Tensor, prefix: str, stride: int) -> Tensor:
        P = self.params
        conv = ops.conv1d if self.arch.spatial_ndim == 1 else ops.conv2d
        return conv(x, P[f"{prefix}/w"], stride=stride, padding=self.arch.kernel // 2, bias=P[f"{prefix}/b"])

    def _gn(self, x: Tensor, prefix: str) -> Tensor:
        P = self.params
        return ops.group_norm(x, self.arch.groups, P[f"{prefix}/g"], P[f"{prefix}/b"])

    def _dense(self, x: Tensor, prefix: str) -> Tensor:
        return ops.dense(x, self.params[f"{prefix}/w"], self.params[f"{prefix}/b"])

    def _as_batch(self, u) -> tuple[np.ndarray | Tensor, bool]:
        shape = tuple(u.shape)
        s = self.arch.state_shape
        if shape == s:
            return (ops.reshape(u, (1, *s)) if isinstance(u, Tensor) else np.asarray(u)[None]), True
        if shape[1:] == s:
            return u, False
        raise DimensionError(f"state shape {shape} does not match configured {s} (optionally batched)")

    def encode(self, u) -> tuple[Tensor, Tensor]:
        """Posterior mean and log-variance, each of shape (batch, m)."""
        self._require()
        a = self.arch
        u, _ = self._as_batch(u)
        b = u.shape[0]
        h = ops.reshape(ops.as_tensor(u), (b, 1, *a.state_shape))
        for i in range(len(a.channels)):
            h = self._act(self._gn(self._conv(h, f"enc/conv{i}", a.stride), f"enc/gn{i}"))
        h = ops.reshape(h, (b, -1))
        for i in range(len(a.head_widths)):
            h = self._act(self._dense(h, f"enc/fc{i}"))
        h = self._dense(h, "enc/head")
        m = a.latent_dim
        mu = h[:, :m]
        log_var = ops.clip(h[:, m:], -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        return mu, log_var

    def decode(self, z) -> Tensor:
        """Field of shape (batch, *state_shape) from latents of shape (batch, m)."""
        self._require()
        a = self.arch
        z = ops.as_tensor(z)
        if z.ndim == 1:
            z = ops.reshape(z, (1, -1))
        if z.ndim != 2 or z.shape[1] != a.latent_dim:
            raise DimensionError(f"latent shape {z.shape} does not match latent_dim={a.latent_dim}")
        b = z.shape[0]
        h = z
        for i in range(len(a.head_widths)):
            h = self._act(self._dense(h, f"dec/fc{i}"))
        h = self._act(self._dense(h, "dec/expand"))
        h = ops.reshape(h, (b, a.channels[-1], *a.reduced_shape))
        for i in range(len(a.channels)):
            h = ops.upsample(h, a.stride)
            h = self._act(self._gn(self._conv(h, f"dec/conv{i}", 1), f"dec/gn{i}"))
        h = self._conv(h, "dec/out", 1)
        return ops.reshape(h, (b, *a.state_shape))

    def _conditioning(self, zeta, tau, b: int) -> tuple[np.ndarray, np.ndarray]:
        zeta = np.asarray(zeta, dtype=np.float64)
        tau = np.asarray(tau, dtype=np.float64)
        zeta = np.broadcast_to(zeta.reshape(-1, 1) if zeta.ndim <= 1 else zeta[:, :1], (b, 1))
        tau = np.broadcast_to(tau.reshape(-1), (b,))
        if not (np.all(np.isfinite(zeta)) and np.all(np.isfinite(tau))):
            raise ConfigurationError("zeta and tau must be finite")
        return zeta / self.prop.zeta_scale, tau / self.prop.tau_scale

    def propagate_dcp(self, z, zeta, tau) -> Tensor:
        z = ops.as_tensor(z)
        zn, tn = self._conditioning(zeta, tau, z.shape[0])
        h = ops.concat([z, Tensor(zn), Tensor(tn[:, None])], axis=1)
        for i in range(len(self.prop.hidden)):
            h = ops.activation(self._dense(h, f"prop/fc{i}"), self.prop.activation)
        return self._dense(h, "prop/out")

    def propagate_pep(self, z, zeta, tau) -> Tensor:
        z = ops.as_tensor(z)
        zn, tn = self._conditioning(zeta, tau, z.shape[0])
        d, s = self.prop.embedding_dim, self.prop.pe_scale
        pe = positional_encoding(s * zn[:, 0], d) + positional_encoding(s * tn, d)
        up = ops.relu(self._dense(z, "prop/up"))
        return self._dense(ops.add(up, Tensor(pe)), "prop/down")

    def propagate(self, z, zeta, tau) -> Tensor:
        self._require()
        if self.prop.kind == "dcp":
            return self.propagate_dcp(z, zeta, tau)
        return self.propagate_pep(z, zeta, tau)

    # ------------------------------------------------------------ inference

    def forecast(self, u_now, tau, zeta) -> np.ndarray:
        """Single-shot forecast ``decode(propagate(mu(u_now), zeta, tau))``.

        Accepts one state or a batch; the output matches the input's batching.
        """
        self._require()
        u, single = self._as_batch(np.asarray(u_now, dtype=np.float64))
        with no_grad():
            mu, _ = self.encode(u)
            out = self.decode(self.propagate(mu, zeta, tau)).data
        return out[0] if single else out

    def reconstruct(self, u) -> np.ndarray:
        self._require()
        u, single = self._as_batch(np.asarray(u, dtype=np.float64))
        with no_grad():
            mu, _ = self.encode(u)
            out = self.decode(mu).data
        return out[0] if single else out

    def encode_mean(self, u) -> np.ndarray:
        self._require()
        u, single = self._as_batch(np.asarray(u, dtype=np.float64))
        with no_grad():
            mu, _ = self.encode(u)
        return mu.data[0] if single else mu.data

    # ------------------------------------------------------------ checkpoints

    def config_dict(self) -> dict:
        return {"arch": asdict(self.arch), "prop": asdict(self.prop)}

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self._require().save(d / "params.fvps")
        (d / "model.json").write_text(json.dumps(self.config_dict(), indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def from_config_dict(cls, cfg: dict, seed: int | None = None) -> "FlexiVAE":
        return cls(EncoderDecoderConfig(**cfg["arch"]), PropagatorConfig(**cfg["prop"]), seed=seed)

    @classmethod
    def load(cls, directory: str | Path) -> "FlexiVAE":
        d = Path(directory)
        if not (d / "params.fvps").exists() or not (d / "model.json").exists():
            raise StateError(f"no checkpoint found in {d}")
        model = cls.from_config_dict(json.loads((d / "model.json").read_text()))
        model.load_params(ParameterStore.load(d / "params.fvps"))
        return model


def loss_total(batch, model: FlexiVAE, beta: float, eta: float, rng: np.random.Generator) -> LossTerms:
    """``L = L_RE + eta L_PRE + beta L_KL`` on one mini-batch.

    ``batch`` is a list of records or the dict from :func:`stack_records`.
    L_RE and L_PRE are batch means of per-sample squared L2 norms.
    """
    if beta < 0 or eta < 0:
        raise ConfigurationError("beta and eta must be non-negative")
    if not isinstance(batch, dict):
        from .pde import stack_records

        batch = stack_records(batch)
    mu, log_var = model.encode(batch["u_now"])
    sample = reparameterize(mu, log_var, rng)
    l_re = _sq_norm_mean(model.decode(sample.z), batch["u_now"])
    z_hat = model.propagate(sample.z, batch["zeta"], batch["tau"])
    l_pre = _sq_norm_mean(model.decode(z_hat), batch["u_future"])
    l_kl = kl_divergence(mu, log_var)
    total = ops.add(ops.add(l_re, ops.scale(l_pre, eta)), ops.scale(l_kl, beta))
    return LossTerms(total, l_re, l_pre, l_kl)


def default_arch(state_shape: Sequence[int], latent_dim: int | None = None, **kw) -> EncoderDecoderConfig:
    if latent_dim is None:
        latent_dim = 2 if len(state_shape) == 1 else 3
    return EncoderDecoderConfig(state_shape=tuple(state_shape), latent_dim=latent_dim, **kw)
